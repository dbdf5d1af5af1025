//! Criterion benchmarks for shardlearn; see `benches/learners.rs`.
