//! Input loading for the CLI.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shardlearn::ingest::open_stream;
use shardlearn::oracle::DensePoint;
use shardlearn::{expand_and_hash, Example, InteractionSpec};

/// Parses `--quadratic` values: `AB` pairs single-letter namespaces, `foo:bar`
/// pairs longer names.
pub fn parse_quadratic(values: &[String]) -> Result<InteractionSpec> {
    let mut pairs = Vec::with_capacity(values.len());
    for v in values {
        let pair = match v.split_once(':') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() => (a.to_string(), b.to_string()),
            Some(_) => bail!("bad --quadratic {v:?}: empty namespace"),
            None => {
                let chars: Vec<char> = v.chars().collect();
                if chars.len() != 2 {
                    bail!("bad --quadratic {v:?}: use two namespace letters or `a:b`");
                }
                (chars[0].to_string(), chars[1].to_string())
            }
        };
        pairs.push(pair);
    }
    Ok(InteractionSpec::new(pairs)?)
}

/// Reads and hashes every instance of a text stream (`-` is stdin).
pub fn load_examples(path: &Path, bits: u32, q: &InteractionSpec) -> Result<Vec<Example>> {
    let name = path.to_string_lossy();
    let stream = open_stream(&name).with_context(|| format!("opening {name}"))?;
    let mut out = Vec::new();
    for inst in stream {
        let inst = inst.with_context(|| format!("reading {name}"))?;
        out.push(Example::new(expand_and_hash(&inst, q, bits)?, inst.label));
    }
    Ok(out)
}

/// Deterministic reordering; the same seed always gives the same order.
pub fn shuffle(data: &mut [Example], seed: u64) {
    data.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}

/// Dense CSV points: one row per point, the last column is the label. Blank
/// lines and `#` comments are skipped, and a non-numeric first row is taken
/// as a header.
pub fn parse_dense_csv(text: &str) -> Result<Vec<DensePoint>> {
    let mut points = Vec::new();
    let mut width = None;
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if points.is_empty() && width.is_none() => {
                width = Some(line.split(',').count());
                continue;
            }
            Err(e) => bail!("line {}: {e}", k + 1),
        };
        if row.len() < 2 {
            bail!("line {}: need at least one feature and a label", k + 1);
        }
        if *width.get_or_insert(row.len()) != row.len() {
            bail!("line {}: expected {} columns, found {}", k + 1, width.unwrap_or(0), row.len());
        }
        let (y, x) = row.split_last().expect("row has at least two columns");
        points.push((x.to_vec(), *y));
    }
    if points.is_empty() {
        bail!("no data rows");
    }
    Ok(points)
}

pub fn load_dense_csv(path: &Path) -> Result<Vec<DensePoint>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_dense_csv(&text).with_context(|| format!("parsing {}", path.display()))
}
