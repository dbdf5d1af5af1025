//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Tolerances and runtime limits are fixed here and never relaxed.
//!
//! Run with `cargo test -p shardlearn-cli --test acceptance`.

#![allow(clippy::needless_range_loop)]

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use shardlearn::delay::{delayed_sgd_run, hindsight_oracle, make_adversarial_stream, regret_report};
use shardlearn::global::{
    backprop_gradients, corrective_update, delayed_global_update, step_delta, train_minibatch, train_minibatch_cg,
    PendingRecord,
};
use shardlearn::learner::SgdLearner;
use shardlearn::local::run_local_pipeline;
use shardlearn::oracle::{least_squares, moments, mse, naive_bayes_weights, tree_fixed_point, DensePoint};
use shardlearn::sched::{Action, Mode, SimConfig, TraceRow};
use shardlearn::topology::{make_shard_plan, ShardKind, Topology, TreeShape};
use shardlearn::{
    run_simulation, train_sequential, Example, GlobalRule, LossSpec, NodeSchedules, RuleKind, ScheduleSpec,
    SparseVector, TreeLearner,
};

const LOSS: LossSpec = LossSpec::Squared;

struct Check {
    ok: bool,
    detail: String,
}

fn check(ok: bool, detail: impl Into<String>) -> Check {
    Check { ok, detail: detail.into() }
}

/// Joins sub-checks; the criterion passes only if all of them do.
fn all(parts: Vec<Check>) -> Check {
    let ok = parts.iter().all(|c| c.ok);
    let detail = parts
        .iter()
        .map(|c| if c.ok { c.detail.clone() } else { format!("FAILED {}", c.detail) })
        .collect::<Vec<_>>()
        .join("; ");
    check(ok, detail)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn bits(w: &[f64]) -> Vec<u64> {
    w.iter().map(|v| v.to_bits()).collect()
}

fn three_feature_points() -> Vec<DensePoint> {
    vec![
        (vec![1.0, 1.0, -0.5], 1.0),
        (vec![1.0, -1.0, -1.0], -1.0),
        (vec![-1.0, -1.0, -0.5], 1.0),
        (vec![-1.0, 1.0, 1.0], 1.0),
    ]
}

fn redundant_points() -> Vec<DensePoint> {
    vec![
        (vec![1.0, -1.0, -1.0], -1.0),
        (vec![-1.0, 1.0, -1.0], -1.0),
        (vec![1.0, 1.0, -1.0], 1.0),
        (vec![1.0, 1.0, -1.0], 1.0),
    ]
}

fn examples(points: &[DensePoint]) -> Vec<Example> {
    points.iter().map(|(x, y)| Example::dense(x, *y)).collect()
}

/// Leaves `x1`, `x2`, `x3`; `x1` and `x2` share a parent, `x3` sits alone
/// under the other; both meet at the root.
fn three_leaf_tree() -> Topology {
    Topology::from_shape(&TreeShape::parse("((0 1) (2))").unwrap(), 0).unwrap()
}

fn dense_weights(v: &SparseVector, dim: usize) -> Vec<f64> {
    let mut w = vec![0.0; dim];
    for (i, x) in v.iter() {
        w[i as usize] = x;
    }
    w
}

fn random_unit_ball(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    let r: f64 = rng.gen_range(0.0..1.0);
    v.iter().map(|a| a / n * r).collect()
}

fn random_sparse_stream(rng: &mut ChaCha8Rng, n: usize, dim: u32, nnz: usize) -> Vec<Example> {
    let truth: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (0..n)
        .map(|_| {
            let x = SparseVector::from_unsorted((0..nnz).map(|_| (rng.gen_range(0..dim), rng.gen_range(-1.0..1.0))).collect());
            let y = x.iter().map(|(i, v)| v * truth[i as usize]).sum::<f64>() + rng.gen_range(-0.1..0.1);
            Example::new(x, y)
        })
        .collect()
}

// 1. Exact closed forms on the three-feature dataset.
fn naive_bayes_and_tree_exact() -> Check {
    let pts = three_feature_points();
    let m = moments(&pts).unwrap();
    let nb = naive_bayes_weights(&m);
    let nb_mse = mse(&nb.w, &pts).unwrap();
    let topo = three_leaf_tree();
    let plan = make_shard_plan(ShardKind::Feature, 3, 0).unwrap();
    let fp = tree_fixed_point(&topo, &plan, &m).unwrap();
    let leaves: Vec<f64> = fp.layer_weights(&topo, 0).concat();
    let l1 = fp.layer_weights(&topo, 1);
    let root = &fp.node_weights[topo.root()];
    let tree_mse = mse(&fp.effective, &pts).unwrap();
    let l1_err = max_abs_diff(&l1.concat(), &[1.0, 1.0, 1.0]);
    all(vec![
        check(max_abs_diff(&nb.w, &[-0.5, 0.5, 0.4]) <= 1e-12, format!("naive Bayes w={:?}", nb.w)),
        check((nb_mse - 0.8).abs() <= 1e-12, format!("naive Bayes mse={nb_mse}")),
        check(max_abs_diff(&leaves, &[-0.5, 0.5, 0.4]) <= 1e-10, format!("leaves={leaves:?}")),
        check(l1.len() == 2 && l1[0].len() == 2 && l1_err <= 1e-10, format!("layer 1={l1:?}")),
        check(max_abs_diff(root, &[3.0, -5.0]) <= 1e-10, format!("root={root:?}")),
        check(max_abs_diff(&fp.effective, &[-1.5, 1.5, -2.0]) <= 1e-10, format!("overall={:?}", fp.effective)),
        check(tree_mse.abs() <= 1e-10, format!("tree mse={tree_mse:e}")),
    ])
}

// 2. Least squares fits exactly, naive Bayes and the tree cannot.
fn redundant_feature_limits() -> Check {
    let pts = redundant_points();
    let m = moments(&pts).unwrap();
    let ls = least_squares(&m);
    let ls_mse = mse(&ls.w, &pts).unwrap();
    let nb = naive_bayes_weights(&m);
    let nb_mse = mse(&nb.w, &pts).unwrap();
    let topo = three_leaf_tree();
    let plan = make_shard_plan(ShardKind::Feature, 3, 0).unwrap();
    let fp = tree_fixed_point(&topo, &plan, &m).unwrap();
    let tree_mse = mse(&fp.effective, &pts).unwrap();
    all(vec![
        check(max_abs_diff(&ls.w, &[1.0, 1.0, 1.0]) <= 1e-12 && ls_mse <= 1e-12, format!("least squares w={:?} mse={ls_mse:e}", ls.w)),
        check(nb.w[2].abs() <= 1e-12 && nb_mse >= 0.5 - 1e-10, format!("naive Bayes w3={:e} mse={nb_mse}", nb.w[2])),
        check(fp.effective[2].abs() <= 1e-12 && tree_mse >= 0.5 - 1e-10, format!("tree w3={:e} mse={tree_mse}", fp.effective[2])),
    ])
}

// 3. Online training reaches the closed forms.
fn online_reaches_oracle() -> Check {
    let pts = three_feature_points();
    let topo = three_leaf_tree();
    let plan = make_shard_plan(ShardKind::Feature, 3, 2).unwrap();
    let fp = tree_fixed_point(&topo, &plan, &moments(&pts).unwrap()).unwrap();
    // Leaves average with 1/t steps; internal nodes use a slowly decaying
    // power schedule because their inputs keep moving while leaves settle.
    let schedules = NodeSchedules::split(
        &topo,
        ScheduleSpec::strongly_convex(1.0, 0).unwrap(),
        ScheduleSpec::power(1.0, 1000.0).unwrap(),
    );
    let tree = run_local_pipeline(&topo, &plan, &examples(&pts), &schedules, 2, LOSS, 10_000).unwrap();
    let eff = tree.effective_weights().unwrap();
    let w = dense_weights(&eff.weights, 3);
    let tree_err = max_abs_diff(&w, &fp.effective);

    let red = redundant_points();
    let (model, _) = train_sequential(&examples(&red), 2, ScheduleSpec::power(0.5, 1.0).unwrap(), LOSS, 10_000).unwrap();
    let seq_mse = mse(&model.weights()[..3], &red).unwrap();
    all(vec![
        check(tree_err <= 1e-2 && eff.bias == 0.0, format!("tree max |w - w_fp|={tree_err:.2e} w={w:.4?}")),
        check(seq_mse <= 1e-3, format!("sequential mse={seq_mse:.2e}")),
    ])
}

// 4. Measured regret under delay stays below 4 R L sqrt(tau T).
fn delayed_regret_bound() -> Check {
    const T: u64 = 512;
    const DIM: usize = 5;
    const L: f64 = 2.0;
    let taus = [1u64, 2, 4, 8];
    let mut runs = 0;
    let mut violations = Vec::new();
    let mut worst_ratio: f64 = f64::NEG_INFINITY;
    let mut max_grad: f64 = 0.0;
    let mut evaluate = |data: &[Example], label: String| {
        let hs = hindsight_oracle(data, LOSS).unwrap();
        // R must bound the comparator's norm; at least 1 keeps the step
        // size meaningful when the comparator is zero.
        let r = hs.w.norm_sq().sqrt().max(1.0);
        for &tau in &taus {
            let s = ScheduleSpec::worst_case_delay(r, L, tau).unwrap();
            let run = delayed_sgd_run(data, 4, tau, s, LOSS).unwrap();
            let rep = regret_report(data, &run.log, &hs.w, r, L, tau, LOSS).unwrap();
            runs += 1;
            worst_ratio = worst_ratio.max(rep.regret / rep.bound_4rl_sqrt_tau_t);
            max_grad = run.log.iter().fold(max_grad, |m, st| m.max(st.grad_norm));
            if rep.regret > rep.bound_4rl_sqrt_tau_t {
                violations.push(format!("{label} tau={tau}: {}", rep.csv_row()));
            }
        }
    };
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_unit_ball(&mut rng, DIM);
        let data: Vec<Example> = (0..T)
            .map(|_| {
                let x = random_unit_ball(&mut rng, DIM);
                let y = (x.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() + rng.gen_range(-0.5..0.5)).clamp(-1.0, 1.0);
                Example::dense(&x, y)
            })
            .collect();
        evaluate(&data, format!("random seed {seed}"));
    }
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let base = Example::dense(&random_unit_ball(&mut rng, DIM), rng.gen_range(-1.0..1.0));
        for &tau in &taus {
            let data = make_adversarial_stream(&base, tau, T).unwrap();
            evaluate(&data, format!("adversarial seed {seed} blocks {tau}"));
        }
    }
    check(
        violations.is_empty(),
        format!(
            "{runs} runs, {} violations, max regret/bound={worst_ratio:.3}, max gradient norm={max_grad:.3}{}",
            violations.len(),
            violations.first().map(|v| format!(", first: {v}")).unwrap_or_default()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

// 5. Longer delays do no better on duplicate blocks.
fn delay_degrades_adversarial() -> Check {
    const T: u64 = 1024;
    let s = ScheduleSpec::power(0.5, 1.0).unwrap();
    let taus = [1u64, 2, 4, 8, 16];
    let bases: Vec<Example> = (0..20u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(20_000 + seed);
            let x = random_unit_ball(&mut rng, 8);
            let y = if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.5..1.0);
            Example::dense(&x, y)
        })
        .collect();
    let medians: Vec<f64> = taus
        .iter()
        .map(|&tau| {
            median(
                bases
                    .iter()
                    .map(|b| {
                        let data = make_adversarial_stream(b, tau, T).unwrap();
                        delayed_sgd_run(&data, 4, tau, s, LOSS).unwrap().metrics.mean_sq_loss()
                    })
                    .collect(),
            )
        })
        .collect();
    let monotone = medians.windows(2).all(|w| w[0] <= w[1]);
    check(monotone, format!("median progressive loss by tau {taus:?}: {medians:.5?}"))
}

/// Dense conjugate gradient reference; shares no code with the lazy one.
/// With `reversed`, the dense reductions are summed in the opposite order,
/// which measures how much rounding alone moves the reference.
fn dense_cg(data: &[Example], size: usize, b: usize, s: &ScheduleSpec, reversed: bool) -> Vec<f64> {
    let sum = |v: Vec<f64>| if reversed { v.iter().rev().sum::<f64>() } else { v.iter().sum::<f64>() };
    let dot = |x: &SparseVector, w: &[f64]| x.iter().map(|(i, v)| v * w[i as usize]).sum::<f64>();
    let mut w = vec![0.0; size];
    let mut d = vec![0.0; size];
    let mut g_prev: Option<Vec<f64>> = None;
    for (t, batch) in data.chunks(b).enumerate() {
        let mut g = vec![0.0; size];
        for e in batch {
            let r = dot(&e.x, &w) - e.y;
            for (i, v) in e.x.iter() {
                g[i as usize] += r * v;
            }
        }
        let beta = match &g_prev {
            Some(p) => {
                let den = sum(p.iter().map(|v| v * v).collect());
                if den == 0.0 {
                    0.0
                } else {
                    (sum(g.iter().zip(p).map(|(a, b)| a * (a - b)).collect()) / den).max(0.0)
                }
            }
            None => 0.0,
        };
        for k in 0..size {
            d[k] = -g[k] + beta * d[k];
        }
        let curv: f64 = batch.iter().map(|e| dot(&e.x, &d).powi(2)).sum();
        let alpha = if curv > 0.0 {
            -sum(g.iter().zip(&d).map(|(a, b)| a * b).collect()) / curv
        } else {
            d.iter_mut().zip(&g).for_each(|(dk, gk)| *dk = -gk);
            shardlearn::learning_rate(s, t as u64 + 1).unwrap()
        };
        for k in 0..size {
            w[k] += alpha * d[k];
        }
        g_prev = Some(g);
    }
    w
}

// 6. Equivalences that must hold bit for bit (CG to a tight tolerance).
fn equivalences() -> Check {
    let mut parts = Vec::new();

    // (a) zero delay is sequential gradient descent
    let mut a_ok = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(30_000 + seed);
        let data = random_sparse_stream(&mut rng, 400, 200, 4);
        let s = ScheduleSpec::power(rng.gen_range(0.05..0.5), rng.gen_range(0.0..100.0)).unwrap();
        let run = delayed_sgd_run(&data, 8, 0, s, LOSS).unwrap();
        let (w, m) = train_sequential(&data, 8, s, LOSS, 1).unwrap();
        a_ok &= bits(run.model.weights()) == bits(w.weights())
            && run.metrics.progressive_sq_loss_sum.to_bits() == m.progressive_sq_loss_sum.to_bits();
    }
    parts.push(check(a_ok, "(a) zero delay == sequential on 20 streams"));

    // (b) minibatch of one is sequential gradient descent
    let mut b_ok = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(31_000 + seed);
        let data = random_sparse_stream(&mut rng, 300, 200, 4);
        let s = ScheduleSpec::power(rng.gen_range(0.05..0.5), rng.gen_range(0.0..100.0)).unwrap();
        let (wm, mm) = train_minibatch(&data, 8, s, LOSS, 1, 2).unwrap();
        let (ws, ms) = train_sequential(&data, 8, s, LOSS, 2).unwrap();
        b_ok &= bits(wm.weights()) == bits(ws.weights()) && mm == ms;
    }
    parts.push(check(b_ok, "(b) minibatch b=1 == sequential on 20 streams"));

    // (c) lazy CG against the dense reference, relative to the largest weight
    let mut worst_by_b = [0.0f64; 3];
    let mut reference_spread: f64 = 0.0;
    let s = ScheduleSpec::power(0.1, 1.0).unwrap();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(32_000 + seed);
        let slot = seed as usize % 3;
        let b = [1usize, 8, 64][slot];
        let nnz = rng.gen_range(2..8);
        let data = random_sparse_stream(&mut rng, 500, 1000, nnz);
        let (m, _, _) = train_minibatch_cg(&data, 10, s, LOSS, b, 1).unwrap();
        let dense = dense_cg(&data, 1024, b, &s, false);
        let scale = dense.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
        worst_by_b[slot] = worst_by_b[slot].max(max_abs_diff(m.weights(), &dense) / scale);
        let reordered = dense_cg(&data, 1024, b, &s, true);
        reference_spread = reference_spread.max(max_abs_diff(&reordered, &dense) / scale);
    }
    let worst = worst_by_b.iter().copied().fold(0.0, f64::max);
    parts.push(check(
        worst <= 1e-9,
        format!(
            "(c) lazy vs dense CG worst relative error {worst:.2e} on 50 datasets (b=1 {:.1e}, b=8 {:.1e}, b=64 {:.1e}; \
             dense reference vs itself with reordered sums {reference_spread:.1e})",
            worst_by_b[0], worst_by_b[1], worst_by_b[2]
        ),
    ));

    // (d) one shard, no threshold, no constant: the tree is one SGD learner
    let mut d_ok = true;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(33_000 + seed);
        let data = random_sparse_stream(&mut rng, 300, 200, 4);
        let s = ScheduleSpec::power(rng.gen_range(0.05..0.5), rng.gen_range(0.0..100.0)).unwrap();
        let (w, m) = train_sequential(&data, 8, s, LOSS, 2).unwrap();
        let single = Topology::binary(1, 0).unwrap().linear();
        let plan = make_shard_plan(ShardKind::Feature, 1, 8).unwrap();
        let tree = run_local_pipeline(&single, &plan, &data, &NodeSchedules::uniform(&single, s), 8, LOSS, 2).unwrap();
        d_ok &= bits(tree.nodes[0].model.weights()) == bits(w.weights()) && tree.metrics == m;
        let flat = Topology::flat(1, 0).unwrap().linear();
        let tree = run_local_pipeline(&flat, &plan, &data, &NodeSchedules::uniform(&flat, s), 8, LOSS, 2).unwrap();
        let leaf = flat.leaf_for_shard(0).unwrap();
        d_ok &= bits(tree.nodes[leaf].model.weights()) == bits(w.weights()) && tree.nodes[leaf].metrics == m;
    }
    parts.push(check(d_ok, "(d) single-shard linear pipeline == sequential on 10 streams"));
    all(parts)
}

fn random_shape(rng: &mut ChaCha8Rng, depth: u32, next_leaf: &mut usize) -> TreeShape {
    if depth == 0 || (*next_leaf > 0 && rng.gen_bool(0.3)) {
        *next_leaf += 1;
        return TreeShape::Leaf(*next_leaf - 1);
    }
    let k = rng.gen_range(1..=3);
    TreeShape::Node((0..k).map(|_| random_shape(rng, depth - 1, next_leaf)).collect())
}

fn tree_loss(tree: &TreeLearner, x: &SparseVector, y: f64) -> f64 {
    LOSS.value(tree.predict(x).unwrap(), y)
}

// 7. Message-passed gradients against central differences.
fn backprop_matches_finite_differences() -> Check {
    const H: f64 = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut depths = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(40_000 + seed);
        let mut n_leaves = 0;
        let depth = 1 + seed as u32 % 3;
        let shape = match random_shape(&mut rng, depth, &mut n_leaves) {
            leaf @ TreeShape::Leaf(_) => TreeShape::Node(vec![leaf]),
            s => s,
        };
        let mut topo = Topology::from_shape(&shape, 0).unwrap();
        depths.push(topo.depth());
        for id in 0..topo.nodes().len() {
            let on = rng.gen_bool(0.5);
            topo.set_constant_feature(id, on);
        }
        let bits = 5;
        let plan = make_shard_plan(ShardKind::Feature, topo.n_shards(), bits).unwrap();
        let s = ScheduleSpec::power(0.5, 1.0).unwrap();
        let mut tree = TreeLearner::new(topo.clone(), plan, bits, &NodeSchedules::uniform(&topo, s), LOSS).unwrap();
        for node in &mut tree.nodes {
            for w in node.model.weights_mut() {
                *w = rng.gen_range(-1.5..1.5);
            }
        }
        let x = SparseVector::from_unsorted((0..6).map(|_| (rng.gen_range(0..32), rng.gen_range(-1.0..1.0))).collect());
        let y = rng.gen_range(-1.0..1.0);
        let grads = backprop_gradients(&tree, &x, y).unwrap();
        for id in 0..tree.nodes.len() {
            let g = dense_weights(&grads[id], tree.nodes[id].model.len());
            for k in 0..tree.nodes[id].model.len() {
                let mut plus = tree.clone();
                plus.nodes[id].model.weights_mut()[k] += H;
                let mut minus = tree.clone();
                minus.nodes[id].model.weights_mut()[k] -= H;
                let fd = (tree_loss(&plus, &x, y) - tree_loss(&minus, &x, y)) / (2.0 * H);
                // Relative error, with a floor so exactly-zero gradients are
                // compared absolutely.
                let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    check(
        worst <= 1e-5,
        format!("20 trees (depths {depths:?}), {checked} weights, worst relative error {worst:.2e}"),
    )
}

// 8. Local step + corrective step == delayed-global step, per instance.
fn corrective_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(50_000);
    let mut w_corr = vec![0.0; 64];
    let mut mismatches = 0;
    for t in 1..=10_000u64 {
        let x = SparseVector::from_unsorted((0..rng.gen_range(1..6)).map(|_| (rng.gen_range(0..64), rng.gen_range(-1.0..1.0))).collect());
        let y = rng.gen_range(-1.0..1.0);
        let p = x.iter().map(|(i, v)| v * w_corr[i as usize]).sum::<f64>();
        let eta_send = rng.gen_range(0.001..0.5);
        let d1_local = LOSS.d1(p, y);
        let local = step_delta(&x.scaled(d1_local), eta_send);
        let mut w_local = w_corr.clone();
        for (i, d) in local.iter() {
            w_local[i as usize] += d;
        }
        let yhat = p + rng.gen_range(-1.0..1.0);
        let eta = rng.gen_range(0.001..0.5);

        let mut rec = PendingRecord::new(t, x.clone(), y, p);
        rec.local = Some((d1_local, eta_send));
        let mut w_after = w_local.clone();
        let cd = corrective_update(&mut w_after, &mut rec, yhat, eta, LOSS).unwrap();

        let mut plain = PendingRecord::new(t, x.clone(), y, p);
        let mut w_dg = w_corr.clone();
        let dg = delayed_global_update(&mut w_dg, &mut plain, yhat, eta, LOSS).unwrap();

        let net: Vec<f64> = local.iter().zip(cd.undo.iter()).zip(cd.global.iter()).map(|(((_, l), (_, u)), (_, g))| (l + u) + g).collect();
        let same_support = local.indices().eq(dg.indices()) && cd.global.indices().eq(dg.indices());
        let same = same_support && net.iter().zip(dg.iter()).all(|(n, (_, d))| *n == d);
        if !same {
            mismatches += 1;
        }
        w_corr = w_after;
    }
    check(mismatches == 0, format!("10000 instances, {mismatches} mismatches"))
}

fn sha_file(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

// 9. Identical flags give identical files, with and without threads.
fn cli_determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.txt");
    let mut rng = ChaCha8Rng::seed_from_u64(60_000);
    let mut text = String::new();
    for _ in 0..500 {
        let a: u32 = rng.gen_range(0..20);
        let b: u32 = rng.gen_range(0..20);
        let y = u8::from((a + b).is_multiple_of(3));
        text.push_str(&format!("{y} |u a{a} b{b}:{:.3} |v c{}\n", rng.gen_range(0.1..2.0), rng.gen_range(0..7)));
    }
    fs::write(&data, text).unwrap();
    let cases: &[&[&str]] = &[
        &["train", "--update", "sgd"],
        &["train", "--update", "sgd", "--shards", "3"],
        &["train", "--update", "local", "--shards", "4", "--topology", "binary"],
        &["train", "--update", "minibatch", "--batch-size", "16"],
        &["train", "--update", "minibatch-cg", "--batch-size", "8"],
        &["train", "--update", "backprop", "--shards", "4", "--tau", "16", "--quadratic", "uv"],
        &["simulate", "--update", "backprop", "--backprop-scale", "8", "--shards", "4", "--tau", "4"],
        &["simulate", "--update", "corrective", "--shards", "4", "--topology", "binary", "--tau", "8", "--link-delay", "3"],
        &["simulate", "--update", "delayed-global", "--shards", "2", "--tau", "4", "--passes", "2"],
    ];
    let mut bad = Vec::new();
    for (k, args) in cases.iter().enumerate() {
        let mut digests = Vec::new();
        for (run, threads) in ["0", "0", "4", "3"].iter().enumerate() {
            let model = dir.path().join(format!("m{k}_{run}"));
            let metrics = dir.path().join(format!("c{k}_{run}"));
            let out = Command::new(env!("CARGO_BIN_EXE_shardlearn"))
                .args(*args)
                .args(["--bits", "12", "--data"])
                .arg(&data)
                .arg("--model")
                .arg(&model)
                .arg("--metrics")
                .arg(&metrics)
                .env("SHARDLEARN_THREADS", threads)
                .output()
                .unwrap();
            if !out.status.success() {
                bad.push(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
                break;
            }
            let mut h = vec![sha_file(&model), sha_file(&metrics)];
            let mut id = 0;
            loop {
                let node = dir.path().join(format!("m{k}_{run}.{id}"));
                if !node.exists() {
                    break;
                }
                h.push(sha_file(&node));
                id += 1;
            }
            digests.push(h);
        }
        if digests.windows(2).any(|w| w[0] != w[1]) {
            bad.push(format!("{args:?} differs across runs"));
        }
    }
    check(bad.is_empty(), format!("{} invocations x 4 runs (threads 0,0,4,3){}", cases.len(), bad.first().map(|b| format!(": {b}")).unwrap_or_default()))
}

const ORDER_CAP: usize = 1 << 15;
const ORDER_EVERY: usize = 8;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Arch {
    NaiveBayes,
    BinaryTree,
    Linear,
}

/// Independent +-1 features with `y = <a, x> + noise`; the excess mean
/// squared error of a linear predictor `w` is exactly `|w - a|^2`.
fn independent_dataset(seed: u64, sigma: f64) -> (Vec<f64>, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(70_000 + seed);
    let a: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0) / 8.0).collect();
    let data = (0..ORDER_CAP)
        .map(|_| {
            let x: Vec<f64> = (0..64).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            let noise = rng.gen_range(-1.0..1.0) * sigma * 3f64.sqrt();
            let y = x.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>() + noise;
            Example::dense(&x, y)
        })
        .collect();
    (a, data)
}

fn excess(w: &[f64], a: &[f64]) -> f64 {
    w.iter().zip(a).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Instances until the excess error first drops to `thr` (checked every
/// few instances); `usize::MAX` if never within the budget.
fn instances_to_target(arch: Arch, s: ScheduleSpec, a: &[f64], data: &[Example], thr: f64) -> usize {
    if arch == Arch::Linear {
        let mut l = SgdLearner::new(6, s, LOSS).unwrap();
        for (k, ex) in data.iter().enumerate() {
            if l.learn(&ex.x, ex.y).is_err() {
                return usize::MAX;
            }
            if (k + 1) % ORDER_EVERY == 0 && excess(l.model.weights(), a) <= thr {
                return k + 1;
            }
        }
        return usize::MAX;
    }
    let topo = Topology::binary(64, 0).unwrap().linear();
    let plan = make_shard_plan(ShardKind::Feature, 64, 6).unwrap();
    let mut tree = TreeLearner::new(topo.clone(), plan, 6, &NodeSchedules::uniform(&topo, s), LOSS).unwrap();
    let mut w = vec![0.0; 64];
    for (k, ex) in data.iter().enumerate() {
        if tree.learn_local(&ex.x, ex.y).is_err() {
            return usize::MAX;
        }
        if (k + 1) % ORDER_EVERY != 0 {
            continue;
        }
        match arch {
            // Naive Bayes is the sum of the leaf predictors.
            Arch::NaiveBayes => {
                for leaf in topo.leaves() {
                    let i = leaf.shard().unwrap();
                    w[i] = tree.nodes[leaf.id].model.weights()[i];
                }
            }
            _ => w = dense_weights(&tree.effective_weights().unwrap().weights, 64),
        }
        if !w.iter().all(|v| v.is_finite()) {
            return usize::MAX;
        }
        if excess(&w, a) <= thr {
            return k + 1;
        }
    }
    usize::MAX
}

// 10. Convergence order: naive Bayes <= binary tree <= linear.
fn convergence_order() -> Check {
    let sigma = 0.3;
    // MSE <= 1.1 x optimum  <=>  excess <= 0.1 sigma^2
    let thr = 0.1 * sigma * sigma;
    let sets: Vec<(Vec<f64>, Vec<Example>)> = (0..10).map(|s| independent_dataset(s, sigma)).collect();
    let grid: Vec<ScheduleSpec> = [0.0625, 0.25, 1.0]
        .iter()
        .flat_map(|&l| [1.0, 100.0].map(|t0| ScheduleSpec::power(l, t0).unwrap()))
        .collect();
    // Each architecture gets its best schedule from the same grid.
    let best = |arch: Arch| -> (usize, ScheduleSpec) {
        grid.iter()
            .map(|&s| {
                let mut hits: Vec<usize> = sets.iter().map(|(a, d)| instances_to_target(arch, s, a, d, thr)).collect();
                hits.sort_unstable();
                (hits[4].max(hits[5]), s)
            })
            .min_by_key(|(m, _)| *m)
            .unwrap()
    };
    let fmt = |m: usize| if m == usize::MAX { format!(">{ORDER_CAP}") } else { m.to_string() };
    let (nb, s_nb) = best(Arch::NaiveBayes);
    let (bt, s_bt) = best(Arch::BinaryTree);
    let (li, s_li) = best(Arch::Linear);
    check(
        nb <= bt && bt <= li,
        format!(
            "median instances: naive Bayes {} ({s_nb:?}), binary tree {} ({s_bt:?}), linear {} ({s_li:?})",
            fmt(nb),
            fmt(bt),
            fmt(li)
        ),
    )
}

// 11. Warmup, steady-state delay and drain in the schedule trace.
fn schedule_discipline() -> Check {
    const TAU: u64 = 4;
    const N: u64 = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(80_000);
    let data = random_sparse_stream(&mut rng, N as usize, 64, 4);
    let topo = Topology::binary(4, 0).unwrap().linear();
    let plan = make_shard_plan(ShardKind::Feature, 4, 6).unwrap();
    let s = ScheduleSpec::power(0.1, 1.0).unwrap();
    let mut cfg = SimConfig::new(GlobalRule::new(RuleKind::Backprop), TAU);
    cfg.trace = true;
    let res = run_simulation(&topo, &plan, &data, &NodeSchedules::uniform(&topo, s), 6, LOSS, &cfg).unwrap();
    let mut problems = Vec::new();
    let mut steady_globals = 0;
    for node in topo.nodes() {
        let rows: Vec<&TraceRow> = res.trace.iter().filter(|r| r.node == node.id).collect();
        let locals: Vec<u64> = rows.iter().filter(|r| r.action == Action::DoLocal).map(|r| r.t).collect();
        if locals != (1..=N).collect::<Vec<_>>() {
            problems.push(format!("node {}: locals out of order", node.id));
            continue;
        }
        if node.id == topo.root() {
            if rows.len() as u64 != N {
                problems.push("root took non-local steps".into());
            }
            continue;
        }
        // warmup: exactly TAU local steps, then a global
        let warm: Vec<(Action, u64, Mode)> = rows[..TAU as usize + 1].iter().map(|r| (r.action, r.inflight, r.mode)).collect();
        let expect_warm: Vec<(Action, u64, Mode)> =
            (1..=TAU).map(|k| (Action::DoLocal, k, Mode::Warmup)).chain([(Action::DoGlobal, TAU - 1, Mode::Steady)]).collect();
        if warm != expect_warm {
            problems.push(format!("node {}: warmup {warm:?}", node.id));
        }
        let mut n_local = 0u64;
        let mut consumed = 0u64;
        for r in &rows {
            match r.action {
                Action::DoLocal => n_local += 1,
                Action::DoGlobal => {
                    consumed += 1;
                    if r.t != consumed {
                        problems.push(format!("node {}: consumed {} out of order", node.id, r.t));
                    }
                    let delay = n_local - r.t + 1;
                    if n_local < N {
                        steady_globals += 1;
                        if delay != TAU || r.mode != Mode::Steady {
                            problems.push(format!("node {}: delay {delay} at t={}", node.id, r.t));
                        }
                    }
                }
                Action::Wait => problems.push("wait logged".into()),
            }
        }
        // drain: after the last local, only globals, in flight falling to 0
        let last_local = rows.iter().rposition(|r| r.action == Action::DoLocal).unwrap();
        let drain: Vec<(Action, u64, Mode)> = rows[last_local + 1..].iter().map(|r| (r.action, r.inflight, r.mode)).collect();
        let expect_drain: Vec<(Action, u64, Mode)> = (0..TAU).rev().map(|k| (Action::DoGlobal, k, Mode::Drain)).collect();
        if drain != expect_drain {
            problems.push(format!("node {}: drain {drain:?}", node.id));
        }
        if consumed != N {
            problems.push(format!("node {}: {consumed} globals", node.id));
        }
    }
    check(
        problems.is_empty(),
        format!(
            "{} nodes, {steady_globals} steady globals all at delay {TAU}{}",
            topo.nodes().len(),
            problems.first().map(|p| format!(", first problem: {p}")).unwrap_or_default()
        ),
    )
}

type Criterion = (u32, &'static str, Option<u64>, fn() -> Check);

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [Criterion; 11] = [
        (1, "three-feature closed forms", Some(1), naive_bayes_and_tree_exact),
        (2, "redundant-feature limits", Some(1), redundant_feature_limits),
        (3, "online training reaches the closed forms", Some(30), online_reaches_oracle),
        (4, "delayed regret bound", Some(120), delayed_regret_bound),
        (5, "delay degrades duplicate blocks", Some(120), delay_degrades_adversarial),
        (6, "equivalence suite", Some(120), equivalences),
        (7, "backprop vs finite differences", Some(30), backprop_matches_finite_differences),
        (8, "corrective identity", None, corrective_identity),
        (9, "cli determinism", None, cli_determinism),
        (10, "convergence order", None, convergence_order),
        (11, "schedule discipline", None, schedule_discipline),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, limit, f) in criteria {
        if filter.as_deref().is_some_and(|p| !name.contains(p)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(c) => (c.ok, c.detail),
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        let in_time = limit.is_none_or(|l| elapsed <= Duration::from_secs(l));
        let pass = ok && in_time;
        let timing = match limit {
            Some(l) => format!("{:.2}s, limit {l}s{}", elapsed.as_secs_f64(), if in_time { "" } else { " EXCEEDED" }),
            None => format!("{:.2}s", elapsed.as_secs_f64()),
        };
        println!("{} criterion {id:>2} {name}: {detail} [{timing}]", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(id);
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
