//! Closed-form desk-scale solvers over explicit dense points.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::topology::{NodeId, NodeRole, ShardPlan, Topology};

/// A dense labelled point `(x, y)`.
pub type DensePoint = (Vec<f64>, f64);

/// Relative eigenvalue cutoff below which a system counts as singular.
pub const SINGULAR_RTOL: f64 = 1e-10;

/// Empirical second moments `sigma = E[x x^T]` and `b = E[x y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub sigma: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl MomentSet {
    pub fn dim(&self) -> usize {
        self.b.len()
    }
}

pub fn moments(points: &[DensePoint]) -> Result<MomentSet> {
    let first = points.first().ok_or_else(|| Error::Domain("moments of an empty point set".into()))?;
    let n = first.0.len();
    let mut sigma = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for (k, (x, y)) in points.iter().enumerate() {
        if x.len() != n {
            return Err(Error::Domain(format!("point {k} has dimension {} but expected {n}", x.len())));
        }
        let xv = DVector::from_column_slice(x);
        sigma += &xv * xv.transpose();
        b += xv * *y;
    }
    let m = points.len() as f64;
    Ok(MomentSet { sigma: sigma / m, b: b / m })
}

/// Solution of a symmetric linear system; `singular` marks the
/// minimum-norm pseudo-inverse path.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub w: Vec<f64>,
    pub singular: bool,
}

/// Solves `a w = b` for symmetric positive semi-definite `a`.
pub fn solve_symmetric(a: &DMatrix<f64>, b: &DVector<f64>) -> Solution {
    let n = b.len();
    if n == 0 {
        return Solution { w: Vec::new(), singular: false };
    }
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let tol = SINGULAR_RTOL * max;
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &l| m.min(l));
    if max > 0.0 && min > tol {
        if let Some(w) = a.clone().lu().solve(b) {
            return Solution { w: w.iter().copied().collect(), singular: false };
        }
    }
    let mut w = DVector::zeros(n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > tol && lambda > 0.0 {
            let v = eig.eigenvectors.column(k);
            w += v * (v.dot(b) / lambda);
        }
    }
    Solution { w: w.iter().copied().collect(), singular: true }
}

/// `sigma^{-1} b`, or the minimum-norm solution when `sigma` is singular.
pub fn least_squares(m: &MomentSet) -> Solution {
    solve_symmetric(&m.sigma, &m.b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveBayes {
    pub w: Vec<f64>,
    /// Features with zero variance; their weight is set to 0.
    pub zero_variance: Vec<usize>,
}

/// Per-feature weights `b_i / sigma_ii`.
pub fn naive_bayes_weights(m: &MomentSet) -> NaiveBayes {
    let mut zero_variance = Vec::new();
    let w = (0..m.dim())
        .map(|i| {
            let s = m.sigma[(i, i)];
            if s > 0.0 {
                m.b[i] / s
            } else {
                zero_variance.push(i);
                0.0
            }
        })
        .collect();
    NaiveBayes { w, zero_variance }
}

/// Mean of `(<w, x> - y)^2`.
pub fn mse(w: &[f64], points: &[DensePoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Domain("mse of an empty point set".into()));
    }
    let mut sum = 0.0;
    for (k, (x, y)) in points.iter().enumerate() {
        if x.len() != w.len() {
            return Err(Error::Domain(format!("point {k} has dimension {} but w has {}", x.len(), w.len())));
        }
        let r = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - y;
        sum += r * r;
    }
    Ok(sum / points.len() as f64)
}

/// Fixed point of a tree of linear learners trained to convergence layer by
/// layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeFixedPoint {
    /// Per node: leaves hold one weight per feature in their shard (in
    /// ascending feature order), internal nodes one weight per child.
    pub node_weights: Vec<Vec<f64>>,
    /// Per node: the dense linear map from the input to its prediction.
    pub node_maps: Vec<Vec<f64>>,
    /// The root's map.
    pub effective: Vec<f64>,
    /// Nodes whose local system was singular.
    pub singular_nodes: Vec<NodeId>,
}

impl TreeFixedPoint {
    /// Weights of the internal nodes at `layer`, in id order.
    pub fn layer_weights(&self, topo: &Topology, layer: u32) -> Vec<Vec<f64>> {
        topo.nodes()
            .iter()
            .filter(|n| n.layer == layer)
            .map(|n| self.node_weights[n.id].clone())
            .collect()
    }
}

/// Leaves solve least squares over their shard (the per-feature ratio when a
/// shard holds one feature); every internal node solves the normal equations
/// over its children's predictions.
pub fn tree_fixed_point(topo: &Topology, plan: &ShardPlan, m: &MomentSet) -> Result<TreeFixedPoint> {
    topo.check_plan(plan)?;
    if let Some(n) = topo.nodes().iter().find(|n| n.threshold_output || n.has_constant_feature) {
        return Err(Error::config(format!(
            "fixed point needs a purely linear tree; node {} thresholds or has a constant feature",
            n.id
        )));
    }
    let dim = m.dim();
    let n_nodes = topo.nodes().len();
    let mut node_weights = vec![Vec::new(); n_nodes];
    let mut node_maps = vec![vec![0.0; dim]; n_nodes];
    let mut singular_nodes = Vec::new();
    for id in topo.bottom_up() {
        let node = topo.node(id);
        match node.role {
            NodeRole::Leaf { shard } => {
                let feats: Vec<usize> =
                    (0..dim).filter(|&i| plan.shard_of_index(i as u32) == shard).collect();
                let a = DMatrix::from_fn(feats.len(), feats.len(), |r, c| m.sigma[(feats[r], feats[c])]);
                let b = DVector::from_iterator(feats.len(), feats.iter().map(|&i| m.b[i]));
                let sol = solve_symmetric(&a, &b);
                if sol.singular {
                    singular_nodes.push(id);
                }
                for (&i, &w) in feats.iter().zip(&sol.w) {
                    node_maps[id][i] = w;
                }
                node_weights[id] = sol.w;
            }
            NodeRole::Internal => {
                let kids = topo.children(id);
                let maps: Vec<DVector<f64>> =
                    kids.iter().map(|&c| DVector::from_column_slice(&node_maps[c])).collect();
                let a = DMatrix::from_fn(kids.len(), kids.len(), |r, c| maps[r].dot(&(&m.sigma * &maps[c])));
                let b = DVector::from_iterator(kids.len(), maps.iter().map(|e| e.dot(&m.b)));
                let sol = solve_symmetric(&a, &b);
                if sol.singular {
                    singular_nodes.push(id);
                }
                let mut map = vec![0.0; dim];
                for (e, &w) in maps.iter().zip(&sol.w) {
                    for (acc, v) in map.iter_mut().zip(e.iter()) {
                        *acc += w * v;
                    }
                }
                node_maps[id] = map;
                node_weights[id] = sol.w;
            }
        }
    }
    let effective = node_maps[topo.root()].clone();
    Ok(TreeFixedPoint { node_weights, node_maps, effective, singular_nodes })
}
