//! Trees of online learners trained locally: every node fits the label from
//! its own inputs, and internal nodes use child predictions as features.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::learner::{apply_gradient, learning_rate, linear_gradient, Example, Metrics, ScheduleSpec};
use crate::loss::LossSpec;
use crate::sparse::{dot, SparseVector, WeightModel};
use crate::topology::{NodeId, NodeSpec, ShardPlan, Topology};

/// Clamps a transmitted value to `[0, 1]`.
#[inline]
pub fn threshold(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// One node's learner.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: NodeId,
    pub model: WeightModel,
    pub schedule: ScheduleSpec,
    /// Local update count.
    pub t: u64,
    /// Progressive loss of this node's own (unclamped) predictions.
    pub metrics: Metrics,
}

impl NodeState {
    pub fn new(spec: &NodeSpec, bits: u32, schedule: ScheduleSpec) -> Result<Self> {
        schedule.validate()?;
        let model = if spec.is_leaf() {
            WeightModel::new(bits)?
        } else {
            WeightModel::with_capacity_for(spec.internal_width())
        };
        Ok(NodeState { id: spec.id, model, schedule, t: 0, metrics: Metrics::new() })
    }
}

/// A node's prediction: `raw` drives its own update, `sent` goes upstream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub raw: f64,
    pub sent: f64,
}

/// Feature vector of an internal node: one entry per child, then the
/// constant `1` if the node has one.
pub fn internal_input(spec: &NodeSpec, child_values: &[f64]) -> Result<SparseVector> {
    if spec.is_leaf() {
        return Err(Error::contract(format!("node {} is a leaf", spec.id)));
    }
    if child_values.len() != spec.fan_in {
        return Err(Error::contract(format!(
            "node {} expects {} child values, got {}",
            spec.id,
            spec.fan_in,
            child_values.len()
        )));
    }
    let mut entries: Vec<(u32, f64)> = child_values.iter().enumerate().map(|(i, &v)| (i as u32, v)).collect();
    if spec.has_constant_feature {
        entries.push((spec.fan_in as u32, 1.0));
    }
    SparseVector::from_sorted(entries)
}

pub fn node_predict(spec: &NodeSpec, state: &NodeState, input: &SparseVector) -> Result<Prediction> {
    if !spec.is_leaf() {
        if let Some(i) = input.max_index() {
            if i as usize >= spec.internal_width() {
                return Err(Error::contract(format!(
                    "input index {i} exceeds node {}'s {} inputs",
                    spec.id,
                    spec.internal_width()
                )));
            }
        }
    }
    let raw = dot(input, &state.model)?;
    let sent = if spec.threshold_output { threshold(raw) } else { raw };
    Ok(Prediction { raw, sent })
}

/// One gradient step toward `y` from the prediction `raw` already made on
/// `input`. Returns the step size used.
pub fn node_local_update(
    state: &mut NodeState,
    input: &SparseVector,
    raw: f64,
    y: f64,
    loss: LossSpec,
) -> Result<f64> {
    let t = state.t + 1;
    if !raw.is_finite() {
        return Err(Error::NumericOverflow { step: t });
    }
    let eta = learning_rate(&state.schedule, t)?;
    apply_gradient(state.model.weights_mut(), &linear_gradient(input, loss.d1(raw, y)), eta);
    state.t = t;
    Ok(eta)
}

/// Step-size schedule for every node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSchedules(pub Vec<ScheduleSpec>);

impl NodeSchedules {
    pub fn uniform(topo: &Topology, s: ScheduleSpec) -> Self {
        NodeSchedules(vec![s; topo.nodes().len()])
    }

    /// One schedule for leaves, another for internal nodes.
    pub fn split(topo: &Topology, leaf: ScheduleSpec, internal: ScheduleSpec) -> Self {
        NodeSchedules(topo.nodes().iter().map(|n| if n.is_leaf() { leaf } else { internal }).collect())
    }
}

/// Per-node inputs and predictions for one instance.
#[derive(Debug, Clone)]
pub struct Forward {
    pub inputs: Vec<SparseVector>,
    pub preds: Vec<Prediction>,
    pub yhat: f64,
}

/// Linear map computed by a tree without thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveMap {
    pub weights: SparseVector,
    pub bias: f64,
}

impl EffectiveMap {
    pub fn predict(&self, x: &SparseVector) -> f64 {
        x.dot_sparse(&self.weights) + self.bias
    }
}

/// A tree of learners over feature shards.
#[derive(Debug, Clone)]
pub struct TreeLearner {
    pub topo: Topology,
    pub plan: ShardPlan,
    pub nodes: Vec<NodeState>,
    pub loss: LossSpec,
    /// Progressive metrics of the root prediction.
    pub metrics: Metrics,
    parallel: bool,
}

impl TreeLearner {
    pub fn new(topo: Topology, plan: ShardPlan, bits: u32, schedules: &NodeSchedules, loss: LossSpec) -> Result<Self> {
        topo.check_plan(&plan)?;
        if schedules.0.len() != topo.nodes().len() {
            return Err(Error::config(format!(
                "{} schedules for {} nodes",
                schedules.0.len(),
                topo.nodes().len()
            )));
        }
        let nodes = topo
            .nodes()
            .iter()
            .zip(&schedules.0)
            .map(|(spec, &s)| NodeState::new(spec, bits, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(TreeLearner { topo, plan, nodes, loss, metrics: Metrics::new(), parallel: false })
    }

    /// Runs leaf work on the rayon pool. Results are identical either way.
    pub fn with_parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    pub fn with_log(mut self) -> Self {
        self.metrics = Metrics::with_log();
        self
    }

    pub fn leaf_inputs(&self, x: &SparseVector) -> Result<Vec<SparseVector>> {
        let mut parts = self.plan.split(x);
        let mut inputs = vec![SparseVector::new(); self.topo.nodes().len()];
        for leaf in self.topo.leaves() {
            let shard = leaf.shard().expect("leaf");
            inputs[leaf.id] = std::mem::take(&mut parts[shard]);
        }
        Ok(inputs)
    }

    /// Prediction pass with the current weights; no state changes.
    pub fn forward(&self, x: &SparseVector) -> Result<Forward> {
        let inputs = self.leaf_inputs(x)?;
        self.forward_from(inputs)
    }

    fn forward_from(&self, mut inputs: Vec<SparseVector>) -> Result<Forward> {
        let mut preds = vec![Prediction { raw: 0.0, sent: 0.0 }; self.nodes.len()];
        for layer in self.topo.layers() {
            for id in layer {
                let spec = self.topo.node(id);
                if !spec.is_leaf() {
                    let vals: Vec<f64> = self.topo.children(id).iter().map(|&c| preds[c].sent).collect();
                    inputs[id] = internal_input(spec, &vals)?;
                }
                preds[id] = node_predict(spec, &self.nodes[id], &inputs[id])?;
            }
        }
        let yhat = preds[self.topo.root()].sent;
        Ok(Forward { inputs, preds, yhat })
    }

    pub fn predict(&self, x: &SparseVector) -> Result<f64> {
        Ok(self.forward(x)?.yhat)
    }

    /// Predict and train every node locally on one instance. Returns the
    /// root's prediction.
    pub fn learn_local(&mut self, x: &SparseVector, y: f64) -> Result<f64> {
        let inputs = self.leaf_inputs(x)?;
        let fwd = self.forward_from(inputs)?;
        let loss = self.loss;
        let step = |node: &mut NodeState| -> Result<()> {
            let id = node.id;
            let raw = fwd.preds[id].raw;
            node.metrics.record(raw, y);
            node_local_update(node, &fwd.inputs[id], raw, y, loss).map(|_| ())
        };
        if self.parallel {
            self.nodes.par_iter_mut().try_for_each(step)?;
        } else {
            self.nodes.iter_mut().try_for_each(step)?;
        }
        self.metrics.record(fwd.yhat, y);
        Ok(fwd.yhat)
    }

    /// End-to-end linear map; errors if any non-root node thresholds.
    pub fn effective_weights(&self) -> Result<EffectiveMap> {
        let root = self.topo.root();
        if let Some(n) = self.topo.nodes().iter().find(|n| n.threshold_output && n.id != root) {
            return Err(Error::config(format!("node {} thresholds its output; the tree is not linear", n.id)));
        }
        let mut scale = vec![0.0; self.nodes.len()];
        scale[root] = 1.0;
        let mut order = self.topo.bottom_up();
        order.reverse();
        let mut entries = Vec::new();
        let mut bias = 0.0;
        for id in order {
            let spec = self.topo.node(id);
            let w = self.nodes[id].model.weights();
            if spec.is_leaf() {
                // Weights outside the leaf's shard never see an input.
                let shard = spec.shard().expect("leaf");
                entries.extend(
                    self.nodes[id]
                        .model
                        .nonzero()
                        .filter(|&(i, _)| self.plan.shard_of_index(i) == shard)
                        .map(|(i, v)| (i, scale[id] * v)),
                );
            } else {
                for (slot, &c) in self.topo.children(id).iter().enumerate() {
                    scale[c] = scale[id] * w[slot];
                }
                if spec.has_constant_feature {
                    bias += scale[id] * w[spec.fan_in];
                }
            }
        }
        Ok(EffectiveMap { weights: SparseVector::from_unsorted(entries), bias })
    }

    /// Mean progressive loss over every leaf.
    pub fn mean_leaf_loss(&self) -> f64 {
        let leaves: Vec<&NodeState> = self.topo.leaves().map(|l| &self.nodes[l.id]).collect();
        leaves.iter().map(|n| n.metrics.mean_sq_loss()).sum::<f64>() / leaves.len() as f64
    }
}

/// Runs `passes` passes of local training over `data`.
pub fn run_local_pipeline(
    topo: &Topology,
    plan: &ShardPlan,
    data: &[Example],
    schedules: &NodeSchedules,
    bits: u32,
    loss: LossSpec,
    passes: u32,
) -> Result<TreeLearner> {
    if passes == 0 {
        return Err(Error::config("passes must be at least 1"));
    }
    let mut tree = TreeLearner::new(topo.clone(), *plan, bits, schedules, loss)?;
    for _ in 0..passes {
        for ex in data {
            tree.learn_local(&ex.x, ex.y)?;
        }
    }
    Ok(tree)
}
