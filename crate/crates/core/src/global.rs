//! Update rules driven by the root's final prediction: delayed global,
//! corrective, delayed backpropagation, minibatch gradient descent and
//! minibatch nonlinear conjugate gradient with lazy sparse updates.

use crate::error::{Error, Result};
use crate::learner::{apply_gradient, learning_rate, linear_gradient, Example, Metrics, ScheduleSpec};
use crate::local::TreeLearner;
use crate::loss::LossSpec;
use crate::sparse::{dot, dot_unchecked, SparseVector, WeightModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    /// Local training only; the root's output is never fed back.
    Local,
    DelayedGlobal,
    Corrective,
    Backprop,
    MinibatchGd,
    MinibatchCg,
}

impl RuleKind {
    pub fn name(self) -> &'static str {
        match self {
            RuleKind::Local => "local",
            RuleKind::DelayedGlobal => "delayed-global",
            RuleKind::Corrective => "corrective",
            RuleKind::Backprop => "backprop",
            RuleKind::MinibatchGd => "minibatch",
            RuleKind::MinibatchCg => "minibatch-cg",
        }
    }

    /// Rules that need responses from the root.
    pub fn uses_feedback(self) -> bool {
        matches!(self, RuleKind::DelayedGlobal | RuleKind::Corrective | RuleKind::Backprop)
    }

    pub fn is_minibatch(self) -> bool {
        matches!(self, RuleKind::MinibatchGd | RuleKind::MinibatchCg)
    }

    /// Rules that oscillate under delayed feedback.
    pub fn known_oscillatory(self) -> bool {
        matches!(self, RuleKind::DelayedGlobal | RuleKind::Corrective)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalRule {
    pub kind: RuleKind,
    /// Multiplier on the gradient the root sends down (backprop only).
    pub backprop_scale: f64,
    /// Examples per update (minibatch rules only).
    pub batch_size: usize,
}

impl GlobalRule {
    pub fn new(kind: RuleKind) -> Self {
        GlobalRule { kind, backprop_scale: 1.0, batch_size: 1 }
    }

    pub fn with_backprop_scale(mut self, scale: f64) -> Self {
        self.backprop_scale = scale;
        self
    }

    pub fn with_batch_size(mut self, b: usize) -> Self {
        self.batch_size = b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.backprop_scale > 0.0 && self.backprop_scale.is_finite()) {
            return Err(Error::config(format!("backprop scale must be positive, got {}", self.backprop_scale)));
        }
        Ok(())
    }
}

/// What a node remembers about an instance until the root responds.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingRecord {
    pub t: u64,
    /// The node's input for this instance.
    pub x: SparseVector,
    pub y: f64,
    /// Value transmitted upstream.
    pub p: f64,
    /// Unclamped value behind `p`; decides the clamp derivative.
    pub p_raw: f64,
    /// Whether the transmitted value was clamped to `[0, 1]`.
    pub thresholded: bool,
    /// Weights that produced `p`, restricted to the node's child slots
    /// (internal nodes under backprop).
    pub child_weights: Vec<f64>,
    /// Local step applied at send time: `d1` and step size.
    pub local: Option<(f64, f64)>,
    pub consumed: bool,
}

impl PendingRecord {
    pub fn new(t: u64, x: SparseVector, y: f64, p: f64) -> Self {
        PendingRecord {
            t,
            x,
            y,
            p,
            p_raw: p,
            thresholded: false,
            child_weights: Vec::new(),
            local: None,
            consumed: false,
        }
    }

    fn consume(&mut self) -> Result<()> {
        if self.consumed {
            return Err(Error::contract(format!("response for instance {} consumed twice", self.t)));
        }
        self.consumed = true;
        Ok(())
    }

    /// Derivative of the transmitted value with respect to the raw one.
    pub fn clamp_derivative(&self) -> f64 {
        if !self.thresholded || (0.0..=1.0).contains(&self.p_raw) {
            1.0
        } else {
            0.0
        }
    }
}

/// `-eta * g` as a sparse weight delta.
pub fn step_delta(grad: &SparseVector, eta: f64) -> SparseVector {
    SparseVector::from_sorted(grad.iter().map(|(i, g)| (i, -(eta * g))).collect()).expect("same support")
}

fn add_delta(w: &mut [f64], delta: &SparseVector) {
    for (i, d) in delta.iter() {
        w[i as usize] += d;
    }
}

/// The node updates as if it had made the final prediction itself.
/// Returns the applied delta.
pub fn delayed_global_update(
    w: &mut [f64],
    rec: &mut PendingRecord,
    yhat: f64,
    eta: f64,
    loss: LossSpec,
) -> Result<SparseVector> {
    if rec.local.is_some() {
        return Err(Error::contract(format!("instance {} was trained locally; delayed-global forbids it", rec.t)));
    }
    rec.consume()?;
    let delta = step_delta(&linear_gradient(&rec.x, loss.d1(yhat, rec.y)), eta);
    add_delta(w, &delta);
    Ok(delta)
}

/// The two halves of a corrective update.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectiveDelta {
    /// Exact negation of the send-time local step.
    pub undo: SparseVector,
    /// The delayed-global step at the final prediction.
    pub global: SparseVector,
}

/// Undo the send-time local step (with its own step size) and apply the
/// global step instead.
pub fn corrective_update(
    w: &mut [f64],
    rec: &mut PendingRecord,
    yhat: f64,
    eta: f64,
    loss: LossSpec,
) -> Result<CorrectiveDelta> {
    let (d1_local, eta_send) = rec
        .local
        .ok_or_else(|| Error::contract(format!("instance {} was not trained locally", rec.t)))?;
    rec.consume()?;
    let local = step_delta(&linear_gradient(&rec.x, d1_local), eta_send);
    let undo = local.scaled(-1.0);
    let global = step_delta(&linear_gradient(&rec.x, loss.d1(yhat, rec.y)), eta);
    add_delta(w, &undo);
    add_delta(w, &global);
    Ok(CorrectiveDelta { undo, global })
}

/// Output of one node's backward step.
#[derive(Debug, Clone, PartialEq)]
pub struct BackpropOut {
    /// Gradient of the loss with respect to this node's weights.
    pub own: SparseVector,
    /// Gradient with respect to each child's transmitted value.
    pub to_children: Vec<f64>,
}

/// Chain rule through one node: `g` is the gradient with respect to this
/// node's raw output, `input` its cached input and `child_weights` the
/// weights on its child slots when it predicted.
pub fn backprop_messages(g: f64, input: &SparseVector, child_weights: &[f64]) -> BackpropOut {
    BackpropOut {
        own: linear_gradient(input, g),
        to_children: child_weights.iter().map(|&w| g * w).collect(),
    }
}

/// Gradient of `loss(tree(x), y)` with respect to every node's weights,
/// by message passing from the root down, with the tree held fixed.
pub fn backprop_gradients(tree: &TreeLearner, x: &SparseVector, y: f64) -> Result<Vec<SparseVector>> {
    let fwd = tree.forward(x)?;
    let topo = &tree.topo;
    let n = topo.nodes().len();
    let mut upstream = vec![0.0; n];
    let root = topo.root();
    upstream[root] = tree.loss.d1(fwd.yhat, y);
    let mut grads = vec![SparseVector::new(); n];
    let mut order = topo.bottom_up();
    order.reverse();
    for id in order {
        let spec = topo.node(id);
        let p = fwd.preds[id];
        let clamp = if spec.threshold_output && !(0.0..=1.0).contains(&p.raw) { 0.0 } else { 1.0 };
        let g = upstream[id] * clamp;
        let child_weights: Vec<f64> = if spec.is_leaf() {
            Vec::new()
        } else {
            tree.nodes[id].model.weights()[..spec.fan_in].to_vec()
        };
        let out = backprop_messages(g, &fwd.inputs[id], &child_weights);
        for (&c, &m) in topo.children(id).iter().zip(&out.to_children) {
            upstream[c] = m;
        }
        grads[id] = out.own;
    }
    Ok(grads)
}

/// Backprop update at a non-root node once the message `g` (gradient with
/// respect to its transmitted value) arrives. Returns the messages for its
/// children.
pub fn backprop_update(
    w: &mut [f64],
    rec: &mut PendingRecord,
    g: f64,
    eta: f64,
) -> Result<BackpropOut> {
    rec.consume()?;
    let out = backprop_messages(g * rec.clamp_derivative(), &rec.x, &rec.child_weights);
    apply_gradient(w, &out.own, eta);
    Ok(out)
}

/// Sum of per-example gradients at the current weights, accumulated in
/// example order. The model is not changed.
pub fn minibatch_gradient(model: &WeightModel, batch: &[Example], loss: LossSpec) -> Result<SparseVector> {
    Ok(batch_gradient(model, batch, loss)?.0)
}

/// Gradient plus the per-example predictions it was formed from.
fn batch_gradient(model: &WeightModel, batch: &[Example], loss: LossSpec) -> Result<(SparseVector, Vec<f64>)> {
    let mut yhats = Vec::with_capacity(batch.len());
    let mut parts = Vec::new();
    for ex in batch {
        let yhat = dot(&ex.x, model)?;
        yhats.push(yhat);
        parts.extend(linear_gradient(&ex.x, loss.d1(yhat, ex.y)).into_entries());
    }
    // A stable sort keeps example order within each index, and a lone entry
    // is copied unchanged, so one-example batches give the plain gradient.
    Ok((SparseVector::from_unsorted(parts), yhats))
}

/// One update per batch: `w -= eta * g`. Returns the predictions made
/// before the update.
pub fn minibatch_gd_step(
    model: &mut WeightModel,
    batch: &[Example],
    eta: f64,
    loss: LossSpec,
    step: u64,
) -> Result<Vec<f64>> {
    let (g, yhats) = batch_gradient(model, batch, loss)?;
    if yhats.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { step });
    }
    apply_gradient(model.weights_mut(), &g, eta);
    Ok(yhats)
}

fn check_batch(b: usize, passes: u32) -> Result<()> {
    if b == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if passes == 0 {
        return Err(Error::config("passes must be at least 1"));
    }
    Ok(())
}

/// Minibatch gradient descent; the step size is indexed by batch number and
/// a short final batch is processed as is.
pub fn train_minibatch(
    data: &[Example],
    bits: u32,
    s: ScheduleSpec,
    loss: LossSpec,
    b: usize,
    passes: u32,
) -> Result<(WeightModel, Metrics)> {
    check_batch(b, passes)?;
    s.validate()?;
    let mut model = WeightModel::new(bits)?;
    let mut metrics = Metrics::new();
    let mut step = 0;
    for _ in 0..passes {
        for batch in data.chunks(b) {
            step += 1;
            let eta = learning_rate(&s, step)?;
            let yhats = minibatch_gd_step(&mut model, batch, eta, loss, step)?;
            for (yhat, ex) in yhats.iter().zip(batch) {
                metrics.record(*yhat, ex.y);
            }
        }
    }
    Ok((model, metrics))
}

/// `max(0, <g, g - g_prev> / |g_prev|^2)`, and 0 when `g_prev` vanishes.
pub fn polak_ribiere(g: &SparseVector, g_prev: &SparseVector) -> f64 {
    let denom = g_prev.norm_sq();
    if denom == 0.0 {
        return 0.0;
    }
    let num = g.norm_sq() - g.dot_sparse(g_prev);
    (num / denom).max(0.0)
}

/// Per-step diagnostics of conjugate gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStepInfo {
    pub beta: f64,
    pub alpha: f64,
    /// Non-positive curvature: a plain gradient step was taken.
    pub fallback: bool,
    pub phase: u64,
}

/// Lazy nonlinear conjugate gradient state.
///
/// Between touches the direction of an index decays by the product of the
/// betas, so each index stores `u = d / B` and the value `a` of the running
/// sum `A = sum alpha_s B_s` at its last touch; materializing adds
/// `u (A - a)`. A phase ends whenever beta is 0; indices from an older
/// phase are finished with that phase's final `A` and get a zero direction.
#[derive(Debug, Clone)]
pub struct CgState {
    u: Vec<f64>,
    a_base: Vec<f64>,
    phase_of: Vec<u64>,
    touched: Vec<u32>,
    is_touched: Vec<bool>,
    a_end: Vec<f64>,
    big_a: f64,
    big_b: f64,
    phase: u64,
    t: u64,
    g_prev: SparseVector,
    pub fallbacks: u64,
}

/// Renormalize once the beta product leaves this range.
const B_MIN: f64 = 1e-150;
const B_MAX: f64 = 1e150;

impl CgState {
    pub fn new(size: usize) -> Self {
        CgState {
            u: vec![0.0; size],
            a_base: vec![0.0; size],
            phase_of: vec![0; size],
            touched: Vec::new(),
            is_touched: vec![false; size],
            a_end: vec![0.0],
            big_a: 0.0,
            big_b: 1.0,
            phase: 0,
            t: 0,
            g_prev: SparseVector::new(),
            fallbacks: 0,
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn phase(&self) -> u64 {
        self.phase
    }

    /// Brings weight `i` up to date with every step taken so far.
    pub fn touch(&mut self, model: &mut WeightModel, i: u32) -> Result<f64> {
        let k = i as usize;
        let ts = model.timestamp(i);
        if ts > self.t {
            return Err(Error::contract(format!("weight {i} stamped at step {ts}, now is step {}", self.t)));
        }
        if ts < self.t && self.is_touched[k] {
            let end = if self.phase_of[k] == self.phase { self.big_a } else { self.a_end[self.phase_of[k] as usize] };
            let w = model.get(i) + self.u[k] * (end - self.a_base[k]);
            model.set(i, w);
        }
        if self.phase_of[k] != self.phase {
            self.u[k] = 0.0;
            self.phase_of[k] = self.phase;
        }
        self.a_base[k] = self.big_a;
        if !self.is_touched[k] {
            self.is_touched[k] = true;
            self.touched.push(i);
        }
        model.set_timestamp(i, self.t);
        Ok(model.get(i))
    }

    /// Materializes every weight touched so far.
    pub fn finalize(&mut self, model: &mut WeightModel) -> Result<()> {
        for k in 0..self.touched.len() {
            let i = self.touched[k];
            self.touch(model, i)?;
        }
        Ok(())
    }

    /// Direction of index `i` after `touch` at the current step.
    fn direction(&self, i: u32) -> f64 {
        self.u[i as usize] * self.big_b
    }

    /// One conjugate gradient step on `batch`. `eta` is only used for the
    /// fallback gradient step. Returns the predictions made before it.
    pub fn step(
        &mut self,
        model: &mut WeightModel,
        batch: &[Example],
        eta: f64,
        loss: LossSpec,
    ) -> Result<(Vec<f64>, CgStepInfo)> {
        if model.len() != self.u.len() {
            return Err(Error::contract("conjugate gradient state sized for another model"));
        }
        for ex in batch {
            model.check_range(&ex.x)?;
        }
        let mut support: Vec<u32> = batch.iter().flat_map(|e| e.x.indices()).collect();
        support.sort_unstable();
        support.dedup();
        for &i in &support {
            self.touch(model, i)?;
        }
        let step_no = self.t + 1;
        let (g, yhats) = batch_gradient(model, batch, loss)?;
        if yhats.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { step: step_no });
        }
        let beta = if self.t == 0 { 0.0 } else { polak_ribiere(&g, &self.g_prev) };
        // Direction on the support; zero elsewhere when a phase starts.
        let mut d: Vec<(u32, f64)> = Vec::with_capacity(support.len());
        let mut gi = g.entries().iter().peekable();
        for &i in &support {
            let gv = match gi.peek() {
                Some(&&(j, v)) if j == i => {
                    gi.next();
                    v
                }
                _ => 0.0,
            };
            let prev = if beta > 0.0 { beta * self.direction(i) } else { 0.0 };
            d.push((i, -gv + prev));
        }
        let d = SparseVector::from_sorted(d)?;
        let mut curvature = 0.0;
        for ex in batch {
            let yhat = dot_unchecked(&ex.x, model.weights());
            let dx = ex.x.dot_sparse(&d);
            curvature += loss.d2(yhat, ex.y) * dx * dx;
        }
        let gd = g.dot_sparse(&d);
        let (beta, alpha, d, fallback) = if curvature > 0.0 {
            (beta, -gd / curvature, d, false)
        } else {
            self.fallbacks += 1;
            (0.0, eta, g.scaled(-1.0), true)
        };
        if beta > 0.0 {
            self.big_b *= beta;
        } else {
            self.a_end[self.phase as usize] = self.big_a;
            self.phase += 1;
            self.a_end.push(0.0);
            self.big_a = 0.0;
            self.big_b = 1.0;
        }
        self.big_a += alpha * self.big_b;
        // The support is materialized through this step directly.
        for &i in &support {
            let k = i as usize;
            self.phase_of[k] = self.phase;
            self.u[k] = 0.0;
        }
        for (i, dv) in d.iter() {
            let k = i as usize;
            model.set(i, model.get(i) + alpha * dv);
            self.u[k] = dv / self.big_b;
        }
        for &i in &support {
            self.a_base[i as usize] = self.big_a;
            model.set_timestamp(i, step_no);
        }
        self.t = step_no;
        self.g_prev = g;
        if !(B_MIN..=B_MAX).contains(&self.big_b) {
            self.renormalize(model)?;
        }
        Ok((yhats, CgStepInfo { beta, alpha, fallback, phase: self.phase }))
    }

    /// Materializes everything and restarts the beta product at 1 without
    /// changing any direction.
    fn renormalize(&mut self, model: &mut WeightModel) -> Result<()> {
        self.finalize(model)?;
        for &i in &self.touched {
            let k = i as usize;
            if self.phase_of[k] == self.phase {
                self.u[k] *= self.big_b;
            }
            self.a_base[k] = 0.0;
        }
        self.big_b = 1.0;
        self.big_a = 0.0;
        Ok(())
    }
}

/// Minibatch conjugate gradient with lazy updates; `s` supplies the fallback
/// step size, indexed by batch number.
pub fn train_minibatch_cg(
    data: &[Example],
    bits: u32,
    s: ScheduleSpec,
    loss: LossSpec,
    b: usize,
    passes: u32,
) -> Result<(WeightModel, Metrics, CgState)> {
    check_batch(b, passes)?;
    s.validate()?;
    let mut model = WeightModel::new(bits)?;
    let mut cg = CgState::new(model.len());
    let mut metrics = Metrics::new();
    for _ in 0..passes {
        for batch in data.chunks(b) {
            let eta = learning_rate(&s, cg.steps() + 1)?;
            let (yhats, _) = cg.step(&mut model, batch, eta, loss)?;
            for (yhat, ex) in yhats.iter().zip(batch) {
                metrics.record(*yhat, ex.y);
            }
        }
    }
    cg.finalize(&mut model)?;
    Ok((model, metrics, cg))
}
