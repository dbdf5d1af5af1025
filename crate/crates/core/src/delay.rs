//! Delayed-update gradient descent, regret against the hindsight optimum,
//! and adversarial duplicate streams.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::learner::{apply_gradient, learning_rate, linear_gradient, Example, Metrics, ScheduleSpec};
use crate::loss::LossSpec;
use crate::oracle::{least_squares, moments, DensePoint};
use crate::sparse::{dot, SparseVector, WeightModel};

/// Default bound on outstanding delayed gradients.
pub const DEFAULT_DELAY_CAPACITY: usize = 2048;

/// A gradient waiting to be applied: the inputs it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Pending {
    pub x: SparseVector,
    pub yhat: f64,
    pub y: f64,
    /// Instance id; 0 for the zero-padding prefix.
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct DelayBuffer {
    capacity: usize,
    queue: VecDeque<Pending>,
}

impl DelayBuffer {
    pub fn new(capacity: usize) -> Self {
        DelayBuffer { capacity, queue: VecDeque::with_capacity(capacity.min(4096)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn push(&mut self, p: Pending) -> Result<()> {
        if self.queue.len() >= self.capacity {
            return Err(Error::config(format!("delay buffer full (capacity {})", self.capacity)));
        }
        self.queue.push_back(p);
        Ok(())
    }

    pub fn pop(&mut self) -> Option<Pending> {
        self.queue.pop_front()
    }
}

/// Per-step record of a delayed run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayStep {
    pub t: u64,
    pub yhat: f64,
    pub y: f64,
    /// Instance whose gradient was applied at this step (0 = prefix).
    pub applied_from: u64,
    /// Euclidean norm of the applied gradient.
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct DelayRun {
    pub model: WeightModel,
    pub metrics: Metrics,
    pub log: Vec<DelayStep>,
}

/// Delayed gradient descent with the default buffer capacity.
pub fn delayed_sgd_run(
    data: &[Example],
    bits: u32,
    tau: u64,
    s: ScheduleSpec,
    loss: LossSpec,
) -> Result<DelayRun> {
    delayed_sgd_run_with_capacity(data, bits, tau, s, loss, DEFAULT_DELAY_CAPACITY)
}

/// The first `tau` virtual instances are `x = 0` with the gradient of
/// `loss(0, 0)`. At step `t` the run predicts with the current weights,
/// queues that gradient, and applies the one queued `tau` steps earlier.
/// Step sizes follow the shifted clock `t + tau`, so schedules that are only
/// defined past `tau` can be used.
pub fn delayed_sgd_run_with_capacity(
    data: &[Example],
    bits: u32,
    tau: u64,
    s: ScheduleSpec,
    loss: LossSpec,
    capacity: usize,
) -> Result<DelayRun> {
    s.validate()?;
    if tau as u128 > capacity as u128 {
        return Err(Error::config(format!("tau = {tau} exceeds the delay buffer capacity {capacity}")));
    }
    let mut model = WeightModel::new(bits)?;
    let mut buffer = DelayBuffer::new(capacity + 1);
    for _ in 0..tau {
        buffer.push(Pending { x: SparseVector::new(), yhat: 0.0, y: 0.0, t: 0 })?;
    }
    let mut metrics = Metrics::new();
    let mut log = Vec::with_capacity(data.len());
    for (k, ex) in data.iter().enumerate() {
        let t = k as u64 + 1;
        let yhat = dot(&ex.x, &model)?;
        if !yhat.is_finite() {
            return Err(Error::NumericOverflow { step: t });
        }
        buffer.push(Pending { x: ex.x.clone(), yhat, y: ex.y, t })?;
        let due = buffer.pop().expect("buffer holds at least the entry just pushed");
        let eta = learning_rate(&s, t + tau)?;
        let grad = linear_gradient(&due.x, loss.d1(due.yhat, due.y));
        apply_gradient(model.weights_mut(), &grad, eta);
        metrics.record(yhat, ex.y);
        log.push(DelayStep { t, yhat, y: ex.y, applied_from: due.t, grad_norm: grad.norm_sq().sqrt() });
    }
    Ok(DelayRun { model, metrics, log })
}

/// Least-squares hindsight optimum over the observed support.
#[derive(Debug, Clone, PartialEq)]
pub struct Hindsight {
    pub w: SparseVector,
    pub singular: bool,
}

pub const MAX_ORACLE_POINTS: usize = 10_000;
pub const MAX_ORACLE_INDICES: usize = 1_000;

pub fn hindsight_oracle(points: &[Example], loss: LossSpec) -> Result<Hindsight> {
    let LossSpec::Squared = loss;
    if points.is_empty() {
        return Err(Error::Domain("hindsight oracle needs at least one point".into()));
    }
    if points.len() > MAX_ORACLE_POINTS {
        return Err(Error::Domain(format!("hindsight oracle limited to {MAX_ORACLE_POINTS} points")));
    }
    let mut support: Vec<u32> = points.iter().flat_map(|p| p.x.indices()).collect();
    support.sort_unstable();
    support.dedup();
    if support.len() > MAX_ORACLE_INDICES {
        return Err(Error::Domain(format!("hindsight oracle limited to {MAX_ORACLE_INDICES} distinct indices")));
    }
    if support.is_empty() {
        return Ok(Hindsight { w: SparseVector::new(), singular: false });
    }
    let dense: Vec<DensePoint> = points
        .iter()
        .map(|p| {
            let mut x = vec![0.0; support.len()];
            for (i, v) in p.x.iter() {
                x[support.binary_search(&i).expect("index in support")] = v;
            }
            (x, p.y)
        })
        .collect();
    let sol = least_squares(&moments(&dense)?);
    let w = SparseVector::from_sorted(support.into_iter().zip(sol.w).collect())?;
    Ok(Hindsight { w, singular: sol.singular })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegretReport {
    pub tau: u64,
    pub t_total: u64,
    pub r: f64,
    pub l: f64,
    pub total_alg_loss: f64,
    pub total_oracle_loss: f64,
    pub regret: f64,
    pub bound_4rl_sqrt_tau_t: f64,
}

impl RegretReport {
    pub const CSV_HEADER: &'static str = "tau,T,R,L,regret,bound";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.tau, self.t_total, self.r, self.l, self.regret, self.bound_4rl_sqrt_tau_t
        )
    }
}

/// `4 R L sqrt(tau T)`.
pub fn delay_regret_bound(r: f64, l: f64, tau: u64, t_total: u64) -> f64 {
    4.0 * r * l * ((tau as f64) * (t_total as f64)).sqrt()
}

/// Cumulative loss of the logged predictions minus that of `oracle_w` on the
/// same examples. Not clamped: online learners can beat a fixed predictor.
pub fn regret_report(
    data: &[Example],
    log: &[DelayStep],
    oracle_w: &SparseVector,
    r: f64,
    l: f64,
    tau: u64,
    loss: LossSpec,
) -> Result<RegretReport> {
    if log.is_empty() {
        return Err(Error::Domain("regret of an empty log".into()));
    }
    if log.len() != data.len() {
        return Err(Error::Domain(format!("log has {} steps but data has {}", log.len(), data.len())));
    }
    let mut alg = 0.0;
    let mut opt = 0.0;
    for (step, ex) in log.iter().zip(data) {
        alg += loss.value(step.yhat, step.y);
        opt += loss.value(ex.x.dot_sparse(oracle_w), ex.y);
    }
    let t_total = log.len() as u64;
    Ok(RegretReport {
        tau,
        t_total,
        r,
        l,
        total_alg_loss: alg,
        total_oracle_loss: opt,
        regret: alg - opt,
        bound_4rl_sqrt_tau_t: delay_regret_bound(r, l, tau, t_total),
    })
}

/// Blocks of `tau` copies of `base`; the label's sign flips on every other
/// block (period `2 tau`). Ids run `1..=t_total`.
pub fn make_adversarial_stream(base: &Example, tau: u64, t_total: u64) -> Result<Vec<Example>> {
    if tau == 0 || !t_total.is_multiple_of(tau) {
        return Err(Error::config(format!("T = {t_total} must be a positive multiple of tau = {tau}")));
    }
    Ok((0..t_total)
        .map(|k| {
            let block = k / tau;
            let y = if block.is_multiple_of(2) { base.y } else { -base.y };
            Example::new(base.x.clone(), y)
        })
        .collect())
}
