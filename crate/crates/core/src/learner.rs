//! Single-node online gradient descent and progressive validation.

use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::sparse::{dot, SparseVector, WeightModel};

/// A labelled, already hashed example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: SparseVector,
    pub y: f64,
}

impl Example {
    pub fn new(x: SparseVector, y: f64) -> Self {
        Example { x, y }
    }

    pub fn dense(x: &[f64], y: f64) -> Self {
        Example { x: SparseVector::from_dense(x), y }
    }
}

/// Learning-rate schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleSpec {
    /// `lambda / sqrt(t + t0)`
    Power { lambda: f64, t0: f64 },
    /// `R / (L sqrt(2 tau t))`, the worst-case delayed-update schedule.
    WorstCaseDelay { r: f64, l: f64, tau: u64 },
    /// `1 / (c (t - tau))`, for strongly convex losses; needs `t > tau`.
    StronglyConvex { c: f64, tau: u64 },
}

impl ScheduleSpec {
    pub fn power(lambda: f64, t0: f64) -> Result<Self> {
        let s = ScheduleSpec::Power { lambda, t0 };
        s.validate()?;
        Ok(s)
    }

    pub fn worst_case_delay(r: f64, l: f64, tau: u64) -> Result<Self> {
        let s = ScheduleSpec::WorstCaseDelay { r, l, tau };
        s.validate()?;
        Ok(s)
    }

    pub fn strongly_convex(c: f64, tau: u64) -> Result<Self> {
        let s = ScheduleSpec::StronglyConvex { c, tau };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match *self {
            ScheduleSpec::Power { lambda, t0 } => {
                positive("lambda", lambda)?;
                if !(t0 >= 0.0 && t0.is_finite()) {
                    return Err(Error::config(format!("t0 must be non-negative, got {t0}")));
                }
            }
            ScheduleSpec::WorstCaseDelay { r, l, tau } => {
                positive("R", r)?;
                positive("L", l)?;
                if tau == 0 {
                    return Err(Error::config("worst-case-delay schedule needs tau >= 1"));
                }
            }
            ScheduleSpec::StronglyConvex { c, .. } => positive("c", c)?,
        }
        Ok(())
    }
}

/// Step size at step `t >= 1`.
pub fn learning_rate(s: &ScheduleSpec, t: u64) -> Result<f64> {
    if t == 0 {
        return Err(Error::Domain("learning rate steps start at t = 1".into()));
    }
    let tf = t as f64;
    Ok(match *s {
        ScheduleSpec::Power { lambda, t0 } => lambda / (tf + t0).sqrt(),
        ScheduleSpec::WorstCaseDelay { r, l, tau } => r / (l * (2.0 * tau as f64 * tf).sqrt()),
        ScheduleSpec::StronglyConvex { c, tau } => {
            if t <= tau {
                return Err(Error::Domain(format!(
                    "strongly convex schedule undefined for t = {t} <= tau = {tau}"
                )));
            }
            1.0 / (c * (t - tau) as f64)
        }
    })
}

/// Accuracy threshold for {0,1} labels.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub t: u64,
    pub yhat: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checkpoint {
    pub t: u64,
    pub progressive_sq_loss: f64,
    pub accuracy: f64,
}

/// Progressive validation: every prediction is scored before the update it
/// feeds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub n_seen: u64,
    pub progressive_sq_loss_sum: f64,
    pub accuracy_correct: u64,
    pub log: Option<Vec<StepLog>>,
    pub checkpoints: Vec<Checkpoint>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_log() -> Self {
        Metrics { log: Some(Vec::new()), ..Self::default() }
    }

    pub fn record(&mut self, yhat: f64, y: f64) {
        self.n_seen += 1;
        let r = y - yhat;
        self.progressive_sq_loss_sum += r * r;
        if (yhat >= DECISION_THRESHOLD) == (y >= DECISION_THRESHOLD) {
            self.accuracy_correct += 1;
        }
        if let Some(log) = &mut self.log {
            log.push(StepLog { t: self.n_seen, yhat, y });
        }
        if self.n_seen.is_power_of_two() {
            self.checkpoints.push(self.checkpoint());
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            t: self.n_seen,
            progressive_sq_loss: self.mean_sq_loss(),
            accuracy: self.accuracy(),
        }
    }

    /// Power-of-two checkpoints plus the final state if it is not one.
    pub fn report_rows(&self) -> Vec<Checkpoint> {
        let mut rows = self.checkpoints.clone();
        if self.n_seen > 0 && !self.n_seen.is_power_of_two() {
            rows.push(self.checkpoint());
        }
        rows
    }

    pub fn mean_sq_loss(&self) -> f64 {
        if self.n_seen == 0 {
            0.0
        } else {
            self.progressive_sq_loss_sum / self.n_seen as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.n_seen == 0 {
            0.0
        } else {
            self.accuracy_correct as f64 / self.n_seen as f64
        }
    }
}

/// `w_i -= eta * g_i` over the support of `grad`.
#[inline]
pub(crate) fn apply_gradient(w: &mut [f64], grad: &SparseVector, eta: f64) {
    for &(i, g) in grad.entries() {
        w[i as usize] -= eta * g;
    }
}

/// Gradient `d1 * x` of a linear model's loss.
#[inline]
pub(crate) fn linear_gradient(x: &SparseVector, d1: f64) -> SparseVector {
    x.scaled(d1)
}

/// One step of online gradient descent at step `t`. Returns the prediction
/// made before the update.
pub fn sgd_step(
    w: &mut WeightModel,
    x: &SparseVector,
    y: f64,
    t: u64,
    s: &ScheduleSpec,
    loss: LossSpec,
) -> Result<f64> {
    let yhat = dot(x, w)?;
    if !yhat.is_finite() {
        return Err(Error::NumericOverflow { step: t });
    }
    let eta = learning_rate(s, t)?;
    let d1 = loss.d1(yhat, y);
    apply_gradient(w.weights_mut(), &linear_gradient(x, d1), eta);
    Ok(yhat)
}

/// Stateful wrapper: owns the model and the global step counter.
#[derive(Debug, Clone)]
pub struct SgdLearner {
    pub model: WeightModel,
    pub schedule: ScheduleSpec,
    pub loss: LossSpec,
    pub t: u64,
    pub metrics: Metrics,
}

impl SgdLearner {
    pub fn new(bits: u32, schedule: ScheduleSpec, loss: LossSpec) -> Result<Self> {
        schedule.validate()?;
        Ok(SgdLearner {
            model: WeightModel::new(bits)?,
            schedule,
            loss,
            t: 0,
            metrics: Metrics::new(),
        })
    }

    pub fn with_log(mut self) -> Self {
        self.metrics = Metrics::with_log();
        self
    }

    pub fn learn(&mut self, x: &SparseVector, y: f64) -> Result<f64> {
        let yhat = sgd_step(&mut self.model, x, y, self.t + 1, &self.schedule, self.loss)?;
        self.t += 1;
        self.metrics.record(yhat, y);
        Ok(yhat)
    }
}

/// Runs `passes` passes of online gradient descent; `t` keeps counting
/// across passes.
pub fn train_sequential(
    data: &[Example],
    bits: u32,
    s: ScheduleSpec,
    loss: LossSpec,
    passes: u32,
) -> Result<(WeightModel, Metrics)> {
    if passes == 0 {
        return Err(Error::config("passes must be at least 1"));
    }
    let mut learner = SgdLearner::new(bits, s, loss)?;
    for _ in 0..passes {
        for ex in data {
            learner.learn(&ex.x, ex.y)?;
        }
    }
    Ok((learner.model, learner.metrics))
}
