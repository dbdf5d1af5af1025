/// Differentiable loss `l(yhat, y)`. Only squared loss is provided.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LossSpec {
    /// `1/2 (yhat - y)^2`
    #[default]
    Squared,
}

/// Loss value with first and second derivative in `yhat`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl LossSpec {
    pub fn eval(self, yhat: f64, y: f64) -> LossEval {
        match self {
            LossSpec::Squared => {
                let r = yhat - y;
                LossEval { value: 0.5 * r * r, d1: r, d2: 1.0 }
            }
        }
    }

    pub fn value(self, yhat: f64, y: f64) -> f64 {
        self.eval(yhat, y).value
    }

    pub fn d1(self, yhat: f64, y: f64) -> f64 {
        self.eval(yhat, y).d1
    }

    pub fn d2(self, yhat: f64, y: f64) -> f64 {
        self.eval(yhat, y).d2
    }
}
