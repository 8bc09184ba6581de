//! Noise-annealing schedules: distortion strength as a function of the
//! training step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Sigmoid,
    Power,
    Exponential,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    /// Initial strength.
    pub alpha0: f64,
    /// Sigmoid midpoint, in steps.
    pub gamma_mid: f64,
    /// Sigmoid steepness.
    pub lambda_steep: f64,
    /// Power-decay exponent.
    pub p_exp: f64,
    /// Exponential-decay base.
    pub decay: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Sigmoid,
            alpha0: 500.0,
            gamma_mid: 40.0,
            lambda_steep: 30.0,
            p_exp: 3.0,
            decay: 0.98,
        }
    }
}

impl ScheduleSpec {
    pub fn sigmoid(alpha0: f64, gamma_mid: f64, lambda_steep: f64) -> Self {
        Self {
            kind: ScheduleKind::Sigmoid,
            alpha0,
            gamma_mid,
            lambda_steep,
            ..Self::default()
        }
    }

    pub fn power(alpha0: f64, p_exp: f64) -> Self {
        Self {
            kind: ScheduleKind::Power,
            alpha0,
            p_exp,
            ..Self::default()
        }
    }

    pub fn exponential(alpha0: f64, decay: f64) -> Self {
        Self {
            kind: ScheduleKind::Exponential,
            alpha0,
            decay,
            ..Self::default()
        }
    }

    pub fn constant(alpha0: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            alpha0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha0 >= 0.0) || !self.alpha0.is_finite() {
            return bad(format!("schedule.alpha0 = {} must be >= 0", self.alpha0));
        }
        match self.kind {
            ScheduleKind::Sigmoid if !(self.lambda_steep > 0.0) => {
                bad(format!("schedule.lambda_steep = {} must be > 0", self.lambda_steep))
            }
            ScheduleKind::Sigmoid if !self.gamma_mid.is_finite() => {
                bad("schedule.gamma_mid must be finite".into())
            }
            ScheduleKind::Power if !(self.p_exp > 0.0) => {
                bad(format!("schedule.p_exp = {} must be > 0", self.p_exp))
            }
            ScheduleKind::Exponential if !(self.decay > 0.0 && self.decay <= 1.0) => {
                bad(format!("schedule.decay = {} must be in (0, 1]", self.decay))
            }
            _ => Ok(()),
        }
    }

    /// Strength at step `t` of `t_max`.
    pub fn eval(&self, t: usize, t_max: usize) -> Result<f64> {
        if t_max == 0 {
            return Err(Error::Range("t_max must be positive".into()));
        }
        if t > t_max {
            return Err(Error::Range(format!("step {t} exceeds t_max {t_max}")));
        }
        self.validate().map_err(|e| Error::Range(e.to_string()))?;
        let frac = t as f64 / t_max as f64;
        let a = match self.kind {
            ScheduleKind::Sigmoid => {
                let z = -self.lambda_steep * (t as f64 - self.gamma_mid) / t_max as f64;
                self.alpha0 * (1.0 - 1.0 / (1.0 + z.exp()))
            }
            ScheduleKind::Power => self.alpha0 * (1.0 - frac).powf(self.p_exp),
            ScheduleKind::Exponential => self.alpha0 * self.decay.powf(frac),
            ScheduleKind::Constant => self.alpha0,
        };
        Ok(a.clamp(0.0, self.alpha0))
    }
}

/// Free-function form of [`ScheduleSpec::eval`].
pub fn eval_schedule(spec: &ScheduleSpec, t: usize, t_max: usize) -> Result<f64> {
    spec.eval(t, t_max)
}
