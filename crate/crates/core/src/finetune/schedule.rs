use serde::{Deserialize, Serialize};

use super::ScheduleError;

/// Slanted triangular learning rates: a short linear warm-up from
/// `eta_max / ratio` to `eta_max` over the first `cut_frac` of the run,
/// followed by a long linear decay back down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StlrSchedule {
    pub total: usize,
    pub cut_frac: f64,
    pub ratio: f64,
    pub eta_max: f64,
}

impl StlrSchedule {
    pub fn new(total: usize, cut_frac: f64, ratio: f64, eta_max: f64) -> Result<Self, ScheduleError> {
        let s = Self {
            total,
            cut_frac,
            ratio,
            eta_max,
        };
        if !(cut_frac > 0.0 && cut_frac < 1.0) {
            return Err(ScheduleError::Invalid(format!("cut_frac {cut_frac} outside (0, 1)")));
        }
        if !(ratio > 1.0) {
            return Err(ScheduleError::Invalid(format!("ratio {ratio} must exceed 1")));
        }
        if !(eta_max > 0.0) {
            return Err(ScheduleError::Invalid(format!("eta_max {eta_max} must be positive")));
        }
        if s.cut() < 1 {
            return Err(ScheduleError::Invalid(format!(
                "{total} iterations with cut_frac {cut_frac} leave no warm-up step"
            )));
        }
        Ok(s)
    }

    /// `cut_frac = 0.1`, `ratio = 32`, `eta_max = 0.01`.
    pub fn with_defaults(total: usize) -> Result<Self, ScheduleError> {
        Self::new(total, 0.1, 32.0, 0.01)
    }

    pub fn cut(&self) -> usize {
        (self.total as f64 * self.cut_frac).floor() as usize
    }

    /// Learning rate at iteration `t` in `[0, total]`.
    pub fn lr(&self, t: usize) -> Result<f64, ScheduleError> {
        if t > self.total {
            return Err(ScheduleError::OutOfRange {
                t,
                total: self.total,
            });
        }
        let cut = self.cut() as f64;
        let t = t as f64;
        let p = if t < cut {
            t / cut
        } else {
            1.0 - (t - cut) / (cut * (1.0 / self.cut_frac - 1.0))
        };
        // When total * cut_frac is not an integer the decay overshoots past
        // p = 0 near the end; hold the floor instead of going below it.
        let p = p.max(0.0);
        Ok(self.eta_max * (1.0 + p * (self.ratio - 1.0)) / self.ratio)
    }
}

pub fn stlr_lr(sched: &StlrSchedule, t: usize) -> Result<f64, ScheduleError> {
    sched.lr(t)
}

/// One cycle of cosine annealing from `eta_max` at `t = 0` to `eta_min` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, eta_max: f64, eta_min: f64) -> f64 {
    let frac = if total == 0 { 1.0 } else { t.min(total) as f64 / total as f64 };
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Shape of the learning-rate curve over a run, as a multiplier on each
/// group's peak rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Stlr { cut_frac: f64, ratio: f64 },
    Cosine { min_frac: f64 },
    Constant,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Stlr {
            cut_frac: 0.1,
            ratio: 32.0,
        }
    }
}

impl LrSchedule {
    pub fn cosine() -> Self {
        LrSchedule::Cosine { min_frac: 0.0 }
    }

    /// `eta_t / eta_max` at iteration `t` of `total`.
    pub fn factor(&self, t: usize, total: usize) -> Result<f64, ScheduleError> {
        match *self {
            LrSchedule::Stlr { cut_frac, ratio } => {
                let sched = StlrSchedule::new(total, cut_frac, ratio, 1.0);
                if total as f64 * cut_frac >= 1.0 || !(cut_frac > 0.0 && cut_frac < 1.0 && ratio > 1.0) {
                    return sched?.lr(t);
                }
                // Too short for `cut_frac` to leave a warm-up step: warm up
                // for exactly one step, then decay linearly.
                if t > total {
                    return Err(ScheduleError::OutOfRange { t, total });
                }
                let p = match t {
                    0 => 0.0,
                    _ if total == 1 => 1.0,
                    t => 1.0 - (t - 1) as f64 / (total - 1) as f64,
                };
                Ok((1.0 + p * (ratio - 1.0)) / ratio)
            }
            LrSchedule::Cosine { min_frac } => {
                if t > total {
                    return Err(ScheduleError::OutOfRange { t, total });
                }
                Ok(cosine_lr(t, total, 1.0, min_frac))
            }
            LrSchedule::Constant => Ok(1.0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LrSchedule::Stlr { .. } => "stlr",
            LrSchedule::Cosine { .. } => "cosine",
            LrSchedule::Constant => "constant",
        }
    }
}
