//! Learning-rate schedules, layer groups, unfreezing policies and optimizers.

mod groups;
mod optim;
mod schedule;

pub use groups::{assign_discriminative_lrs, unfreeze_step, LayerGroups, UnfreezeMode, UnfreezePolicy, DISCR_DECAY};
pub use optim::{Optimizer, OptimizerKind};
pub use schedule::{cosine_lr, stlr_lr, LrSchedule, StlrSchedule};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("iteration {t} outside [0, {total}]")]
    OutOfRange { t: usize, total: usize },
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("no gradient for trainable parameter {0}")]
    MissingGradient(String),
}
