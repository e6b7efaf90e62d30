//! Masked weighted cross-entropy, the deeply supervised total loss and the
//! training schedules.

mod loss;
mod schedule;

pub use loss::{masked_weighted_bce_value, LossMask, MaskedLoss, CALCIFICATION_HU};
pub use schedule::{schedule_value, LinearDecay, ScheduleKind, ScheduleSet, StepSchedule};
