use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `before` up to and including `last_epoch`, `after` from the next epoch on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub before: f64,
    pub after: f64,
    pub last_epoch: usize,
}

impl StepSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if epoch <= self.last_epoch {
            self.before
        } else {
            self.after
        }
    }
}

/// `start * (1 - epoch / epochs)`, clamped at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDecay {
    pub start: f64,
    pub epochs: usize,
}

impl LinearDecay {
    pub fn at(&self, epoch: usize) -> f64 {
        (self.start * (1.0 - epoch as f64 / self.epochs as f64)).max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Lr,
    Momentum,
    PosWeight,
    Aux,
}

/// Epoch-indexed optimizer and loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSet {
    pub lr: StepSchedule,
    pub momentum: StepSchedule,
    pub pos_weight: StepSchedule,
    /// Shared weight of all six auxiliary losses.
    pub aux: LinearDecay,
}

impl Default for ScheduleSet {
    fn default() -> Self {
        Self {
            lr: StepSchedule {
                before: 0.1,
                after: 0.01,
                last_epoch: 10,
            },
            momentum: StepSchedule {
                before: 0.9,
                after: 0.99,
                last_epoch: 10,
            },
            pos_weight: StepSchedule {
                before: 1000.0,
                after: 1.0,
                last_epoch: 5,
            },
            aux: LinearDecay {
                start: 1.0,
                epochs: 50,
            },
        }
    }
}

impl ScheduleSet {
    pub fn value(&self, which: ScheduleKind, epoch: usize) -> f64 {
        match which {
            ScheduleKind::Lr => self.lr.at(epoch),
            ScheduleKind::Momentum => self.momentum.at(epoch),
            ScheduleKind::PosWeight => self.pos_weight.at(epoch),
            ScheduleKind::Aux => self.aux.at(epoch),
        }
    }

    /// Same schedule with both learning-rate phases multiplied by `factor`.
    pub fn with_lr_scale(mut self, factor: f64) -> Self {
        self.lr.before *= factor;
        self.lr.after *= factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lr.before", self.lr.before),
            ("lr.after", self.lr.after),
            ("momentum.before", self.momentum.before),
            ("momentum.after", self.momentum.after),
            ("pos_weight.before", self.pos_weight.before),
            ("pos_weight.after", self.pos_weight.after),
            ("aux.start", self.aux.start),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "schedules.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("momentum.before", self.momentum.before),
            ("momentum.after", self.momentum.after),
        ] {
            if v >= 1.0 {
                return Err(Error::Config(format!(
                    "schedules.{name} must be < 1, got {v}"
                )));
            }
        }
        if self.aux.epochs == 0 {
            return Err(Error::Config("schedules.aux.epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Value of schedule `which` at `epoch`.
pub fn schedule_value(s: &ScheduleSet, which: ScheduleKind, epoch: usize) -> f64 {
    s.value(which, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries_take_effect_on_the_following_epoch() {
        let s = ScheduleSet::default();
        assert_eq!(schedule_value(&s, ScheduleKind::Lr, 10), 0.1);
        assert_eq!(schedule_value(&s, ScheduleKind::Lr, 11), 0.01);
        assert_eq!(schedule_value(&s, ScheduleKind::Momentum, 10), 0.9);
        assert_eq!(schedule_value(&s, ScheduleKind::Momentum, 11), 0.99);
        assert_eq!(schedule_value(&s, ScheduleKind::PosWeight, 5), 1000.0);
        assert_eq!(schedule_value(&s, ScheduleKind::PosWeight, 6), 1.0);
    }

    #[test]
    fn aux_decays_linearly_and_clamps() {
        let s = ScheduleSet::default();
        assert_eq!(s.value(ScheduleKind::Aux, 0), 1.0);
        assert_eq!(s.value(ScheduleKind::Aux, 25), 0.5);
        assert_eq!(s.value(ScheduleKind::Aux, 50), 0.0);
        assert_eq!(s.value(ScheduleKind::Aux, 80), 0.0);
    }

    #[test]
    fn partial_json_keeps_defaults() {
        let s: ScheduleSet =
            serde_json::from_str(r#"{"lr": {"before": 0.001, "after": 0.0001, "last_epoch": 10}}"#)
                .unwrap();
        assert_eq!(s.lr.before, 0.001);
        assert_eq!(s.pos_weight, ScheduleSet::default().pos_weight);
        s.validate().unwrap();
    }

    #[test]
    fn negative_values_rejected() {
        let mut s = ScheduleSet::default();
        s.pos_weight.after = -1.0;
        assert!(s
            .validate()
            .unwrap_err()
            .to_string()
            .contains("pos_weight.after"));
    }
}
