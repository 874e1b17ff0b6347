//! Epoch-dependent weighting of the BCE and soft Dice terms.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// The five loss strategies compared by this crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScheduleKind {
    BceOnly,
    DiceOnly,
    Add,
    SoftFinetune,
    HardFinetune,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::BceOnly,
        ScheduleKind::DiceOnly,
        ScheduleKind::Add,
        ScheduleKind::SoftFinetune,
        ScheduleKind::HardFinetune,
    ];

    /// Name used in config files, CLI flags and report rows.
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::BceOnly => "bce",
            ScheduleKind::DiceOnly => "dice",
            ScheduleKind::Add => "add",
            ScheduleKind::SoftFinetune => "soft_ft",
            ScheduleKind::HardFinetune => "hard_ft",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|k| k.name()).join(", ")
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown schedule '{s}' (valid: {})",
                    Self::valid_names()
                ))
            })
    }
}

pub const DEFAULT_SWITCH_FRACTION: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSchedule {
    pub kind: ScheduleKind,
    pub total_epochs: usize,
    /// Fraction of training after which hard fine-tuning switches to Dice.
    pub switch_fraction: f64,
}

impl LossSchedule {
    pub fn new(kind: ScheduleKind, total_epochs: usize) -> Result<Self> {
        Self::with_switch_fraction(kind, total_epochs, DEFAULT_SWITCH_FRACTION)
    }

    pub fn with_switch_fraction(kind: ScheduleKind, total_epochs: usize, switch_fraction: f64) -> Result<Self> {
        if total_epochs == 0 {
            return Err(Error::Config("a schedule needs at least one epoch".into()));
        }
        if !(switch_fraction > 0.0 && switch_fraction < 1.0) {
            return Err(Error::Config(format!(
                "switch fraction must lie in (0, 1), got {switch_fraction}"
            )));
        }
        Ok(LossSchedule {
            kind,
            total_epochs,
            switch_fraction,
        })
    }

    /// Loss weights at `epoch` ∈ `[0, total_epochs]`.
    pub fn weights_at(&self, epoch: usize) -> Result<LossWeights> {
        let n_total = self.total_epochs;
        if epoch > n_total {
            return Err(Error::Contract(format!(
                "epoch {epoch} beyond schedule length {n_total}"
            )));
        }
        let (n, total) = (epoch as f64, n_total as f64);
        Ok(match self.kind {
            ScheduleKind::BceOnly => LossWeights::new(1.0, 0.0),
            ScheduleKind::DiceOnly => LossWeights::new(0.0, 1.0),
            ScheduleKind::Add => LossWeights::new(1.0, 1.0),
            ScheduleKind::SoftFinetune => {
                LossWeights::new((n_total - epoch) as f64 / total, n / total)
            }
            ScheduleKind::HardFinetune => {
                if n < self.switch_fraction * total {
                    LossWeights::new(1.0, 0.0)
                } else {
                    LossWeights::new(0.0, 1.0)
                }
            }
        })
    }
}
