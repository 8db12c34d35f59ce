//! KL weight schedules.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps a global step to a KL weight in `[0, 1]`. Construct through the
/// checked constructors; the fields are validated there, not in [`beta_at`].
///
/// [`beta_at`]: AnnealSchedule::beta_at
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnnealSchedule {
    Constant { beta: f64 },
    Linear { warmup_steps: u64 },
    Cyclical { cycles: u64, total_steps: u64, ramp_fraction: f64 },
}

impl AnnealSchedule {
    pub fn constant(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config(format!("constant beta {beta} outside [0, 1]")));
        }
        Ok(Self::Constant { beta })
    }

    pub fn linear(warmup_steps: u64) -> Result<Self> {
        if warmup_steps == 0 {
            return Err(Error::config("linear warmup needs at least one step"));
        }
        Ok(Self::Linear { warmup_steps })
    }

    pub fn cyclical(cycles: u64, total_steps: u64, ramp_fraction: f64) -> Result<Self> {
        if cycles == 0 || total_steps == 0 {
            return Err(Error::config("cyclical schedule needs cycles >= 1 and total_steps >= 1"));
        }
        if !(ramp_fraction > 0.0 && ramp_fraction <= 1.0) {
            return Err(Error::config(format!("ramp fraction {ramp_fraction} outside (0, 1]")));
        }
        Ok(Self::Cyclical {
            cycles,
            total_steps,
            ramp_fraction,
        })
    }

    /// Length of one cycle, `⌈total_steps / cycles⌉`; `None` for other kinds.
    pub fn period(&self) -> Option<u64> {
        match *self {
            Self::Cyclical { cycles, total_steps, .. } => Some(total_steps.div_ceil(cycles)),
            _ => None,
        }
    }

    pub fn beta_at(&self, step: u64) -> f64 {
        match *self {
            Self::Constant { beta } => beta,
            Self::Linear { warmup_steps } => (step as f64 / warmup_steps as f64).min(1.0),
            Self::Cyclical { ramp_fraction, .. } => {
                let period = self.period().unwrap_or(1);
                let tau = (step % period) as f64 / period as f64;
                (tau / ramp_fraction).min(1.0)
            }
        }
    }
}

/// Annealing kind as named in configuration (`anneal = none|linear|cyclical`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealKind {
    None,
    Linear,
    Cyclical,
}

impl FromStr for AnnealKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "linear" => Ok(Self::Linear),
            "cyclical" => Ok(Self::Cyclical),
            other => Err(Error::config(format!("unknown anneal kind {other:?}"))),
        }
    }
}

/// Epoch-denominated schedule settings, resolved to steps once the number
/// of batches per epoch is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    pub kind: AnnealKind,
    pub warmup_epochs: f64,
    pub cycles: u64,
    pub ramp_fraction: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            kind: AnnealKind::Linear,
            warmup_epochs: 10.0,
            cycles: 4,
            ramp_fraction: 0.5,
        }
    }
}

impl AnnealConfig {
    pub fn resolve(&self, steps_per_epoch: u64, max_epochs: u64) -> Result<AnnealSchedule> {
        match self.kind {
            AnnealKind::None => AnnealSchedule::constant(1.0),
            AnnealKind::Linear => {
                let steps = (self.warmup_epochs * steps_per_epoch as f64).round() as u64;
                AnnealSchedule::linear(steps.max(1))
            }
            AnnealKind::Cyclical => {
                let total = (steps_per_epoch * max_epochs).max(1);
                AnnealSchedule::cyclical(self.cycles, total, self.ramp_fraction)
            }
        }
    }
}
