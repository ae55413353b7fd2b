//! Server-side head synchronization schedule.
//!
//! The counter `s` counts rounds since the last head aggregation. When it
//! reaches `tau` the heads are aggregated and the result is held back until
//! the next round's broadcast. In adaptive mode, every round that delivered a
//! head moves `tau` by at most one step based on the change in mean alpha.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::personalization::AlphaRecord;
use crate::tensor::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "interval")]
pub enum HeadSync {
    Never,
    EveryRound,
    FixedInterval(u32),
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApaState {
    pub sync: HeadSync,
    pub tau: u32,
    pub s: u32,
    pub alpha_prev: f64,
    pub tau_min: u32,
    pub tau_max: u32,
    #[serde(skip)]
    pub tmp_head: Option<Linear>,
}

/// What the schedule did at the end of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundOutcome {
    pub interval_updated: bool,
    pub trigger: bool,
}

pub fn mean_alpha(records: &[AlphaRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("mean of an empty set of alpha records"));
    }
    Ok(records.iter().map(|r| r.alpha).sum::<f64>() / records.len() as f64)
}

impl ApaState {
    pub fn new(sync: HeadSync, tau0: u32, tau_min: u32, tau_max: u32) -> Result<Self> {
        if tau_min < 1 || tau_min > tau_max {
            return Err(Error::param(
                "tau_min",
                format!("need 1 <= tau_min <= tau_max, got [{tau_min}, {tau_max}]"),
            ));
        }
        let tau = match sync {
            HeadSync::EveryRound => 1,
            HeadSync::FixedInterval(k) if k < 1 => {
                return Err(Error::param("interval", "fixed interval must be at least 1"))
            }
            HeadSync::FixedInterval(k) => k,
            HeadSync::Adaptive if !(tau_min..=tau_max).contains(&tau0) => {
                return Err(Error::param(
                    "tau0",
                    format!("initial interval {tau0} outside [{tau_min}, {tau_max}]"),
                ))
            }
            HeadSync::Adaptive | HeadSync::Never => tau0,
        };
        Ok(Self {
            sync,
            tau,
            s: 0,
            alpha_prev: 0.0,
            tau_min,
            tau_max,
            tmp_head: None,
        })
    }

    /// Step `tau` toward shorter intervals when mean alpha rose, longer when it
    /// fell, then clip. Exact float comparison.
    pub fn update_interval(&mut self, alpha_mean: f64) -> u32 {
        let mut tau = i64::from(self.tau);
        if alpha_mean > self.alpha_prev {
            tau -= 1;
        } else if alpha_mean < self.alpha_prev {
            tau += 1;
        }
        self.tau = tau.clamp(i64::from(self.tau_min), i64::from(self.tau_max)) as u32;
        self.alpha_prev = alpha_mean;
        self.tau
    }

    /// Advance the counter; `true` (and reset) once it reaches `tau`.
    pub fn tick_and_maybe_trigger(&mut self) -> bool {
        if self.sync == HeadSync::Never {
            return false;
        }
        self.s += 1;
        if self.s >= self.tau {
            self.s = 0;
            true
        } else {
            false
        }
    }

    pub fn stash(&mut self, head: Linear) -> Result<()> {
        if self.tmp_head.is_some() {
            return Err(Error::contract("a stashed head was never released"));
        }
        self.tmp_head = Some(head);
        Ok(())
    }

    /// Hands the stashed head (if any) to this round's broadcast and clears it.
    pub fn release_for_broadcast(&mut self) -> Option<Linear> {
        self.tmp_head.take()
    }

    /// End-of-round bookkeeping. The interval only moves in adaptive mode, in
    /// rounds that delivered a head, and when at least one alpha came back.
    pub fn end_of_round(&mut self, head_delivered: bool, alpha_mean: Option<f64>) -> RoundOutcome {
        let mut interval_updated = false;
        if head_delivered && self.sync == HeadSync::Adaptive {
            if let Some(mean) = alpha_mean {
                self.update_interval(mean);
                interval_updated = true;
            }
        }
        let trigger = self.tick_and_maybe_trigger();
        RoundOutcome { interval_updated, trigger }
    }
}
