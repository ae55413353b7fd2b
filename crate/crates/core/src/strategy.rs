//! Strategy descriptors for the proposed method, its ablations, and the
//! reference baselines. All of them run through the same protocol code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::HeadSync;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Training {
    /// One gradient evaluation updates representation and head together.
    Joint,
    /// Head epochs on embeddings with the representation frozen, then
    /// representation epochs with the head frozen.
    Decoupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub name: String,
    pub head_sync: HeadSync,
    pub use_gaussian_synth: bool,
    pub use_prototype_reg: bool,
    pub share_head: bool,
    pub share_repr: bool,
    pub fixed_alpha: Option<f64>,
    pub finetune_epochs: Option<usize>,
    pub training: Training,
}

pub const FIXED_INTERVAL_ABLATION: u32 = 5;

impl StrategySpec {
    pub fn local() -> Self {
        Self {
            name: "local".into(),
            head_sync: HeadSync::Never,
            use_gaussian_synth: false,
            use_prototype_reg: false,
            share_head: false,
            share_repr: false,
            fixed_alpha: None,
            finetune_epochs: None,
            training: Training::Joint,
        }
    }

    pub fn fedavg() -> Self {
        Self {
            name: "fedavg".into(),
            head_sync: HeadSync::EveryRound,
            share_head: true,
            share_repr: true,
            fixed_alpha: Some(0.0),
            ..Self::local()
        }
    }

    pub fn fedavg_ft(epochs: usize) -> Self {
        Self {
            name: "fedavg_ft".into(),
            finetune_epochs: Some(epochs),
            ..Self::fedavg()
        }
    }

    pub fn fedper() -> Self {
        Self {
            name: "fedper".into(),
            share_repr: true,
            ..Self::local()
        }
    }

    pub fn fedrep() -> Self {
        Self {
            name: "fedrep".into(),
            training: Training::Decoupled,
            ..Self::fedper()
        }
    }

    pub fn pgfedsplit() -> Self {
        Self {
            name: "pgfedsplit".into(),
            head_sync: HeadSync::Adaptive,
            use_gaussian_synth: true,
            use_prototype_reg: true,
            share_head: true,
            share_repr: true,
            fixed_alpha: None,
            finetune_epochs: None,
            training: Training::Decoupled,
        }
    }

    /// Replaces the adaptive schedule with a fixed interval.
    pub fn without_apa(mut self, interval: u32) -> Self {
        self.head_sync = HeadSync::FixedInterval(interval);
        self.name = ablation_name(&self);
        self
    }

    /// Trains the head on local embeddings only.
    pub fn without_gaussian(mut self) -> Self {
        self.use_gaussian_synth = false;
        self.name = ablation_name(&self);
        self
    }

    pub fn with_fixed_alpha(mut self, alpha: f64, sync: HeadSync) -> Self {
        self.fixed_alpha = Some(alpha);
        self.head_sync = sync;
        self.name = format!("{}_alpha{alpha}", self.name);
        self
    }

    pub fn with_head_sync(mut self, sync: HeadSync) -> Self {
        self.head_sync = sync;
        if sync == HeadSync::Never {
            self.share_head = false;
        }
        self
    }

    /// Built-in strategies addressable by name.
    pub fn by_name(name: &str) -> Option<Self> {
        Some(match name {
            "local" => Self::local(),
            "fedavg" => Self::fedavg(),
            "fedavg_ft" => Self::fedavg_ft(25),
            "fedper" => Self::fedper(),
            "fedrep" => Self::fedrep(),
            "pgfedsplit" => Self::pgfedsplit(),
            "wo_apa" => Self::pgfedsplit().without_apa(FIXED_INTERVAL_ABLATION),
            "wo_gau" => Self::pgfedsplit().without_gaussian(),
            "wo_apa_gau" => Self::pgfedsplit()
                .without_apa(FIXED_INTERVAL_ABLATION)
                .without_gaussian(),
            _ => return None,
        })
    }

    pub const NAMES: [&'static str; 9] = [
        "local",
        "fedavg",
        "fedavg_ft",
        "fedper",
        "fedrep",
        "pgfedsplit",
        "wo_apa",
        "wo_gau",
        "wo_apa_gau",
    ];

    pub fn validate(&self) -> Result<()> {
        let syncs = self.head_sync != HeadSync::Never;
        if syncs != self.share_head {
            return Err(Error::param(
                "strategy",
                format!("`{}`: head sharing requires a head schedule and vice versa", self.name),
            ));
        }
        if let Some(a) = self.fixed_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::param("fixed_alpha", format!("must lie in [0, 1], got {a}")));
            }
            if !syncs {
                return Err(Error::param("fixed_alpha", "has no effect without head synchronization"));
            }
        }
        if (self.use_gaussian_synth || self.use_prototype_reg) && self.training != Training::Decoupled {
            return Err(Error::param(
                "strategy",
                format!("`{}`: prototype features need decoupled training", self.name),
            ));
        }
        if self.finetune_epochs == Some(0) {
            return Err(Error::param("finetune_epochs", "must be at least 1 when set"));
        }
        if let HeadSync::FixedInterval(0) = self.head_sync {
            return Err(Error::param("head_sync", "fixed interval must be at least 1"));
        }
        Ok(())
    }

    /// Whether clients upload class statistics at all.
    pub fn uses_class_stats(&self) -> bool {
        self.use_gaussian_synth || self.use_prototype_reg
    }
}

fn ablation_name(spec: &StrategySpec) -> String {
    let apa = matches!(spec.head_sync, HeadSync::Adaptive);
    match (apa, spec.use_gaussian_synth) {
        (true, true) => "pgfedsplit".into(),
        (false, true) => "wo_apa".into(),
        (true, false) => "wo_gau".into(),
        (false, false) => "wo_apa_gau".into(),
    }
}
