//! Experiment configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{HeadWeighting, ProtocolConfig};
use crate::split::TrainConfig;
use crate::strategy::StrategySpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub separation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum PartitionConfig {
    Dirichlet { beta: f64 },
    Pathological { classes_per_client: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths of the representation network.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalizationConfig {
    pub synthetic_ratio: f64,
    pub normalize_gamma: bool,
    pub synthetic_label_smoothing: f64,
    pub head_weighting: HeadWeighting,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub tau0: u32,
    pub tau_min: u32,
    pub tau_max: u32,
}

/// A built-in strategy name or a fully spelled-out spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrategyChoice {
    Named(String),
    Custom(StrategySpec),
}

impl StrategyChoice {
    pub fn resolve(&self) -> Result<StrategySpec> {
        match self {
            StrategyChoice::Named(n) => StrategySpec::by_name(n).ok_or_else(|| Error::Config {
                field: "strategy".into(),
                reason: format!("unknown strategy `{n}`, expected one of {:?}", StrategySpec::NAMES),
            }),
            StrategyChoice::Custom(s) => Ok(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub rounds: u64,
    pub clients: usize,
    pub participation: f64,
    pub strategy: StrategyChoice,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many rounds; 0 disables checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default)]
    pub record_wall_time: bool,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub personalization: PersonalizationConfig,
    pub schedule: ScheduleConfig,
}

fn default_true() -> bool {
    true
}

impl Default for ExperimentConfig {
    /// Full-scale defaults: 20 clients, 200 rounds.
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seeds: vec![0, 1, 2],
            rounds: 200,
            clients: 20,
            participation: 1.0,
            strategy: StrategyChoice::Named("pgfedsplit".into()),
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            parallel: true,
            record_wall_time: false,
            dataset: DatasetConfig {
                classes: 10,
                feature_dim: 32,
                samples_per_class: 200,
                separation: 3.0,
            },
            partition: PartitionConfig::Dirichlet { beta: 0.1 },
            model: ModelConfig {
                hidden: vec![128],
                embedding_dim: 64,
            },
            train: TrainConfig::default(),
            personalization: PersonalizationConfig {
                synthetic_ratio: 0.5,
                normalize_gamma: false,
                synthetic_label_smoothing: 0.0,
                head_weighting: HeadWeighting::DataSize,
            },
            schedule: ScheduleConfig {
                tau0: 5,
                tau_min: 1,
                tau_max: 50,
            },
        }
    }
}

fn field_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Re-labels a parameter error from a sub-validator with its config path.
fn scoped(section: &str, e: Error) -> Error {
    match e {
        Error::Parameter { name, reason } => field_err(&format!("{section}.{name}"), reason),
        Error::Config { .. } => e,
        other => field_err(section, other.to_string()),
    }
}

impl ExperimentConfig {
    /// Ten clients, fifty rounds: small enough for continuous integration.
    ///
    /// The prototype weight is scaled down to match the small MLP's
    /// embedding norms; at `lambda = 5` the penalty dominates the
    /// cross-entropy and representation learning stalls within 50 rounds.
    pub fn desk() -> Self {
        let mut cfg = Self {
            rounds: 50,
            clients: 10,
            ..Self::default()
        };
        cfg.train.lambda = 0.01;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let missing = msg
                .strip_prefix("missing field `")
                .and_then(|m| m.split('`').next())
                .map(String::from);
            let field = missing
                .or_else(|| e.span().map(|s| locate_key(text, s.start)))
                .unwrap_or_else(|| "<document>".into());
            field_err(&field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(field_err(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        if self.seeds.is_empty() {
            return Err(field_err("seeds", "need at least one seed"));
        }
        if self.clients == 0 {
            return Err(field_err("clients", "need at least one client"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(field_err("participation", "must lie in (0, 1]"));
        }
        let d = &self.dataset;
        if d.classes < 2 {
            return Err(field_err("dataset.classes", "need at least two classes"));
        }
        if d.feature_dim == 0 {
            return Err(field_err("dataset.feature_dim", "must be at least 1"));
        }
        if d.samples_per_class == 0 {
            return Err(field_err("dataset.samples_per_class", "must be at least 1"));
        }
        if !(d.separation >= 0.0 && d.separation.is_finite()) {
            return Err(field_err("dataset.separation", "must be finite and nonnegative"));
        }
        match self.partition {
            PartitionConfig::Dirichlet { beta } => {
                if !(beta > 0.0 && beta.is_finite()) {
                    return Err(field_err("partition.beta", "must be positive"));
                }
            }
            PartitionConfig::Pathological { classes_per_client: n } => {
                if n == 0 || n > d.classes {
                    return Err(field_err(
                        "partition.classes_per_client",
                        format!("must lie in 1..={}", d.classes),
                    ));
                }
                if n * self.clients < d.classes {
                    return Err(field_err(
                        "partition.classes_per_client",
                        "clients cannot cover every class",
                    ));
                }
            }
        }
        if self.model.embedding_dim == 0 {
            return Err(field_err("model.embedding_dim", "must be at least 1"));
        }
        if let Some(i) = self.model.hidden.iter().position(|&w| w == 0) {
            return Err(field_err(&format!("model.hidden[{i}]"), "width must be at least 1"));
        }
        self.train.validate().map_err(|e| scoped("train", e))?;
        let s = &self.schedule;
        if !(s.tau_min >= 1 && s.tau_min <= s.tau0 && s.tau0 <= s.tau_max) {
            return Err(field_err("schedule.tau0", "need 1 <= tau_min <= tau0 <= tau_max"));
        }
        let spec = self.strategy.resolve()?;
        let proto = self.protocol(&spec, self.seeds[0]);
        proto.validate().map_err(|e| match e {
            Error::Parameter { name, reason } => {
                let section = match name {
                    "synthetic_ratio" | "synthetic_label_smoothing" => "personalization",
                    "participation" => return field_err(name, reason),
                    _ => "strategy",
                };
                field_err(&format!("{section}.{name}"), reason)
            }
            other => scoped("strategy", other),
        })
    }

    /// Protocol settings for one seeded run of `spec`.
    pub fn protocol(&self, spec: &StrategySpec, seed: u64) -> ProtocolConfig {
        let p = &self.personalization;
        ProtocolConfig {
            train: self.train.clone(),
            synthetic_ratio: p.synthetic_ratio,
            normalize_gamma: p.normalize_gamma,
            synthetic_label_smoothing: p.synthetic_label_smoothing,
            head_weighting: p.head_weighting,
            participation: self.participation,
            tau0: self.schedule.tau0,
            tau_min: self.schedule.tau_min,
            tau_max: self.schedule.tau_max,
            parallel: self.parallel,
            record_wall_time: self.record_wall_time,
            master_seed: seed,
            strategy: spec.clone(),
        }
    }
}

/// Dotted path of the innermost key whose value starts before `offset`.
fn locate_key(text: &str, offset: usize) -> String {
    let mut section = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        if pos > offset {
            break;
        }
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
            section = h.trim_matches(['[', ']']).trim().to_string();
            key.clear();
        } else if let Some((k, _)) = t.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len();
    }
    match (section.is_empty(), key.is_empty()) {
        (true, true) => "<document>".into(),
        (true, false) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}
