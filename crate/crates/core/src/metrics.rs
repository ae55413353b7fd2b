//! Round records, JSONL/CSV output, and accuracy evaluation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::personalization::AlphaRecord;
use crate::split::SplitModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    /// 0 is the evaluation of the initial models; `t + 1` follows training round `t`.
    pub round: u64,
    pub participants: Vec<usize>,
    /// `None` for clients without test data.
    pub client_accuracy: Vec<Option<f64>>,
    pub mean_accuracy: f64,
    pub tau: u32,
    pub s: u32,
    /// The broadcast that opened training round `t` carried a head.
    pub head_delivered: bool,
    /// Heads were aggregated at the end of training round `t`; the accuracies
    /// on this line already include the delivered head.
    pub head_aggregated: bool,
    pub interval_updated: bool,
    pub alpha_mean: Option<f64>,
    pub alphas: Vec<AlphaRecord>,
    /// Model-parameter payload sizes, for communication audits.
    pub bytes_down: u64,
    pub bytes_up: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_client: Vec<Option<f64>>,
    pub mean: f64,
    /// Clients left out of the mean for lack of test data.
    pub excluded: Vec<usize>,
}

pub fn accuracy(model: &SplitModel, samples: &[Sample]) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for s in samples {
        if model.predict(&s.features)? == s.label {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / samples.len() as f64))
}

/// Unweighted mean of per-client accuracies over clients that have test data.
pub fn summarize(per_client: Vec<Option<f64>>) -> Evaluation {
    let scored: Vec<f64> = per_client.iter().flatten().copied().collect();
    let excluded = per_client
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_none())
        .map(|(i, _)| i)
        .collect();
    let mean = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Evaluation { per_client, mean, excluded }
}

/// Accuracy per label; `None` where the label has no test samples.
pub fn labelwise_accuracy(model: &SplitModel, samples: &[Sample], num_classes: usize) -> Result<Vec<Option<f64>>> {
    let mut hits = vec![0usize; num_classes];
    let mut seen = vec![0usize; num_classes];
    for s in samples {
        if s.label >= num_classes {
            return Err(Error::Index { index: s.label, len: num_classes });
        }
        seen[s.label] += 1;
        if model.predict(&s.features)? == s.label {
            hits[s.label] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&seen)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect())
}

pub fn to_jsonl(logs: &[RoundLog]) -> String {
    let mut out = String::new();
    for log in logs {
        // RoundLog holds only plain data, so serialization cannot fail
        out.push_str(&serde_json::to_string(log).expect("RoundLog serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<RoundLog>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::parse(format!("metrics line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub seed: u64,
    pub rounds: u64,
    pub final_mean_acc: f64,
    pub best_mean_acc: f64,
    pub final_tau: u32,
}

impl RunSummary {
    pub fn from_logs(strategy: &str, seed: u64, logs: &[RoundLog]) -> Self {
        let last = logs.last();
        Self {
            strategy: strategy.to_string(),
            seed,
            rounds: last.map_or(0, |l| l.round),
            final_mean_acc: last.map_or(0.0, |l| l.mean_accuracy),
            best_mean_acc: logs.iter().map(|l| l.mean_accuracy).fold(0.0, f64::max),
            final_tau: last.map_or(0, |l| l.tau),
        }
    }
}

pub const SUMMARY_HEADER: &str = "strategy,seed,rounds,final_mean_acc,best_mean_acc,final_tau";

pub fn summary_csv(rows: &[RunSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            r.strategy, r.seed, r.rounds, r.final_mean_acc, r.best_mean_acc, r.final_tau
        );
    }
    out
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const AGGREGATE_HEADER: &str =
    "strategy,num_seeds,final_mean_acc_mean,final_mean_acc_std,best_mean_acc_mean,best_mean_acc_std";

/// One row per strategy, in first-appearance order.
pub fn aggregate_csv(rows: &[RunSummary]) -> String {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.strategy.as_str()) {
            order.push(&r.strategy);
        }
    }
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for name in order {
        let group: Vec<&RunSummary> = rows.iter().filter(|r| r.strategy == name).collect();
        let finals: Vec<f64> = group.iter().map(|r| r.final_mean_acc).collect();
        let bests: Vec<f64> = group.iter().map(|r| r.best_mean_acc).collect();
        let (fm, fs) = mean_std(&finals);
        let (bm, bs) = mean_std(&bests);
        let _ = writeln!(out, "{name},{},{fm:.6},{fs:.6},{bm:.6},{bs:.6}", group.len());
    }
    out
}
