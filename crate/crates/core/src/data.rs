//! Synthetic data, non-IID partitioning, and per-client shards.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::split::Example;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example for Sample {
    fn features(&self) -> &[f64] {
        &self.features
    }
    fn label(&self) -> usize {
        self.label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    num_classes: usize,
    feature_dim: usize,
    samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(num_classes: usize, feature_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.label >= num_classes {
                return Err(Error::Index { index: s.label, len: num_classes });
            }
            if s.features.len() != feature_dim {
                return Err(Error::shape(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
        }
        Ok(Self { num_classes, feature_dim, samples })
    }

    pub fn empty(num_classes: usize, feature_dim: usize) -> Self {
        Self { num_classes, feature_dim, samples: Vec::new() }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        by_class
    }

    fn subset(&self, indices: &[usize]) -> Self {
        Self {
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// One client's data, split 75/25 into train and test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Per-class train counts `D_{i,l}`.
    pub counts: Vec<usize>,
    /// Train size `D_i`.
    pub total: usize,
    /// `q_{i,l} = D_{i,l} / D_i`; all zero when the shard has no train data.
    pub proportions: Vec<f64>,
}

impl ClientShard {
    pub fn new(client_id: usize, train: LabeledDataset, test: LabeledDataset) -> Self {
        let counts = train.class_counts();
        let total = train.len();
        let proportions = counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect();
        Self { client_id, train, test, counts, total, proportions }
    }

    pub fn missing_classes(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&l| self.counts[l] == 0).collect()
    }
}

/// Parameters of the synthetic Gaussian-mixture task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub class_separation: f64,
}

/// Class means: `separation * e_c` on distinct axes when `|L| <= dim`,
/// otherwise `separation * u_c` for random unit vectors `u_c`.
pub fn class_means(num_classes: usize, feature_dim: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    if num_classes <= feature_dim {
        return (0..num_classes)
            .map(|c| {
                let mut m = vec![0.0; feature_dim];
                m[c] = separation;
                m
            })
            .collect();
    }
    let mut rng = rng::stream(seed, Stream::Dataset, u64::MAX, 0);
    (0..num_classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut v {
                *x *= separation / norm;
            }
            v
        })
        .collect()
}

/// Draws `samples_per_class` points per class from `N(mean_c, I)`.
/// `draw` distinguishes independent datasets sharing the same means.
pub fn generate_gaussian_mixture_draw(spec: &MixtureSpec, seed: u64, draw: u64) -> Result<LabeledDataset> {
    if spec.feature_dim < 1 {
        return Err(Error::param("feature_dim", "must be at least 1"));
    }
    if spec.num_classes < 1 {
        return Err(Error::param("num_classes", "must be at least 1"));
    }
    if spec.samples_per_class < 1 {
        return Err(Error::param("samples_per_class", "must be at least 1"));
    }
    if !(spec.class_separation >= 0.0) || !spec.class_separation.is_finite() {
        return Err(Error::param("class_separation", "must be finite and nonnegative"));
    }
    let means = class_means(spec.num_classes, spec.feature_dim, spec.class_separation, seed);
    let mut rng = rng::stream(seed, Stream::Dataset, draw, 0);
    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let features = mean
                .iter()
                .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample { features, label });
        }
    }
    LabeledDataset::new(spec.num_classes, spec.feature_dim, samples)
}

pub fn generate_gaussian_mixture(
    num_classes: usize,
    feature_dim: usize,
    samples_per_class: usize,
    class_separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let spec = MixtureSpec { num_classes, feature_dim, samples_per_class, class_separation };
    generate_gaussian_mixture_draw(&spec, seed, 0)
}

const TEST_FRACTION: f64 = 0.25;
const MIN_STRATIFY: usize = 4;
const DIRICHLET_REDRAWS: usize = 10;

/// Per-client stratified 75/25 split; classes with fewer than four samples stay in train.
fn split_train_test(dataset: &LabeledDataset, client_id: usize, indices: &[usize], seed: u64) -> ClientShard {
    let mut rng = rng::stream(seed, Stream::TrainTestSplit, client_id as u64, 0);
    let mut by_class = vec![Vec::new(); dataset.num_classes];
    for &i in indices {
        by_class[dataset.samples[i].label].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut members in by_class {
        members.shuffle(&mut rng);
        let n_test = if members.len() >= MIN_STRATIFY {
            (members.len() as f64 * TEST_FRACTION).round() as usize
        } else {
            0
        };
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    ClientShard::new(client_id, dataset.subset(&train), dataset.subset(&test))
}

fn check_partition_input(dataset: &LabeledDataset, clients: usize) -> Result<Vec<Vec<usize>>> {
    if clients < 1 {
        return Err(Error::param("clients", "need at least one client"));
    }
    let by_class = dataset.indices_by_class();
    if let Some(l) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::param("dataset", format!("class {l} has no samples")));
    }
    Ok(by_class)
}

/// Per-class Dirichlet(beta * 1_K) allocation of samples to clients.
pub fn dirichlet_partition(dataset: &LabeledDataset, clients: usize, beta: f64, seed: u64) -> Result<Vec<ClientShard>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::param("beta_dir", format!("must be positive, got {beta}")));
    }
    let by_class = check_partition_input(dataset, clients)?;
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::param("beta_dir", e.to_string()))?;
    let mut assignment = Vec::new();
    for attempt in 0..=DIRICHLET_REDRAWS {
        let mut rng = rng::stream(seed, Stream::Partition, attempt as u64, 0);
        assignment = vec![Vec::new(); clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let weights = dirichlet_draw(&gamma, clients, &mut rng);
            let n = members.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (k, w) in weights.iter().enumerate() {
                cum += w;
                let end = if k + 1 == clients {
                    n
                } else {
                    ((cum * n as f64).round() as usize).clamp(start, n)
                };
                assignment[k].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if assignment.iter().all(|a| !a.is_empty()) {
            break;
        }
        if attempt == DIRICHLET_REDRAWS {
            let empty = assignment.iter().filter(|a| a.is_empty()).count();
            log::warn!("dirichlet partition left {empty} client(s) without samples after {DIRICHLET_REDRAWS} redraws");
        }
    }
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(k, idx)| split_train_test(dataset, k, idx, seed))
        .collect())
}

fn dirichlet_draw<R: Rng + ?Sized>(gamma: &Gamma<f64>, k: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Every client gets exactly `classes_per_client` classes; each class is split
/// evenly among the clients that hold it.
pub fn pathological_partition(
    dataset: &LabeledDataset,
    clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    let by_class = check_partition_input(dataset, clients)?;
    let num_classes = dataset.num_classes;
    if classes_per_client < 1 || classes_per_client > num_classes {
        return Err(Error::param(
            "classes_per_client",
            format!("must lie in 1..={num_classes}, got {classes_per_client}"),
        ));
    }
    if classes_per_client * clients < num_classes {
        return Err(Error::param(
            "classes_per_client",
            format!("{clients} clients x {classes_per_client} classes cannot cover {num_classes} classes"),
        ));
    }
    let mut rng = rng::stream(seed, Stream::Partition, 0, 1);
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut rng);
    let mut holders = vec![Vec::new(); num_classes];
    for k in 0..clients {
        for j in 0..classes_per_client {
            holders[order[(k * classes_per_client + j) % num_classes]].push(k);
        }
    }
    for (l, h) in holders.iter().enumerate() {
        if h.len() > by_class[l].len() {
            return Err(Error::param(
                "classes_per_client",
                format!("class {l} has {} samples for {} clients", by_class[l].len(), h.len()),
            ));
        }
    }
    let mut assignment = vec![Vec::new(); clients];
    for (l, h) in holders.iter().enumerate() {
        let mut members = by_class[l].clone();
        members.shuffle(&mut rng);
        let n = members.len();
        let m = h.len();
        for (j, &k) in h.iter().enumerate() {
            assignment[k].extend_from_slice(&members[j * n / m..(j + 1) * n / m]);
        }
    }
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(k, idx)| split_train_test(dataset, k, idx, seed))
        .collect())
}

/// Text dump: one `client_id,split,label,f1,...,fd` record per line.
pub fn dump_shards(shards: &[ClientShard]) -> String {
    let mut out = String::new();
    for shard in shards {
        for (split, data) in [("train", &shard.train), ("test", &shard.test)] {
            for s in data.samples() {
                let _ = write!(out, "{},{},{}", shard.client_id, split, s.label);
                for v in &s.features {
                    let _ = write!(out, ",{v:?}");
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Inverse of [`dump_shards`]; client ids must be dense `0..K`.
pub fn load_shards(text: &str, num_classes: usize) -> Result<Vec<ClientShard>> {
    let mut train: Vec<Vec<Sample>> = Vec::new();
    let mut test: Vec<Vec<Sample>> = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let bad = |what: &str| Error::parse(format!("line {}: {what}", lineno + 1));
        let client: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| bad("bad client id"))?;
        if client > 1 << 20 {
            return Err(bad("client id too large"));
        }
        let split = fields.next().map(str::trim).ok_or_else(|| bad("missing split"))?;
        let label: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| bad("bad label"))?;
        if label >= num_classes {
            return Err(bad("label out of range"));
        }
        let features = fields
            .map(|f| f.trim().parse::<f64>().map_err(|_| bad("bad feature")))
            .collect::<Result<Vec<f64>>>()?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature"));
        }
        match dim {
            None => dim = Some(features.len()),
            Some(d) if d != features.len() => return Err(bad("feature count differs from earlier records")),
            _ => {}
        }
        if train.len() <= client {
            train.resize_with(client + 1, Vec::new);
            test.resize_with(client + 1, Vec::new);
        }
        let target = match split {
            "train" => &mut train[client],
            "test" => &mut test[client],
            _ => return Err(bad("split must be train or test")),
        };
        target.push(Sample { features, label });
    }
    let dim = dim.unwrap_or(0);
    train
        .into_iter()
        .zip(test)
        .enumerate()
        .map(|(k, (tr, te))| {
            Ok(ClientShard::new(
                k,
                LabeledDataset::new(num_classes, dim, tr)?,
                LabeledDataset::new(num_classes, dim, te)?,
            ))
        })
        .collect()
}
