//! Client-side head adaptation: adaptation gap, the mixing coefficient
//! search, and Gaussian-guided synthetic embeddings.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::prototypes::GaussianClassStats;
use crate::split::Example;
use crate::tensor::{kl_divergence, log_softmax, softmax_temperature, Linear, Mlp};

/// Round at which the client last adapted an aggregated head; `-1` if never.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationState {
    pub t_last: i64,
}

impl Default for AdaptationState {
    fn default() -> Self {
        Self { t_last: -1 }
    }
}

pub fn adaptation_gap(round: u64, state: &AdaptationState) -> Result<u64> {
    let t = round as i64;
    if t < state.t_last {
        return Err(Error::contract(format!(
            "round {round} precedes last adaptation at {}",
            state.t_last
        )));
    }
    Ok((t - state.t_last) as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Local,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedEntry {
    pub z: Vec<f64>,
    pub label: usize,
    pub origin: Origin,
}

impl Example for MixedEntry {
    fn features(&self) -> &[f64] {
        &self.z
    }
    fn label(&self) -> usize {
        self.label
    }
}

/// Local embeddings plus synthetic ones, in that order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MixedDataset {
    pub entries: Vec<MixedEntry>,
}

impl MixedDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.entries.iter().filter(|e| e.origin == origin).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub client_id: usize,
    pub alpha: f64,
    pub delta: u64,
    pub round: u64,
}

/// `gamma_{i,l} = clip(1 - q_{i,l}, 0, 1)` for every class. With `normalize`,
/// the scales are divided by their mean over `available` classes.
pub fn variance_scales(proportions: &[f64], available: &[usize], normalize: bool) -> Vec<f64> {
    let mut gamma: Vec<f64> = proportions.iter().map(|q| (1.0 - q).clamp(0.0, 1.0)).collect();
    if normalize {
        normalize_scales(&mut gamma, available);
    }
    gamma
}

/// Rescales so the mean over `available` classes is 1; all-zero scales are left alone.
pub fn normalize_scales(gamma: &mut [f64], available: &[usize]) {
    let in_range: Vec<usize> = available.iter().copied().filter(|&l| l < gamma.len()).collect();
    if in_range.is_empty() {
        return;
    }
    let mean = in_range.iter().map(|&l| gamma[l]).sum::<f64>() / in_range.len() as f64;
    if mean > 0.0 {
        for g in gamma.iter_mut() {
            *g /= mean;
        }
    }
}

pub fn variance_scale(proportions: &[f64], class: usize, normalize: bool, available: &[usize]) -> f64 {
    variance_scales(proportions, available, normalize)
        .get(class)
        .copied()
        .unwrap_or(1.0)
}

/// `N_g = ceil(r / (1 - r) * N_l)`.
pub fn synthetic_count(r: f64, n_local: usize) -> Result<usize> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::param("r", format!("must lie in (0, 1), got {r}")));
    }
    let exact = r * n_local as f64 / (1.0 - r);
    // shave the last few ulps so that e.g. 0.25/0.75*9 lands on 3, not 4
    Ok((exact * (1.0 - 1e-12)).ceil() as usize)
}

/// `(1 - eps) * q + eps * uniform(available)`.
pub fn synthetic_label_distribution(proportions: &[f64], available: &[usize], smoothing: f64) -> Vec<f64> {
    let mut dist: Vec<f64> = proportions.iter().map(|q| (1.0 - smoothing) * q).collect();
    let in_range: Vec<usize> = available.iter().copied().filter(|&l| l < dist.len()).collect();
    if smoothing > 0.0 && !in_range.is_empty() {
        let share = smoothing / in_range.len() as f64;
        for l in in_range {
            dist[l] += share;
        }
    }
    dist
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyntheticDraw {
    pub samples: Vec<(Vec<f64>, usize)>,
    /// Label draws that hit a class without statistics and were redrawn.
    pub skipped: usize,
}

/// Draws `N_g` synthetic embeddings: labels i.i.d. from `label_dist`, then
/// `z ~ N(mu_l, gamma_l^2 * diag(sigma_l))`.
pub fn sample_global_embeddings<R: Rng + ?Sized>(
    stats: &BTreeMap<usize, GaussianClassStats>,
    label_dist: &[f64],
    gamma: &[f64],
    n_local: usize,
    r: f64,
    rng: &mut R,
) -> Result<SyntheticDraw> {
    let n_g = synthetic_count(r, n_local)?;
    let mut draw = SyntheticDraw::default();
    if n_g == 0 {
        return Ok(draw);
    }
    let reachable: f64 = label_dist
        .iter()
        .enumerate()
        .filter(|(l, _)| stats.contains_key(l))
        .map(|(_, w)| *w)
        .sum();
    if !(reachable > 0.0) {
        log::warn!("no sampled class has Gaussian statistics; drawing no synthetic embeddings");
        return Ok(draw);
    }
    let labels = WeightedIndex::new(label_dist.iter().map(|w| w.max(0.0)))
        .map_err(|e| Error::param("label_dist", e.to_string()))?;
    draw.samples.reserve(n_g);
    while draw.samples.len() < n_g {
        let l = labels.sample(rng);
        let Some(g) = stats.get(&l) else {
            draw.skipped += 1;
            continue;
        };
        let scale = gamma.get(l).copied().unwrap_or(1.0);
        let z = g
            .mu
            .iter()
            .zip(&g.sigma_diag)
            .map(|(&m, &var)| {
                let noise: f64 = rng.sample(StandardNormal);
                m + scale * var.sqrt() * noise
            })
            .collect();
        draw.samples.push((z, l));
    }
    if draw.skipped > 0 {
        log::warn!("redrew {} synthetic labels that had no statistics", draw.skipped);
    }
    Ok(draw)
}

/// Embeds every local train sample with the frozen `theta` and appends the
/// synthetic embeddings.
pub fn build_mixed_dataset(theta: &Mlp, train: &[Sample], synthetic: Vec<(Vec<f64>, usize)>) -> Result<MixedDataset> {
    let mut entries = Vec::with_capacity(train.len() + synthetic.len());
    for s in train {
        entries.push(MixedEntry {
            z: theta.predict(&s.features)?,
            label: s.label,
            origin: Origin::Local,
        });
    }
    for (z, label) in synthetic {
        if z.len() != theta.output_dim() {
            return Err(Error::shape("synthetic embedding width does not match theta"));
        }
        entries.push(MixedEntry { z, label, origin: Origin::Synthetic });
    }
    Ok(MixedDataset { entries })
}

/// Precomputed quantities of the mixing objective
/// `J(a) = mean CE(a*g_local + (1-a)*g_global, y) + beta * delta * a^2 * mean KL`.
#[derive(Debug, Clone)]
pub struct AlphaObjective {
    local: Vec<Vec<f64>>,
    global: Vec<Vec<f64>>,
    labels: Vec<usize>,
    mean_kl: f64,
    penalty: f64,
}

impl AlphaObjective {
    pub fn new(
        phi_local: &Linear,
        phi_global: &Linear,
        mixed: &MixedDataset,
        delta: u64,
        beta: f64,
        temperature: f64,
    ) -> Result<Self> {
        if mixed.is_empty() {
            return Err(Error::contract("alpha search over an empty mixed dataset"));
        }
        if phi_local.out_dim() != phi_global.out_dim() || phi_local.in_dim() != phi_global.in_dim() {
            return Err(Error::shape("local and aggregated heads differ in shape"));
        }
        let mut local = Vec::with_capacity(mixed.len());
        let mut global = Vec::with_capacity(mixed.len());
        let mut labels = Vec::with_capacity(mixed.len());
        let mut kl_sum = 0.0;
        for e in &mixed.entries {
            let l = phi_local.forward(&e.z)?;
            let g = phi_global.forward(&e.z)?;
            if e.label >= l.len() {
                return Err(Error::Index { index: e.label, len: l.len() });
            }
            let p_local = softmax_temperature(&l, temperature)?;
            let p_global = softmax_temperature(&g, temperature)?;
            kl_sum += kl_divergence(&p_local, &p_global)?;
            local.push(l);
            global.push(g);
            labels.push(e.label);
        }
        Ok(Self {
            mean_kl: kl_sum / mixed.len() as f64,
            penalty: beta * delta as f64,
            local,
            global,
            labels,
        })
    }

    pub fn mean_kl(&self) -> f64 {
        self.mean_kl
    }

    pub fn value(&self, alpha: f64) -> f64 {
        let mut ce = 0.0;
        let mut mixed = vec![0.0; self.local.first().map_or(0, Vec::len)];
        for ((l, g), &y) in self.local.iter().zip(&self.global).zip(&self.labels) {
            for ((m, a), b) in mixed.iter_mut().zip(l).zip(g) {
                *m = alpha * a + (1.0 - alpha) * b;
            }
            // mixed is nonempty, so log_softmax cannot fail
            ce -= log_softmax(&mixed).map(|ls| ls[y]).unwrap_or(f64::NAN);
        }
        ce / self.labels.len() as f64 + self.penalty * alpha * alpha * self.mean_kl
    }
}

pub const ALPHA_GRID_POINTS: usize = 101;

/// Grid argmin of the mixing objective over `{0, 0.01, ..., 1}`; ties go to
/// the larger alpha.
pub fn optimize_alpha(
    phi_local: &Linear,
    phi_global: &Linear,
    mixed: &MixedDataset,
    delta: u64,
    beta: f64,
    temperature: f64,
) -> Result<f64> {
    let objective = AlphaObjective::new(phi_local, phi_global, mixed, delta, beta, temperature)?;
    let steps = ALPHA_GRID_POINTS - 1;
    let mut best_alpha = 1.0;
    let mut best = objective.value(1.0);
    for k in (0..steps).rev() {
        let alpha = k as f64 / steps as f64;
        let v = objective.value(alpha);
        if v < best {
            best = v;
            best_alpha = alpha;
        }
    }
    Ok(best_alpha)
}
