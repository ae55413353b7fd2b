#![allow(dead_code)]

use std::collections::BTreeMap;

use pgfedsplit::data::Sample;
use pgfedsplit::split::{representation_loss_and_grad, RepresentationLoss};
use pgfedsplit::tensor::{Activation, Linear, Mlp, Parameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_samples(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample {
            features: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            label: rng.random_range(0..classes),
        })
        .collect()
}

/// Central finite differences of `loss` with respect to every entry of `params`.
pub fn numeric_gradient<P: Parameters>(params: &P, h: f64, loss: impl Fn(&P) -> f64) -> Vec<f64> {
    let mut work = params.clone();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (ti, &n) in sizes.iter().enumerate() {
        for k in 0..n {
            let orig = work.tensors()[ti].values()[k];
            work.tensors_mut()[ti].values_mut()[k] = orig + h;
            let up = loss(&work);
            work.tensors_mut()[ti].values_mut()[k] = orig - h;
            let down = loss(&work);
            work.tensors_mut()[ti].values_mut()[k] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

pub fn flatten<P: Parameters>(p: &P) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.values().to_vec()).collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub struct GradCase {
    pub theta: Mlp,
    pub phi: Linear,
    pub batch: Vec<Sample>,
    pub prototypes: BTreeMap<usize, Vec<f64>>,
    pub lambda: f64,
}

/// A random 3-layer representation, head, batch, and prototypes for a
/// random subset of classes.
pub fn random_grad_case(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let input = r.random_range(2..6);
    let hidden = r.random_range(3..8);
    let hidden2 = r.random_range(3..8);
    let emb = r.random_range(2..6);
    let classes = r.random_range(2..5);
    let mut theta = Mlp::random(&[input, hidden, hidden2, emb], Activation::Relu, &mut r).unwrap();
    // Zero-initialized biases put dead-layer pre-activations exactly on the ReLU kink.
    for layer in theta.layers_mut() {
        for b in layer.bias_mut().values_mut() {
            *b = r.random_range(-0.5..0.5);
        }
    }
    let phi = Linear::random(emb, classes, 3.0, &mut r);
    let n = r.random_range(1..6);
    let batch = random_samples(&mut r, n, input, classes);
    let mut prototypes = BTreeMap::new();
    for c in 0..classes {
        if r.random_bool(0.6) {
            prototypes.insert(c, (0..emb).map(|_| r.random_range(-1.0..1.0)).collect());
        }
    }
    GradCase {
        theta,
        phi,
        batch,
        prototypes,
        lambda: r.random_range(0.1..5.0),
    }
}

/// Max relative error of the representation-loss gradient against finite
/// differences with `h = 1e-5`.
pub fn representation_grad_error(case: &GradCase, weights: RepresentationLoss) -> f64 {
    let (_, grad) =
        representation_loss_and_grad(&case.theta, &case.phi, &case.batch, &case.prototypes, weights).unwrap();
    let numeric = numeric_gradient(&case.theta, 1e-5, |t| {
        representation_loss_and_grad(t, &case.phi, &case.batch, &case.prototypes, weights)
            .unwrap()
            .0
    });
    max_relative_error(&flatten(&grad), &numeric, 1e-6)
}

/// A small federation that runs a round in milliseconds.
pub fn tiny_cfg() -> pgfedsplit::config::ExperimentConfig {
    let mut cfg = pgfedsplit::config::ExperimentConfig::desk();
    cfg.seeds = vec![0];
    cfg.rounds = 6;
    cfg.clients = 4;
    cfg.dataset.samples_per_class = 30;
    cfg.dataset.feature_dim = 12;
    cfg.model.hidden = vec![16];
    cfg.model.embedding_dim = 8;
    cfg.train.local_epochs = 1;
    cfg.train.batch_size = 16;
    cfg.schedule.tau0 = 2;
    cfg
}
