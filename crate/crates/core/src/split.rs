//! The representation/head split model and its decoupled training steps.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax, Activation, Linear, Mlp, Parameters};

/// A labeled vector: raw features or an embedding.
pub trait Example {
    fn features(&self) -> &[f64];
    fn label(&self) -> usize;
}

impl Example for (Vec<f64>, usize) {
    fn features(&self) -> &[f64] {
        &self.0
    }
    fn label(&self) -> usize {
        self.1
    }
}

impl Example for (&[f64], usize) {
    fn features(&self) -> &[f64] {
        self.0
    }
    fn label(&self) -> usize {
        self.1
    }
}

/// Lookup of global class prototypes; `None` means the class is not in P.
pub trait ClassPrototypes {
    fn prototype(&self, class: usize) -> Option<&[f64]>;
}

impl ClassPrototypes for BTreeMap<usize, Vec<f64>> {
    fn prototype(&self, class: usize) -> Option<&[f64]> {
        self.get(&class).map(Vec::as_slice)
    }
}

/// No prototypes at all.
pub struct NoPrototypes;

impl ClassPrototypes for NoPrototypes {
    fn prototype(&self, _class: usize) -> Option<&[f64]> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta_theta: f64,
    pub eta_phi: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub lambda: f64,
    pub t_kd: f64,
    pub beta_reg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta_theta: 0.005,
            eta_phi: 0.005,
            batch_size: 64,
            local_epochs: 5,
            lambda: 5.0,
            t_kd: 1.0,
            beta_reg: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eta_theta", self.eta_theta),
            ("eta_phi", self.eta_phi),
            ("lambda", self.lambda),
            ("t_kd", self.t_kd),
            ("beta_reg", self.beta_reg),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::param("local_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Weights of the two terms of the prototype-regularized representation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepresentationLoss {
    pub ce_weight: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    pub theta: Mlp,
    pub phi: Linear,
}

pub fn head_logits(phi: &Linear, z: &[f64]) -> Result<Vec<f64>> {
    phi.forward(z)
}

pub fn mix_heads(phi_local: &Linear, phi_global: &Linear, alpha: f64) -> Result<Linear> {
    check_alpha(alpha)?;
    phi_local.interpolate(phi_global, alpha)
}

pub fn mixed_logits(phi_local: &Linear, phi_global: &Linear, alpha: f64, z: &[f64]) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let local = phi_local.forward(z)?;
    let global = phi_global.forward(z)?;
    if local.len() != global.len() {
        return Err(Error::shape("heads emit different numbers of logits"));
    }
    Ok(local
        .iter()
        .zip(&global)
        .map(|(l, g)| alpha * l + (1.0 - alpha) * g)
        .collect())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::param("alpha", format!("must lie in [0, 1], got {alpha}")))
    }
}

/// Mean cross-entropy of a linear head over a batch of embeddings, and its gradient.
pub fn head_loss_and_grad<E: Example>(phi: &Linear, batch: &[E]) -> Result<(f64, Linear)> {
    if batch.is_empty() {
        return Err(Error::contract("head step on an empty batch"));
    }
    let mut grad = phi.zeroed();
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    let mut logits = vec![0.0; phi.out_dim()];
    for ex in batch {
        let z = ex.features();
        if z.len() != phi.in_dim() {
            return Err(Error::shape(format!(
                "embedding of length {} into head expecting {}",
                z.len(),
                phi.in_dim()
            )));
        }
        let y = ex.label();
        if y >= phi.out_dim() {
            return Err(Error::Index { index: y, len: phi.out_dim() });
        }
        phi.forward_into(z, &mut logits);
        let mut p = softmax(&logits)?;
        loss += -(p[y].max(f64::MIN_POSITIVE)).ln();
        p[y] -= 1.0;
        for v in &mut p {
            *v *= scale;
        }
        phi.backward_into(z, &p, &mut grad);
    }
    Ok((loss * scale, grad))
}

/// Mean over the batch of `ce_weight * CE + lambda * 1{y in P} * ||theta(x) - p_y||^2`,
/// with its gradient w.r.t. `theta` (the head is held fixed).
pub fn representation_loss_and_grad<E: Example, P: ClassPrototypes + ?Sized>(
    theta: &Mlp,
    phi: &Linear,
    batch: &[E],
    prototypes: &P,
    weights: RepresentationLoss,
) -> Result<(f64, Mlp)> {
    if batch.is_empty() {
        return Err(Error::contract("representation step on an empty batch"));
    }
    if theta.output_dim() != phi.in_dim() {
        return Err(Error::shape("embedding width does not match head input"));
    }
    let d = theta.output_dim();
    let scale = 1.0 / batch.len() as f64;
    let mut grads = theta.zeroed();
    let mut loss = 0.0;
    let mut logits = vec![0.0; phi.out_dim()];
    for ex in batch {
        let y = ex.label();
        if y >= phi.out_dim() {
            return Err(Error::Index { index: y, len: phi.out_dim() });
        }
        let (z, cache) = theta.forward(ex.features())?;
        let mut grad_z = vec![0.0; d];
        if weights.ce_weight != 0.0 {
            phi.forward_into(&z, &mut logits);
            let mut p = softmax(&logits)?;
            loss += weights.ce_weight * -(p[y].max(f64::MIN_POSITIVE)).ln();
            p[y] -= 1.0;
            let w = phi.weight().values();
            for (o, &g) in p.iter().enumerate() {
                let g = g * weights.ce_weight;
                for (gz, wv) in grad_z.iter_mut().zip(&w[o * d..(o + 1) * d]) {
                    *gz += g * wv;
                }
            }
        }
        if weights.lambda != 0.0 {
            if let Some(proto) = prototypes.prototype(y) {
                if proto.len() != d {
                    return Err(Error::shape(format!(
                        "prototype for class {y} has length {} but embeddings have {d}",
                        proto.len()
                    )));
                }
                for ((gz, zv), pv) in grad_z.iter_mut().zip(&z).zip(proto) {
                    let diff = zv - pv;
                    loss += weights.lambda * diff * diff;
                    *gz += 2.0 * weights.lambda * diff;
                }
            }
        }
        for g in &mut grad_z {
            *g *= scale;
        }
        theta.backward_accumulate(&cache, &grad_z, &mut grads)?;
    }
    Ok((loss * scale, grads))
}

/// Mean cross-entropy of the full model and gradients for both parts.
pub fn joint_loss_and_grad<E: Example>(model: &SplitModel, batch: &[E]) -> Result<(f64, Mlp, Linear)> {
    if batch.is_empty() {
        return Err(Error::contract("joint step on an empty batch"));
    }
    let d = model.theta.output_dim();
    let scale = 1.0 / batch.len() as f64;
    let mut g_theta = model.theta.zeroed();
    let mut g_phi = model.phi.zeroed();
    let mut loss = 0.0;
    let mut logits = vec![0.0; model.phi.out_dim()];
    for ex in batch {
        let y = ex.label();
        if y >= model.phi.out_dim() {
            return Err(Error::Index { index: y, len: model.phi.out_dim() });
        }
        let (z, cache) = model.theta.forward(ex.features())?;
        model.phi.forward_into(&z, &mut logits);
        let mut p = softmax(&logits)?;
        loss += -(p[y].max(f64::MIN_POSITIVE)).ln();
        p[y] -= 1.0;
        for v in &mut p {
            *v *= scale;
        }
        let grad_z = model.phi.backward_into(&z, &p, &mut g_phi);
        debug_assert_eq!(grad_z.len(), d);
        model.theta.backward_accumulate(&cache, &grad_z, &mut g_theta)?;
    }
    Ok((loss * scale, g_theta, g_phi))
}

impl SplitModel {
    pub fn new(theta: Mlp, phi: Linear) -> Result<Self> {
        if theta.output_dim() != phi.in_dim() {
            return Err(Error::shape(format!(
                "representation emits {} values but the head expects {}",
                theta.output_dim(),
                phi.in_dim()
            )));
        }
        Ok(Self { theta, phi })
    }

    /// ReLU MLP `input -> hidden.. -> embedding` plus a linear head.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        embedding_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(embedding_dim);
        let theta = Mlp::random(&dims, Activation::Relu, rng)?;
        if num_classes == 0 {
            return Err(Error::shape("head needs at least one class"));
        }
        let phi = Linear::random(embedding_dim, num_classes, 3.0, rng);
        Self::new(theta, phi)
    }

    pub fn embedding_dim(&self) -> usize {
        self.theta.output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.phi.out_dim()
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.theta.predict(x)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.embed(x)?;
        self.phi.forward(&z)
    }

    /// Top-1 class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// One SGD step on the head over a batch of embeddings; `theta` is untouched.
    pub fn train_head_step<E: Example>(&mut self, batch: &[E], eta_phi: f64) -> Result<f64> {
        let (loss, grad) = head_loss_and_grad(&self.phi, batch)?;
        self.phi.add_scaled(&grad, -eta_phi)?;
        Ok(loss)
    }

    /// One SGD step on `theta` over raw inputs; the head is untouched.
    pub fn train_repr_step<E: Example, P: ClassPrototypes + ?Sized>(
        &mut self,
        batch: &[E],
        prototypes: &P,
        lambda: f64,
        eta_theta: f64,
    ) -> Result<f64> {
        let weights = RepresentationLoss { ce_weight: 1.0, lambda };
        let (loss, grad) =
            representation_loss_and_grad(&self.theta, &self.phi, batch, prototypes, weights)?;
        self.theta.add_scaled(&grad, -eta_theta)?;
        Ok(loss)
    }

    /// Plain SGD on both parts from the same gradient evaluation.
    pub fn train_joint_step<E: Example>(&mut self, batch: &[E], eta_theta: f64, eta_phi: f64) -> Result<f64> {
        let (loss, g_theta, g_phi) = joint_loss_and_grad(self, batch)?;
        self.theta.add_scaled(&g_theta, -eta_theta)?;
        self.phi.add_scaled(&g_phi, -eta_phi)?;
        Ok(loss)
    }

    /// `epochs` passes of shuffled mini-batch head updates.
    pub fn train_head_epochs<E: Example, R: Rng + ?Sized>(
        &mut self,
        data: &[E],
        epochs: usize,
        batch_size: usize,
        eta_phi: f64,
        rng: &mut R,
    ) -> Result<()> {
        for_each_batch(data, epochs, batch_size, rng, |batch| {
            self.train_head_step(batch, eta_phi).map(|_| ())
        })
    }

    pub fn train_repr_epochs<E: Example, P: ClassPrototypes + ?Sized, R: Rng + ?Sized>(
        &mut self,
        data: &[E],
        prototypes: &P,
        cfg: &TrainConfig,
        lambda: f64,
        rng: &mut R,
    ) -> Result<()> {
        for_each_batch(data, cfg.local_epochs, cfg.batch_size, rng, |batch| {
            self.train_repr_step(batch, prototypes, lambda, cfg.eta_theta)
                .map(|_| ())
        })
    }

    pub fn train_joint_epochs<E: Example, R: Rng + ?Sized>(
        &mut self,
        data: &[E],
        epochs: usize,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<()> {
        for_each_batch(data, epochs, cfg.batch_size, rng, |batch| {
            self.train_joint_step(batch, cfg.eta_theta, cfg.eta_phi)
                .map(|_| ())
        })
    }
}

fn for_each_batch<'a, E: Example, R: Rng + ?Sized>(
    data: &'a [E],
    epochs: usize,
    batch_size: usize,
    rng: &mut R,
    mut step: impl FnMut(&[&'a E]) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Ok(());
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size.max(1)) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &data[i]));
            step(&batch)?;
        }
    }
    Ok(())
}

impl<E: Example> Example for &E {
    fn features(&self) -> &[f64] {
        (**self).features()
    }
    fn label(&self) -> usize {
        (**self).label()
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
