use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Anything that is a fixed list of tensors: models, heads, their gradients.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn same_shape(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.values_mut().fill(0.0);
        }
        out
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape("parameter sets differ in layout"));
        }
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(b, scale)?;
        }
        Ok(())
    }

    /// `alpha * self + (1 - alpha) * other`, elementwise.
    fn interpolate(&self, other: &Self, alpha: f64) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::shape("parameter sets differ in layout"));
        }
        let mut out = self.clone();
        for (o, b) in out.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in o.values_mut().iter_mut().zip(b.values()) {
                *x = alpha * *x + (1.0 - alpha) * y;
            }
        }
        Ok(out)
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// `Σ w_k P_k / Σ w_k`, folded in slice order.
pub fn weighted_average<P: Parameters>(items: &[(&P, f64)]) -> Result<P> {
    let (first, _) = items
        .first()
        .ok_or_else(|| Error::contract("weighted average of no parameter sets"))?;
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) || items.iter().any(|(_, w)| *w < 0.0) {
        return Err(Error::contract(format!(
            "weights must be nonnegative with positive total, got total {total}"
        )));
    }
    if items.len() == 1 {
        return Ok((*first).clone());
    }
    let mut acc = first.zeroed();
    for (p, w) in items {
        if !acc.same_shape(p) {
            return Err(Error::contract("aggregated parameter sets differ in layout"));
        }
        acc.add_scaled(p, *w)?;
    }
    for t in acc.tensors_mut() {
        t.scale(1.0 / total);
    }
    Ok(acc)
}

/// Affine map `y = W x + b` with `W` stored as `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape().len() != 1 {
            return Err(Error::shape(format!(
                "linear layer needs a 2-D weight and 1-D bias, got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        if weight.shape()[0] != bias.shape()[0] {
            return Err(Error::shape(format!(
                "weight rows {} != bias length {}",
                weight.shape()[0],
                bias.shape()[0]
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    /// Uniform init on `±sqrt(gain / in_dim)`; zero bias.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        let bound = (gain / in_dim.max(1) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Tensor {
                shape: vec![out_dim, in_dim],
                values: w,
            },
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape(format!(
                "input of length {} into layer expecting {}",
                x.len(),
                self.in_dim()
            )));
        }
        let mut out = vec![0.0; self.out_dim()];
        self.forward_into(x, &mut out);
        Ok(out)
    }

    pub(crate) fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        let n_in = self.in_dim();
        let w = self.weight.values();
        for (o, (slot, b)) in out.iter_mut().zip(self.bias.values()).enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            *slot = b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Accumulates `dL/dW`, `dL/db` into `grad` and returns `dL/dx`.
    pub(crate) fn backward_into(&self, x: &[f64], grad_out: &[f64], grad: &mut Linear) -> Vec<f64> {
        let n_in = self.in_dim();
        let mut grad_in = vec![0.0; n_in];
        let w = self.weight.values();
        let gw = grad.weight.values_mut();
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * n_in..(o + 1) * n_in];
            let grow = &mut gw[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        for (gb, &g) in grad.bias.values_mut().iter_mut().zip(grad_out) {
            *gb += g;
        }
        grad_in
    }
}

impl Parameters for Linear {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Feed-forward stack; `hidden` is applied after every layer but the last,
/// which stays linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Linear>,
    hidden: Activation,
}

/// Per-layer inputs and pre-activations from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(layers: Vec<Linear>, hidden: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, hidden })
    }

    /// Layer widths `dims[0] -> dims[1] -> ... -> dims[n]`.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::shape(format!("invalid layer widths {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i + 1 < n && hidden == Activation::Relu {
                    6.0
                } else {
                    3.0
                };
                Linear::random(w[0], w[1], gain, rng)
            })
            .collect();
        Self::new(layers, hidden)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut current = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.out_dim()];
            layer.forward_into(&current, &mut z);
            let act = if i + 1 < n { self.hidden } else { Activation::Identity };
            let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            inputs.push(std::mem::replace(&mut current, a));
            pre.push(z);
        }
        Ok((current, MlpCache { inputs, pre }))
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut current = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.out_dim()];
            layer.forward_into(&current, &mut z);
            if i + 1 < n {
                for v in &mut z {
                    *v = self.hidden.apply(*v);
                }
            }
            current = z;
        }
        Ok(current)
    }

    /// Gradients of a scalar loss w.r.t. every parameter, given `dL/doutput`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        let mut grads = self.zeroed();
        let grad_in = self.backward_accumulate(cache, grad_out, &mut grads)?;
        Ok((grads, grad_in))
    }

    /// Like [`Mlp::backward`] but adds into an existing gradient buffer.
    pub fn backward_accumulate(
        &self,
        cache: &MlpCache,
        grad_out: &[f64],
        grads: &mut Mlp,
    ) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        if grad_out.len() != self.output_dim() {
            return Err(Error::contract(format!(
                "output gradient of length {} for output width {}",
                grad_out.len(),
                self.output_dim()
            )));
        }
        if !grads.same_shape(self) {
            return Err(Error::contract("gradient buffer does not match the network"));
        }
        let n = self.layers.len();
        let mut g = grad_out.to_vec();
        for i in (0..n).rev() {
            if i + 1 < n {
                for (gv, &z) in g.iter_mut().zip(&cache.pre[i]) {
                    *gv *= self.hidden.derivative(z);
                }
            }
            g = self.layers[i].backward_into(&cache.inputs[i], &g, &mut grads.layers[i]);
        }
        Ok(g)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input of length {} into network expecting {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_cache(&self, cache: &MlpCache) -> Result<()> {
        let ok = cache.inputs.len() == self.layers.len()
            && cache.pre.len() == self.layers.len()
            && self.layers.iter().enumerate().all(|(i, l)| {
                cache.inputs[i].len() == l.in_dim() && cache.pre[i].len() == l.out_dim()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::contract("forward cache does not belong to this network"))
        }
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn identity(n: usize) -> Linear {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        Linear::new(Tensor::new(vec![n, n], w).unwrap(), Tensor::zeros(vec![n])).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::new(vec![Linear::zeros(3, 4), Linear::zeros(4, 2)], Activation::Relu).unwrap();
        let (out, _) = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = Mlp::new(vec![identity(3)], Activation::Relu).unwrap();
        let (out, _) = net.forward(&[1.0, -2.0, 3.5]).unwrap();
        assert_eq!(out, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn chain_mismatch_is_rejected() {
        assert!(matches!(
            Mlp::new(vec![Linear::zeros(3, 4), Linear::zeros(5, 2)], Activation::Relu),
            Err(Error::Shape(_))
        ));
        let net = Mlp::new(vec![Linear::zeros(3, 4)], Activation::Relu).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::random(&[3, 5, 2], Activation::Relu, &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.3, -0.1, 0.7]).unwrap();
        let (grads, grad_in) = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(grads.tensors().iter().all(|t| t.values().iter().all(|&v| v == 0.0)));
        assert!(grad_in.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_gradient_of_first_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::random(&[3, 2], Activation::Relu, &mut rng).unwrap();
        let x = [0.5, -1.5, 2.0];
        let (_, cache) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&cache, &[1.0, 0.0]).unwrap();
        let gw = grads.layers()[0].weight().values();
        assert_eq!(&gw[0..3], &x);
        assert_eq!(&gw[3..6], &[0.0, 0.0, 0.0]);
        assert_eq!(grads.layers()[0].bias().values(), &[1.0, 0.0]);
    }

    #[test]
    fn stale_cache_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mlp::random(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        let b = Mlp::random(&[3, 6, 2], Activation::Relu, &mut rng).unwrap();
        let (_, cache) = a.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(b.backward(&cache, &[1.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn weighted_average_arithmetic() {
        let mut a = Linear::zeros(1, 1);
        let mut b = Linear::zeros(1, 1);
        a.weight_mut().values_mut()[0] = 0.0;
        b.weight_mut().values_mut()[0] = 4.0;
        let avg = weighted_average(&[(&a, 1.0), (&b, 3.0)]).unwrap();
        assert_eq!(avg.weight().values()[0], 3.0);
        assert!(weighted_average::<Linear>(&[]).is_err());
        assert!(weighted_average(&[(&a, 0.0)]).is_err());
        let c = Linear::zeros(2, 1);
        assert!(weighted_average(&[(&a, 1.0), (&c, 1.0)]).is_err());
    }
}
