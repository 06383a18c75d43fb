//! Learnable parameters with additive gradient buffers and plain SGD.

use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Weights and bias for one layer, each paired with a gradient buffer of the
/// same shape. Backward passes accumulate into the buffers additively;
/// `sgd_step` applies and zeroes them.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub name: String,
    pub weights: Tensor,
    pub bias: Tensor,
    pub grad_weights: Tensor,
    pub grad_bias: Tensor,
}

impl LayerParams {
    pub fn new(name: impl Into<String>, weights: Tensor, bias: Tensor) -> Self {
        let grad_weights = Tensor::zeros(weights.shape().to_vec());
        let grad_bias = Tensor::zeros(bias.shape().to_vec());
        LayerParams { name: name.into(), weights, bias, grad_weights, grad_bias }
    }

    pub fn zero_grads(&mut self) {
        self.grad_weights.data_mut().fill(0.0);
        self.grad_bias.data_mut().fill(0.0);
    }

    /// Adds another buffer's gradients into this one. Used to fold per-task
    /// gradient bundles back together in a fixed order.
    pub fn absorb_grads(&mut self, other: &LayerParams) -> Result<()> {
        if self.grad_weights.shape() != other.grad_weights.shape()
            || self.grad_bias.shape() != other.grad_bias.shape()
        {
            return Err(Error::Shape(format!(
                "gradient shapes for layer '{}' do not match",
                self.name
            )));
        }
        for (a, b) in self.grad_weights.data_mut().iter_mut().zip(other.grad_weights.data()) {
            *a += b;
        }
        for (a, b) in self.grad_bias.data_mut().iter_mut().zip(other.grad_bias.data()) {
            *a += b;
        }
        Ok(())
    }

    /// Scales both gradient buffers in place.
    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.grad_weights.data_mut() {
            *g *= factor;
        }
        for g in self.grad_bias.data_mut() {
            *g *= factor;
        }
    }
}

/// Kaiming-normal conv weights `[out_ch, in_ch, k, k]` (fan-in variant),
/// zero bias. Deterministic for a given seed.
pub fn kaiming_conv(name: &str, out_ch: usize, in_ch: usize, k: usize, seed: u64) -> LayerParams {
    let fan_in = (in_ch * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut r = rng::rng_from(seed);
    let n = out_ch * in_ch * k * k;
    let weights = Tensor::from_parts(
        vec![out_ch, in_ch, k, k],
        (0..n).map(|_| normal.sample(&mut r)).collect(),
    );
    LayerParams::new(name, weights, Tensor::zeros(vec![out_ch]))
}

/// Kaiming-normal fully connected weights `[out_dim, in_dim]`, zero bias.
pub fn kaiming_fc(name: &str, out_dim: usize, in_dim: usize, seed: u64) -> LayerParams {
    let std = (2.0 / in_dim as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut r = rng::rng_from(seed);
    let weights = Tensor::from_parts(
        vec![out_dim, in_dim],
        (0..out_dim * in_dim).map(|_| normal.sample(&mut r)).collect(),
    );
    LayerParams::new(name, weights, Tensor::zeros(vec![out_dim]))
}

/// One plain SGD step over a group of layers: `p <- p - lr * grad`, then all
/// gradient buffers are zeroed. Checks every layer's gradients for finiteness
/// before touching any parameter, so a failed step changes nothing.
pub fn sgd_step<'a, I>(params: I, lr: f64) -> Result<()>
where
    I: IntoIterator<Item = &'a mut LayerParams>,
{
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    let group: Vec<&'a mut LayerParams> = params.into_iter().collect();
    for p in &group {
        if !p.grad_weights.is_finite() || !p.grad_bias.is_finite() {
            return Err(Error::Training(format!(
                "non-finite gradient in layer '{}'",
                p.name
            )));
        }
    }
    for p in group {
        for (w, g) in p.weights.data_mut().iter_mut().zip(p.grad_weights.data()) {
            *w -= lr * g;
        }
        for (b, g) in p.bias.data_mut().iter_mut().zip(p.grad_bias.data()) {
            *b -= lr * g;
        }
        p.zero_grads();
    }
    Ok(())
}
