//! Parameterized building blocks over the autodiff graph.

use fetap_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Uniform init with variance `gain² / fan_in`.
fn uniform(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let a = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-a..a) as f32)
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.w"), uniform(&[cout, cin, k, k], cin * k * k, gain, rng))?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?;
        Ok(Self { weight, bias, stride, pad: k / 2 })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        Ok(g.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, gain: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = store.add(format!("{name}.w"), uniform(&[dout, din], din, gain, rng))?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[dout]))?;
        Ok(Self { weight, bias })
    }

    /// Weight and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.w"), Tensor::zeros(&[dout, din]))?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[dout]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        Ok(g.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.g"), Tensor::full(&[dim], 1.0))?;
        let beta = store.add(format!("{name}.b"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        Ok(g.layer_norm(x, gamma, beta, 1e-5)?)
    }
}
