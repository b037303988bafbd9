use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// First and second moment estimates.
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

/// Named parameters plus their optimizer state. Iteration order is insertion
/// order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let n = value.numel();
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: value.with_requires_grad(true),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    /// Replaces a value; the shape is fixed at creation.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::shape(
                "param set",
                format!("`{}` is {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value.with_requires_grad(true);
        Ok(())
    }

    pub fn set_state(&mut self, id: ParamId, m: Vec<T>, v: Vec<T>, step: u64) -> Result<()> {
        let p = &mut self.params[id.0];
        if m.len() != p.value.numel() || v.len() != p.value.numel() {
            return Err(TensorError::shape("param state", format!("`{}` moment length", p.name)));
        }
        p.m = m;
        p.v = v;
        p.step = step;
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().fill(T::zero());
        }
    }
}

/// Hyperparameters of decoupled-weight-decay Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Applies one AdamW update to every parameter. `grads` is in store order.
/// No parameter is touched if any gradient is non-finite.
pub fn adamw_step<T: Scalar>(store: &mut ParamStore<T>, grads: &[Tensor<T>], cfg: &AdamW) -> Result<()> {
    if grads.len() != store.len() {
        return Err(TensorError::Usage(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (p, g) in store.params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(TensorError::shape(
                "adamw",
                format!("`{}` is {:?}, gradient {:?}", p.name, p.value.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(TensorError::NonFiniteGradient(p.name.clone()));
        }
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    let decay = T::one() - lr * T::of(cfg.weight_decay);
    for (p, g) in store.params.iter_mut().zip(grads) {
        p.step += 1;
        let t = p.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let gi = g.data()[i];
            p.m[i] = b1 * p.m[i] + (T::one() - b1) * gi;
            p.v[i] = b2 * p.v[i] + (T::one() - b2) * gi * gi;
            let mhat = p.m[i] / c1;
            let vhat = p.v[i] / c2;
            values[i] = values[i] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
