use std::collections::HashMap;

use rand::Rng;

use super::Tensor;
use crate::error::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Named trainable parameters plus per-parameter Adam moments.
///
/// Names are unique and shapes never change after [`ParamStore::add`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        value.dims2()?;
        let id = ParamId(self.params.len());
        let n = value.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Weight matrix with entries uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_fan_in_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId, TensorError> {
        let s = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-s..=s)).collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data))
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Overwrites a parameter's values; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].value.data_mut()
    }

    /// Total scalar count over the given parameters.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params[id.0].value.len()).sum()
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.params[id.0].step
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        let p = &self.params[id.0];
        (&p.m, &p.v)
    }

    pub(crate) fn set_optimizer_state(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>, step: u64) {
        let p = &mut self.params[id.0];
        assert_eq!(m.len(), p.value.len());
        assert_eq!(v.len(), p.value.len());
        p.m = m;
        p.v = v;
        p.step = step;
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    fn check_grad(&self, id: ParamId, grads: &Gradients) -> Result<(), TensorError> {
        let p = &self.params[id.0];
        let g = grads.get(id);
        if g.shape() != p.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "optimizer step",
                left: p.value.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Plain gradient descent: `p <- p - lr * g` for each listed parameter.
    pub fn sgd_step(&mut self, ids: &[ParamId], grads: &Gradients, lr: f64) -> Result<(), TensorError> {
        for &id in ids {
            self.check_grad(id, grads)?;
            let g = grads.get(id).data();
            for (p, &gi) in self.params[id.0].value.data_mut().iter_mut().zip(g) {
                *p -= lr * gi;
            }
            self.params[id.0].step += 1;
        }
        Ok(())
    }

    /// Adam with bias-corrected moments, descending on `grads`.
    pub fn adam_step(&mut self, ids: &[ParamId], grads: &Gradients, cfg: AdamConfig) -> Result<(), TensorError> {
        for &id in ids {
            self.check_grad(id, grads)?;
            let g = grads.get(id).data();
            let p = &mut self.params[id.0];
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let vals = p.value.data_mut();
            for i in 0..vals.len() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                vals[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            grads: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    /// True if every entry of the listed parameters' gradients is zero.
    pub fn is_zero(&self, ids: &[ParamId]) -> bool {
        ids.iter().all(|&id| self.grads[id.0].data().iter().all(|&g| g == 0.0))
    }
}
