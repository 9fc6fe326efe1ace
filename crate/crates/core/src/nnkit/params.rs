use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NnError;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Optimizer group; each group gets its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Network,
    GaussianPosition,
    GaussianAttribute,
    Latent,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Per-group Adam learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub network: f64,
    pub gaussian_position: f64,
    pub gaussian_attribute: f64,
    pub latent: f64,
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            network: lr,
            gaussian_position: lr,
            gaussian_attribute: lr,
            latent: lr,
        }
    }

    pub fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Network => self.network,
            ParamGroup::GaussianPosition => self.gaussian_position,
            ParamGroup::GaussianAttribute => self.gaussian_attribute,
            ParamGroup::Latent => self.latent,
        }
    }
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            network: 1e-3,
            gaussian_position: 1.6e-4,
            gaussian_attribute: 5e-3,
            latent: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Named parameter tensors with matching gradient buffers and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: ParamGroup,
        value: Vec<f64>,
    ) -> Result<ParamId, NnError> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(NnError::Shape {
                what: name,
                expected: numel,
                got: value.len(),
            });
        }
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            group,
            grad: vec![0.0; numel],
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            value,
        });
        Ok(id)
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: ParamGroup,
    ) -> Result<ParamId, NnError> {
        let numel = shape.iter().product();
        self.add(name, shape, group, vec![0.0; numel])
    }

    /// Uniform in `±bound`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: ParamGroup,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId, NnError> {
        let numel: usize = shape.iter().product();
        let value = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, shape, group, value)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    /// Simultaneous read of one tensor's value and write access to another's gradient.
    pub fn value_and_grad_mut(&mut self, value: ParamId, grad: ParamId) -> (&[f64], &mut [f64]) {
        if value == grad {
            let p = &mut self.params[value.0];
            // value and grad are separate buffers of the same param
            let Param { value, grad, .. } = p;
            return (value.as_slice(), grad.as_mut_slice());
        }
        let (a, b) = (value.0, grad.0);
        if a < b {
            let (lo, hi) = self.params.split_at_mut(b);
            (&lo[a].value, &mut hi[0].grad)
        } else {
            let (lo, hi) = self.params.split_at_mut(a);
            (&hi[0].value, &mut lo[b].grad)
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// One Adam update with bias correction over every tensor, then zeroes gradients.
    ///
    /// Gradients are validated first so a NaN leaves every parameter untouched.
    pub fn adam_step(&mut self, lrs: &LearningRates, cfg: &AdamConfig) -> Result<(), NnError> {
        for p in &self.params {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGradient {
                    param: p.name.clone(),
                    index: i,
                });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for p in &mut self.params {
            let lr = lrs.for_group(p.group);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                p.grad[i] = 0.0;
            }
        }
        Ok(())
    }

    /// Flat (parameter, element) addressing used by finite-difference harnesses.
    pub fn flat_get(&self, id: ParamId, i: usize) -> f64 {
        self.params[id.0].value[i]
    }

    pub fn flat_set(&mut self, id: ParamId, i: usize, v: f64) {
        self.params[id.0].value[i] = v;
    }
}
