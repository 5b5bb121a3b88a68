use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named parameters, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same parameters in another precision; gradients are reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast());
        }
        out
    }

    /// Replaces values by name from `(name, tensor)` pairs. Every stored
    /// parameter must be present with a matching shape.
    pub fn load_named(&mut self, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for p in &mut self.params {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint holds {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// `U(-1/√fan_in, 1/√fan_in)` weights of shape `[fan_in, fan_out]`.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::from_rows(fan_in, fan_out, data)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate multiplier over a run of known length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate at step 0 down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    /// Multiplier for the update that follows `step` completed updates.
    pub fn factor(self, step: u64, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total == 0 => 1.0,
            LrSchedule::Cosine => {
                let x = (step as f64 / total as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

/// Adaptive-moment optimizer over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |p: &Parameter<T>| Tensor::zeros(p.value.shape());
        Self {
            config,
            step: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn update(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (i, p) in store.params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m)
                .zip(v)
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grad();
    }

    /// Moments keyed `adam.m/<name>`, `adam.v/<name>` plus `adam.step`.
    pub fn state_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * store.len() + 1);
        for (i, p) in store.iter().enumerate() {
            out.push((format!("adam.m/{}", p.name), self.m[i].clone()));
            out.push((format!("adam.v/{}", p.name), self.v[i].clone()));
        }
        // Two halves keep the step count exact in f32.
        let lo = T::lit((self.step & 0xffff) as f64);
        let hi = T::lit((self.step >> 16) as f64);
        out.push(("adam.step".into(), Tensor::from_rows(1, 2, vec![lo, hi])));
        out
    }

    pub fn restore(
        config: AdamConfig,
        store: &ParamStore<T>,
        tensors: &BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let mut adam = Self::new(config, store);
        for (i, p) in store.iter().enumerate() {
            for (prefix, slot) in [("adam.m/", &mut adam.m[i]), ("adam.v/", &mut adam.v[i])] {
                let key = format!("{prefix}{}", p.name);
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{key} has wrong shape {:?}",
                        t.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        let step = tensors
            .get("adam.step")
            .ok_or_else(|| Error::Checkpoint("missing adam.step".into()))?;
        let d = step.data();
        if d.len() != 2 {
            return Err(Error::Checkpoint("adam.step must hold two values".into()));
        }
        adam.step = d[0].to_u64().unwrap_or(0) | (d[1].to_u64().unwrap_or(0) << 16);
        Ok(adam)
    }
}
