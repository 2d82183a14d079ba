use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied after the Adam update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> ParamEntry<T> {
    fn new(value: Tensor<T>) -> Self {
        let z = Tensor::zeros(value.shape());
        Self {
            grad: z.clone(),
            adam_m: z.clone(),
            adam_v: z,
            value,
            trainable: true,
        }
    }
}

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics). Iteration order is by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
    pub step_count: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            buffers: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name.to_string(), ParamEntry::new(value));
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate buffer `{name}`")));
        }
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        Ok(&mut self.entry_mut(name)?.value)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    /// Adds the parameter gradients of a backward pass into the grad buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, grads: &Gradients<T>) -> Result<()> {
        for (name, g) in graph.param_grads(grads) {
            self.entry_mut(name)?.grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(T::zero());
        }
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Converts values, optimizer state and buffers to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            grad: e.grad.cast(),
                            adam_m: e.adam_m.cast(),
                            adam_v: e.adam_v.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            step_count: self.step_count,
        }
    }

    /// One Adam update with bias correction and decoupled weight decay.
    /// Non-trainable entries are left untouched. All gradients are zeroed.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        cfg.validate()?;
        for (name, e) in &self.entries {
            if e.trainable && !e.grad.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        let t = self.step_count + 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let bc1 = T::lit(1.0 - cfg.beta1.powf(t as f64));
        let bc2 = T::lit(1.0 - cfg.beta2.powf(t as f64));
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        let decay = T::lit(cfg.lr * cfg.weight_decay);
        for e in self.entries.values_mut() {
            if e.trainable {
                let it = e
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(e.grad.data())
                    .zip(e.adam_m.data_mut().iter_mut().zip(e.adam_v.data_mut()));
                for ((p, &g), (m, v)) in it {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    *p -= decay * *p;
                }
            }
            e.grad.data_mut().fill(T::zero());
        }
        self.step_count = t;
        Ok(())
    }
}
