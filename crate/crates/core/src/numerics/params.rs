use indexmap::IndexMap;

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters in insertion order, each with a gradient slot of the
/// same shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Input(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        let value = value.with_requires_grad(true);
        let (id, _) = self.params.insert_full(name, Param { value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params
            .get_index(id)
            .map(|(k, _)| k.as_str())
            .unwrap_or("")
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id].grad
    }

    /// Replaces a parameter's values, keeping its shape and trainable flag.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` is {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        let flag = p.value.requires_grad();
        p.value = value.with_requires_grad(flag);
        Ok(())
    }

    /// Freezes (`false`) or unfreezes a parameter.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        p.value.set_requires_grad(trainable);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds gradients into the slots of trainable parameters.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.by_param {
            let p = &mut self.params[*id];
            if !p.value.requires_grad() {
                continue;
            }
            for (d, s) in p.grad.data_mut().iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter(|p| p.value.requires_grad())
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// `w ← w − lr·scale·∇w` for every trainable parameter.
    pub fn sgd_step(&mut self, lr: f64, scale: f64) {
        for Param { value, grad } in self.params.values_mut() {
            if !value.requires_grad() {
                continue;
            }
            for (w, g) in value.data_mut().iter_mut().zip(grad.data()) {
                *w -= lr * scale * g;
            }
        }
    }
}
