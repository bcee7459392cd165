use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};
use crate::graph::Gradients;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Multiplier applied to the optimizer learning rate for this parameter.
    #[serde(default = "one")]
    pub lr_scale: f64,
}

fn one() -> f64 {
    1.0
}

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; it becomes grad-enabled.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            tensor: tensor.with_grad(true),
            lr_scale: 1.0,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over every parameter.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].tensor.set_grad_enabled(trainable);
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.params[id.0].lr_scale = scale;
    }

    pub fn lr_scale(&self, id: ParamId) -> f64 {
        self.params[id.0].lr_scale
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Adds the gradients of a finished backward pass into every grad-enabled
    /// parameter. Parameters the loss never touched receive zeros.
    pub fn absorb(&mut self, grads: &Gradients) -> Result<()> {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !p.tensor.grad_enabled() {
                continue;
            }
            match grads.param(ParamId(i)) {
                Some(g) => p.tensor.accumulate_grad(g)?,
                None => {
                    let zeros = vec![0.0; p.tensor.numel()];
                    p.tensor.accumulate_grad(&zeros)?;
                }
            }
        }
        Ok(())
    }

    /// Copies values (not gradients or flags) from `other`, which must have
    /// the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(GradError::ShapeMismatch {
                op: "copy_values_from",
                lhs: vec![self.params.len()],
                rhs: vec![other.params.len()],
            });
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.tensor.shape() != src.tensor.shape() {
                return Err(GradError::ShapeMismatch {
                    op: "copy_values_from",
                    lhs: dst.tensor.shape().to_vec(),
                    rhs: src.tensor.shape().to_vec(),
                });
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}
