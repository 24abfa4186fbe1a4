use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique handle linking a parameter to the tape leaf that reads it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        Self(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor together with its accumulated gradient.
///
/// Cloning yields an independent parameter with a new [`ParamId`], so a
/// cloned model never shares gradient slots with its source.
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    /// Uniform initialization in `±bound`.
    pub fn uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = rng.random_range(-bound..=bound);
        }
        Self::new(name, t)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds this parameter's slot from `grads`, if the loss reached it.
    pub fn accumulate(&mut self, grads: &Gradients) {
        if let Some(g) = grads.for_param(self.id) {
            self.grad.add_assign(g);
        }
    }

    /// Replaces the value, keeping the identity. Shape must not change.
    pub fn assign(&mut self, value: Tensor) {
        assert_eq!(value.shape(), self.value.shape(), "assign to {}", self.name);
        self.value = value;
    }

    pub fn snapshot(&self) -> NamedTensor {
        NamedTensor {
            name: self.name.clone(),
            shape: self.value.shape().to_vec(),
            values: self.value.data().to_vec(),
        }
    }
}

/// Serializable name/shape/values triple used by checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}
