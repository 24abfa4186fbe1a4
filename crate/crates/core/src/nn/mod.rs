//! Minimal differentiable-computation engine: tensors, a reverse-mode tape,
//! the layers used by the forecasting models, and the Adam optimizer.

mod adam;
pub(crate) mod contrast;
mod layers;
mod param;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use contrast::ContrastKind;
pub use layers::{lstm_forward, ConvBlock, Linear, LstmLayer};
pub use param::{NamedTensor, ParamId, Parameter};
pub use tape::{pooled_len, Gradients, PoolWindow, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Numerically stable softmax of a single logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    tape::softmax_in_place(&mut out);
    out
}

/// A model component owning an ordered list of parameters.
///
/// The order is stable; optimizers and checkpoints rely on it.
pub trait Module {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Marks every parameter as gradient-free on `tape`.
    fn freeze_on(&self, tape: &mut Tape) {
        for p in self.params() {
            tape.freeze(p);
        }
    }
}
