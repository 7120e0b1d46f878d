//! Dense f64 tensors with reverse-mode gradient accumulation.
//!
//! Everything trainable in this crate runs on [`Tape`]: forward operations
//! record their inputs and saved intermediates, `backward` replays the
//! records once in reverse and accumulates gradients for every leaf.
//! Problem sizes are tiny (cross-sections of ~31 assets, sublists of 10),
//! so the implementation favors clarity and f64 precision over throughput.

pub mod math;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, TensorId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, KernelError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> KernelError {
    KernelError::Shape {
        op,
        detail: detail.into(),
    }
}

/// A container of trainable tensors with a stable enumeration order, so a
/// trainer can stage leaves on a tape and apply gradient steps uniformly.
pub trait Parameterized {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// One plain gradient-descent step: `p <- p - lr * g`. Fails if the
    /// update produces a non-finite parameter (divergence).
    fn sgd_step(&mut self, grads: &[Tensor], learning_rate: f64) -> Result<()> {
        let mut params = self.tensors_mut();
        if params.len() != grads.len() {
            return Err(KernelError::Usage(format!(
                "sgd_step: {} parameter tensors, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (param, grad) in params.iter_mut().zip(grads) {
            let updated: Vec<f64> = param
                .values()
                .iter()
                .zip(grad.values())
                .map(|(&p, &g)| p - learning_rate * g)
                .collect();
            **param = Tensor::new(param.shape().to_vec(), updated)?;
        }
        Ok(())
    }
}
