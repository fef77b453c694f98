//! Dense tensor kernel with reverse-mode gradients.
//!
//! Small and eager: each primitive on a [`Tape`] computes its value
//! immediately and records what its backward rule needs. Shapes are checked
//! per primitive and violations come back as [`KernelError`].

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: domain error, {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

/// Central-difference gradient estimate of a scalar function.
///
/// Coordinate `i` is `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)`.
pub fn finite_difference_gradient<F, E>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor, E>
where
    F: FnMut(&Tensor) -> Result<f64, E>,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(Tensor::new(x.shape().to_vec(), grad).expect("shape preserved"))
}

/// Largest elementwise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
