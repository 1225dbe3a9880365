//! Hand-rolled sequence-model layers with explicit forward/backward passes.
//! Parameters are named matrices; layers expose a mutable collection pass
//! (optimizer steps, checkpoint loading) and a read-only visitation pass
//! (checkpoint saving, freezing diagnostics).

pub mod activation;
pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod lstm;
pub mod norm;
pub mod optim;

pub use activation::Act;
pub use attention::ContentAttention;
pub use conv::Conv1d;
pub use gradcheck::{gradient_check, GradCheckable};
pub use linear::Linear;
pub use lstm::{BiLstm, Lstm, LstmStep};
pub use norm::SeqNorm;
pub use optim::{Adam, SgdMomentum};

use rand_chacha::rand_core::Rng as RngCore;
use thiserror::Error;

use crate::mat::Mat;
use crate::rng::uniform_in;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Named view of one parameter matrix and its gradient accumulator.
pub struct ParamRef<'a, F: Scalar> {
    pub name: String,
    pub value: &'a mut Mat<F>,
    pub grad: &'a mut Mat<F>,
}

impl<'a, F: Scalar> ParamRef<'a, F> {
    pub fn new(name: impl Into<String>, value: &'a mut Mat<F>, grad: &'a mut Mat<F>) -> Self {
        ParamRef {
            name: name.into(),
            value,
            grad,
        }
    }
}

pub fn zero_grads<F: Scalar>(params: &mut [ParamRef<'_, F>]) {
    for p in params {
        p.grad.fill(F::zero());
    }
}

pub fn param_count<F: Scalar>(params: &[ParamRef<'_, F>]) -> usize {
    params.iter().map(|p| p.value.data().len()).sum()
}

pub fn flatten_values<F: Scalar>(params: &[ParamRef<'_, F>]) -> Vec<F> {
    let mut out = Vec::with_capacity(param_count(params));
    for p in params {
        out.extend_from_slice(p.value.data());
    }
    out
}

pub fn flatten_grads<F: Scalar>(params: &[ParamRef<'_, F>]) -> Vec<F> {
    let mut out = Vec::with_capacity(param_count(params));
    for p in params {
        out.extend_from_slice(p.grad.data());
    }
    out
}

pub fn load_values<F: Scalar>(params: &mut [ParamRef<'_, F>], flat: &[F]) {
    let mut off = 0;
    for p in params.iter_mut() {
        let len = p.value.data().len();
        p.value.data_mut().copy_from_slice(&flat[off..off + len]);
        off += len;
    }
    assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
}

/// Uniform init in ±1/sqrt(fan_in).
pub fn init_uniform<F: Scalar, R: RngCore>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Mat<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| {
        F::from_f64(uniform_in(rng, -bound, bound))
    })
}
