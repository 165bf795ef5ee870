//! Minimal dense-tensor reverse-mode autodiff engine.
//!
//! The engine is generic over the element type: `f32` is the training
//! default, `f64` is used by the finite-difference gradient checks. The
//! computation graph is a flat tape rebuilt on every forward pass.

mod checkpoint;
mod graph;
pub mod gradcheck;
mod nn;
mod optim;
mod params;
#[cfg(test)]
mod graph_tests;

pub use checkpoint::{load_params, save_params, CheckpointError, CHECKPOINT_MAGIC};
pub use graph::{Graph, NodeId};
pub use nn::{
    mlp, multi_head_attention, transformer_block, AttentionWeights, LayerNormWeights, MlpWeights,
    TransformerBlockWeights, LAYER_NORM_EPS,
};
pub use optim::{AdamW, LrSchedule};
pub use params::ParamSet;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar types the engine can run on.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
}

impl Element for f32 {}
impl Element for f64 {}

/// Shorthand for lifting an `f64` literal into the element type.
pub fn lit<E: Element>(x: f64) -> E {
    E::from_f64(x).expect("f64 literal representable in element type")
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in graph node {0}")]
    NaNInGraph(usize),
    #[error("model dim {dim} not divisible by {heads} heads")]
    DimNotDivisibleByHeads { dim: usize, heads: usize },
    #[error("no observed events in batch")]
    NoEventsInBatch,
    #[error("schedule step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
}

/// A dense row-major tensor. Plain data; graph participation happens by
/// registering it on a [`Graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![E::zero(); n] }
    }

    pub fn scalar(x: E) -> Self {
        Self { shape: vec![], data: vec![x] }
    }

    /// 1-D tensor from a slice.
    pub fn vector(data: Vec<E>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<E>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a rank-2 tensor (a rank-1 tensor counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Last-axis extent.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<F: Element>(&self, f: impl Fn(E) -> F) -> Tensor<F> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Row-major matmul kernel: `out[m,n] += a[m,k] * b[k,n]`.
///
/// ikj order keeps the inner loop contiguous over `b` and `out` rows so it
/// autovectorizes; summation order is fixed, which keeps runs bit-identical.
pub(crate) fn matmul_accum<E: Element>(
    a: &[E],
    b: &[E],
    out: &mut [E],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_ip * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b^T` where `b` is `[n,k]`.
pub(crate) fn matmul_bt_accum<E: Element>(
    a: &[E],
    b: &[E],
    out: &mut [E],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&x, &y) in a_row.iter().zip(b_row.iter()) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out[k,n] += a^T * b` where `a` is `[m,k]`, `b` is `[m,n]`.
pub(crate) fn matmul_at_accum<E: Element>(
    a: &[E],
    b: &[E],
    out: &mut [E],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_ip * bv;
            }
        }
    }
}
