//! Dense tensors and a tape-based reverse-mode automatic differentiation engine.
//!
//! The engine is deliberately small: every operation works on row-major
//! buffers, there is no broadcasting beyond adding a rank-1 bias over the
//! last dimension, and gradients are accumulated by replaying the tape in
//! reverse. Parameters live outside the tape (see [`ParamStore`]) and are
//! registered as leaves on every forward pass.

mod gemm;
pub mod gradcheck;
mod params;
mod tape;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{BatchNormMode, Gradients, Tape, Var};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + MulAssign
    + SubAssign
    + 'static
{
    /// `C <- alpha * A B + beta * C` over strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices of
    /// the given extents. See `matrixmultiply::sgemm`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Lossless-enough conversion from a literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// The operation kinds the tape knows how to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale,
    Sigmoid,
    Tanh,
    Relu,
    Concat,
    Slice,
    Reshape,
    EmbeddingLookup,
    DropoutMaskApply,
    BatchNorm,
    MaxOverTime,
    MeanOverTime,
    SumOverTime,
    Maximum,
    ScaleRows,
    SoftmaxCrossEntropy,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::EmbeddingLookup,
        OpKind::DropoutMaskApply,
        OpKind::BatchNorm,
        OpKind::MaxOverTime,
        OpKind::MeanOverTime,
        OpKind::SumOverTime,
        OpKind::Maximum,
        OpKind::ScaleRows,
        OpKind::SoftmaxCrossEntropy,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::EmbeddingLookup => "embedding_lookup",
            OpKind::DropoutMaskApply => "dropout_mask_apply",
            OpKind::BatchNorm => "batch_norm",
            OpKind::MaxOverTime => "max_over_time",
            OpKind::MeanOverTime => "mean_over_time",
            OpKind::SumOverTime => "sum_over_time",
            OpKind::Maximum => "maximum",
            OpKind::ScaleRows => "scale_rows",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Sum => "sum",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: OpKind, detail: String },
    #[error("batch_norm in training mode needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub(crate) fn shape_err(op: OpKind, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Row-major n-dimensional array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Invalid(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("positive extents")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self::full([1], value)
    }

    /// Samples each element from `uniform(lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.random_range(lo..hi))).collect();
        Self::new(shape, data).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
        self
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<T>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.data.len()));
        self.grad = grad;
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor; rank-1 tensors are treated as one row.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [c] => Some((1, *c)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(shape_err(
                OpKind::Reshape,
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN)))
                .collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }
}

/// Draws an inverted-dropout mask: each entry is `0` with probability `p`,
/// else `1/(1-p)`. `p == 0` yields all ones and `p == 1` all zeros.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    if p <= 0.0 {
        return vec![T::one(); len];
    }
    if p >= 1.0 {
        return vec![T::zero(); len];
    }
    let keep = T::lit(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// Row-wise softmax of a rank-1 or rank-2 tensor, outside any tape.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = logits.dims2().expect("softmax_rows on rank-1/2 tensor");
    let mut out = logits.data().to_vec();
    for r in 0..rows {
        softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(Tensor::<f64>::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new([0], vec![]).is_err());
        assert!(Tensor::<f64>::new([2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn dropout_mask_degenerate_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout_mask::<f64, _>(16, 0.0, &mut rng).iter().all(|&m| m == 1.0));
        assert!(dropout_mask::<f64, _>(16, 1.0, &mut rng).iter().all(|&m| m == 0.0));
        let m = dropout_mask::<f64, _>(64, 0.5, &mut rng);
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..8).map(|i| 1.0 + i as f64).collect();
        let draws = 20_000;
        let mut acc = vec![0.0; x.len()];
        for _ in 0..draws {
            let m = dropout_mask::<f64, _>(x.len(), 0.5, &mut rng);
            for ((a, xi), mi) in acc.iter_mut().zip(&x).zip(&m) {
                *a += xi * mi;
            }
        }
        for (a, xi) in acc.iter().zip(&x) {
            let mean = a / draws as f64;
            assert!((mean - xi).abs() / xi < 0.02, "mean {mean} vs {xi}");
        }
    }

    #[test]
    fn softmax_rows_normalise() {
        let t = Tensor::<f64>::from_f64([2, 3], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = softmax_rows(&t);
        for r in 0..2 {
            let s: f64 = p.data()[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    }
}
