//! From-scratch numerical kernels for the 1-D network: tensors, forward
//! passes, and hand-derived backward passes for every operation the model
//! uses. No framework, no generic autodiff — each layer caches what its
//! backward pass needs during a training-mode forward.
//!
//! Everything is generic over [`Scalar`] so the same code runs in f32 for
//! training/inference and in f64 for finite-difference gradient checking.

mod kernels;
mod layers;

pub use kernels::{
    conv1d_forward, cross_entropy_from_logits, linear_forward, softmax, softmax_in_place,
    ActivationKind, ConvSpec,
};
pub use layers::{
    Activation, AffineModality, BatchNorm1d, Conv1d, GlobalAvgPool, Linear,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("affine modality transform needs an even width, got {0}")]
    OddWidth(usize),
    #[error("backward called without a recorded training-mode forward")]
    GraphNotRecorded,
}

/// Floating-point element type. f32 is the training/inference precision;
/// f64 exists for gradient checking.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense (batch, channels, width) container in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    n: usize,
    c: usize,
    w: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(n: usize, c: usize, w: usize) -> Self {
        Self {
            n,
            c,
            w,
            data: vec![S::zero(); n * c * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, w: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), n * c * w, "tensor data length mismatch");
        Self { n, c, w, data }
    }

    /// Single-sample (1, 1, len) tensor from a flat slice.
    pub fn from_window(values: &[S]) -> Self {
        Self::from_vec(1, 1, values.len(), values.to_vec())
    }

    pub fn batch(&self) -> usize {
        self.n
    }
    pub fn channels(&self) -> usize {
        self.c
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn data(&self) -> &[S] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, b: usize, ch: usize) -> &[S] {
        let start = (b * self.c + ch) * self.w;
        &self.data[start..start + self.w]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, ch: usize) -> &mut [S] {
        let start = (b * self.c + ch) * self.w;
        &mut self.data[start..start + self.w]
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.n, self.c, self.w)
    }

    /// Stack single-sample windows into one batch tensor.
    pub fn stack_windows(windows: &[&[S]]) -> Self {
        assert!(!windows.is_empty());
        let w = windows[0].len();
        let mut data = Vec::with_capacity(windows.len() * w);
        for win in windows {
            assert_eq!(win.len(), w);
            data.extend_from_slice(win);
        }
        Self::from_vec(windows.len(), 1, w, data)
    }
}

/// A named trainable tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub grad: Vec<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<S>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(data.len(), numel, "param data length mismatch");
        Self {
            name: name.into(),
            shape,
            data,
            grad: vec![S::zero(); numel],
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(name, shape, vec![S::zero(); numel])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}

/// Forward-pass mode: training caches intermediates and updates batch-norm
/// running statistics; inference touches nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
