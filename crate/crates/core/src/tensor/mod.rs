//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Values are row-major, immutable once created, and cheap to clone (the
//! buffer is reference-counted). Operations executed while gradients are
//! enabled record themselves on a thread-local tape; [`backward`] replays
//! that tape in reverse and accumulates gradients into every participant
//! that requires them. The tape is rebuilt on every forward pass.

use std::fmt;
use std::sync::{Arc, Mutex};

use thiserror::Error;

mod batchnorm;
pub mod checkpoint;
mod ops;

pub use batchnorm::{batchnorm2d, BnBatchStats, BnMode, BnStats, BN_EPS, BN_MOMENTUM};
pub use ops::{backward, grad_enabled, no_grad, stack, tape_len, triangular_surrogate};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("shape {shape:?} implies {expected} elements, data has {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: loss does not require grad (not connected to the tape)")]
    LossNotOnTape,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

struct Inner {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
}

/// Dense n-dimensional f64 tensor. Scalars use shape `[1]`.
///
/// Values are immutable after construction, so tensors move freely between
/// threads; only the gradient slot is synchronized.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub(crate) fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor::new_shared(shape, Arc::new(data), requires_grad)
    }

    /// Shares an existing buffer; reshapes and detaches cost a refcount.
    pub(crate) fn new_shared(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
            }),
        }
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.inner.data)
    }

    /// Non-differentiable tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected = numel(shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor::new(shape.to_vec(), data, false))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(t.requires_grad_(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![1.0; numel(shape)], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::new(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value], false)
    }

    /// Returns a leaf copy with the given `requires_grad` flag; grads cleared.
    pub fn requires_grad_(&self, requires_grad: bool) -> Self {
        Tensor::new_shared(self.inner.shape.clone(), self.data_arc(), requires_grad)
    }

    /// Leaf copy detached from the tape.
    pub fn detach(&self) -> Self {
        self.requires_grad_(false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Current accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Accumulates into a contiguous sub-range only; the rest of a fresh
    /// gradient buffer stays zero. Used by slicing ops so a T-step unroll
    /// does not pay T full-tensor additions.
    pub(crate) fn accumulate_grad_region(&self, offset: usize, g: &[f64]) {
        debug_assert!(offset + g.len() <= self.numel());
        let mut slot = self.inner.grad.lock().unwrap();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        for (e, v) in buf[offset..offset + g.len()].iter_mut().zip(g) {
            *e += v;
        }
    }

    pub(crate) fn grad_clone(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    /// True when the two handles share the same underlying buffer.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// True when every element is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.inner.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Fraction of elements equal to 1.0 (callers check `is_binary` first).
    pub fn mean_value(&self) -> f64 {
        if self.inner.data.is_empty() {
            return 0.0;
        }
        self.inner.data.iter().sum::<f64>() / self.inner.data.len() as f64
    }

    /// Element at the given multi-index; test and export helper.
    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.rank());
        let st = strides(&self.inner.shape);
        let mut off = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(self.inner.shape.iter()).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (len {dim})");
            off += ix * st[i];
        }
        self.inner.data[off]
    }
}
