//! Dense f64 tensors with a reverse-mode differentiation tape.
//!
//! The op set is deliberately exactly what the network needs: matmul,
//! per-node 1D convolution, batch normalization, ReLU, dropout, global mean
//! pooling, a scalar affine head, and sigmoid cross-entropy. Gradients are
//! accumulated into `grad` on every `Tape::backward` call until zeroed.

mod adam;
mod kernels;
#[cfg(test)]
mod op_tests;
mod tape;

pub use adam::Adam;
pub use tape::{Mode, Tape};

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

/// Shared handle to an n-dimensional f64 array (row-major). Cloning is cheap
/// and aliases the same storage; tensors are not Send — parallel runs build
/// their own.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<TensorData>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                requires_grad: false,
                grad: None,
            })),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: consistent by construction")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar")
    }

    /// Marks this tensor as a trainable leaf.
    pub fn requires_grad(self) -> Self {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrowed view of the data; panics if a mutable borrow is live.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |d| d.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.borrow();
        assert_eq!(d.data.len(), 1, "item() on non-scalar tensor");
        d.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrites the stored values. Shape must match.
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.data.len(), data.len(), "set_data: length mismatch");
        d.data.copy_from_slice(data);
    }

    /// Applies `f(data, grad)` when a gradient is present (optimizer hook).
    pub fn with_data_and_grad(&self, f: impl FnOnce(&mut [f64], &[f64])) {
        let mut d = self.inner.borrow_mut();
        if let Some(grad) = d.grad.take() {
            f(&mut d.data, &grad);
            d.grad = Some(grad);
        }
    }

    /// Adds `delta` into the gradient buffer, allocating zeros if absent.
    pub fn accumulate_grad(&self, delta: &[f64]) {
        let mut d = self.inner.borrow_mut();
        let n = d.data.len();
        assert_eq!(n, delta.len(), "accumulate_grad: length mismatch");
        let grad = d.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, dv) in grad.iter_mut().zip(delta) {
            *g += dv;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, grad={})",
            d.shape,
            d.requires_grad,
            if d.grad.is_some() { "set" } else { "none" }
        )
    }
}
