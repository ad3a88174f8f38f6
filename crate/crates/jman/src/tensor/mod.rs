//! Dense f64 tensor core with reverse-mode automatic differentiation.
//!
//! Tensors are rank-1 vectors or rank-2 row-major matrices; scalars are
//! length-1 vectors. Operations live on a [`Tape`]: the forward pass records
//! each executed op in order, and [`Tape::backward`] replays the record in
//! reverse, accumulating gradients into every reachable tensor that was
//! created with `requires_grad`. Gradient accumulation is additive; call
//! [`Tensor::zero_grad`] (or [`zero_grads`]) between optimizer steps.
//!
//! A tape and the tensors attached to it belong to one execution context for
//! the duration of a forward/backward pass. Detached tensors (constants,
//! parameters between passes) are plain values.

mod adam;
pub mod gradcheck;
mod tape;

pub use adam::AdamState;
pub use tape::Tape;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Shape of a tensor: rank 1 or rank 2. Matrices are row-major.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Shape::Vector(_) => 1,
            Shape::Matrix(_, _) => 2,
        }
    }

    /// Rows and columns, treating a vector as a single row.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        match *self {
            Shape::Vector(n) => (1, n),
            Shape::Matrix(r, c) => (r, c),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

struct TensorInner {
    shape: Shape,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Vec<f64>>,
    requires_grad: bool,
}

/// Shared handle to a dense f64 array, optionally participating in gradient
/// accumulation. Cloning is cheap and aliases the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &*self.data())
            .finish()
    }
}

impl Tensor {
    fn new(shape: Shape, data: Vec<f64>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        let grad = if requires_grad { vec![0.0; data.len()] } else { Vec::new() };
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(grad),
                requires_grad,
            }),
        }
    }

    /// Constant rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(Shape::Vector(n), data, false)
    }

    /// Constant rank-2 tensor (row-major).
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix [{rows}x{cols}] needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor::new(Shape::Matrix(rows, cols), data, false))
    }

    /// Constant scalar, stored as a length-1 vector.
    pub fn scalar(value: f64) -> Self {
        Tensor::vector(vec![value])
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::new(shape, vec![0.0; shape.numel()], false)
    }

    /// Leaf tensor that accumulates gradients: a trainable parameter.
    pub fn parameter(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension(format!(
                "parameter {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor::new(shape, data, true))
    }

    pub(crate) fn result(shape: Shape, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor::new(shape, data, requires_grad)
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Two handles alias the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar (length-1) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.inner.data.borrow()[idx]
    }

    /// Overwrite one coordinate in place. Used by optimizers and the
    /// finite-difference checker; never call during an active forward pass.
    pub fn set(&self, idx: usize, value: f64) {
        self.inner.data.borrow_mut()[idx] = value;
    }

    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    pub fn grad(&self) -> Vec<f64> {
        if !self.inner.requires_grad {
            return vec![0.0; self.numel()];
        }
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        if self.inner.requires_grad {
            for g in self.inner.grad.borrow_mut().iter_mut() {
                *g = 0.0;
            }
        }
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut g = self.inner.grad.borrow_mut();
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub(crate) fn with_grad<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> Option<R> {
        if !self.inner.requires_grad {
            return None;
        }
        Some(f(&mut self.inner.grad.borrow_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}

/// Zero the gradient buffers of every tensor in `params`.
pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a Tensor>) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests;
