//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap-to-clone handle. Values are written once at
//! construction; only the gradient buffer (and, for parameters, the data
//! under an optimizer step) mutate afterwards. Operations live on
//! [`Graph`], which records a tape of backward closures; handles and
//! graphs are single-thread objects, and independent graphs may run on
//! separate threads.

mod conv;
mod graph;
mod norm;
mod sgd;

pub use graph::Graph;
pub use sgd::{clip_grad_norm, zero_grads, Sgd};

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: Cell<bool>,
}

/// Handle to a dense rank-N f32 array in the canonical batch-channels-
/// height-width layout, with an optional gradient buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

pub(crate) fn check_finite(data: &[f32], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape(format!("zero extent in {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        check_finite(&data, "from_vec")?;
        Ok(Self::raw(shape, data, false))
    }

    /// Leaf with `requires_grad = true`; the unit trained by the optimizers.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::raw(shape, vec![0.0; numel], false)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::raw(shape, vec![value; numel], false)
    }

    pub fn scalar(value: f32) -> Self {
        Self::raw(vec![1], vec![value], false)
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
            }),
        }
    }

    /// Copy of the values as a fresh constant leaf (no gradient tracking).
    pub fn detach(&self) -> Tensor {
        Self::raw(self.shape(), self.to_vec(), false)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    /// Read-only view of the values.
    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f32]) {
        debug_assert_eq!(contrib.len(), self.numel());
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            None => *g = Some(contrib.to_vec()),
        }
    }

    pub(crate) fn grad_finite(&self, op: &'static str) -> Result<()> {
        match self.inner.grad.borrow().as_ref() {
            Some(g) => check_finite(g, op),
            None => Ok(()),
        }
    }

    /// Overwrite the values in place. Used by the optimizer step; everything
    /// else treats tensor data as write-once.
    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        f(self.inner.data.borrow_mut().as_mut_slice());
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Stack same-shaped tensors into one batch along a new leading axis.
    /// Data-level helper (inputs are constants, not tracked).
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidShape("stack_batch of empty list".into()))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape() != shape {
                return Err(Error::InvalidShape(format!(
                    "stack_batch mismatch: {:?} vs {:?}",
                    t.shape(),
                    shape
                )));
            }
            data.extend_from_slice(&t.data());
        }
        let mut out_shape = Vec::with_capacity(shape.len() + 1);
        out_shape.push(items.len());
        out_shape.extend_from_slice(&shape);
        Ok(Tensor::raw(out_shape, data, false))
    }

    /// Clamp values into `[0, 1]`, returning a fresh constant tensor.
    pub fn clamp01(&self) -> Tensor {
        let data = self.to_vec().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Tensor::raw(self.shape(), data, false)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.inner.shape,
            self.requires_grad()
        )
    }
}
