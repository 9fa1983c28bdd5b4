//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Forward operations build a computation graph: each result holds its
//! inputs and enough saved context to run the chain rule. `backward` on a
//! scalar walks that graph in reverse creation order (creation order is a
//! valid topological order, since operands always exist before results),
//! accumulates `dL/dx` into every leaf created with `requires_grad`, and
//! then severs the graph so intermediate buffers free immediately.
//!
//! Tensors are immutable once created; the only interior mutability is the
//! gradient slot, which `backward` accumulates into and `zero_grad` clears.
//! Results of operations on all-constant inputs record no graph at all, so
//! inference-style code pays nothing for autodiff.
//!
//! Invariants the engine maintains (checked in debug builds):
//! * `data.len()` equals the product of `shape` at all times;
//! * all stored values are finite after any completed operation — inputs
//!   that would produce non-finite values (e.g. `ln` of a non-positive
//!   number) are rejected with an error instead.

mod backward;
mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport};
pub(crate) use ops::Op;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) struct Inner<F: Scalar> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<F>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<F>>>,
    pub(crate) op: RefCell<Option<Op<F>>>,
}

/// Handle to a node in the computation graph. Cloning is cheap (reference
/// count bump) and clones alias the same node.
pub struct Tensor<F: Scalar = f64> {
    pub(crate) inner: Rc<Inner<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    pub(crate) fn make(data: Vec<F>, shape: Vec<usize>, requires_grad: bool, op: Option<Op<F>>) -> Self {
        debug_assert_eq!(data.len(), numel_of(&shape), "data/shape mismatch");
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value stored in tensor (shape {shape:?})"
        );
        // A graph is only worth recording if a gradient can flow out of it.
        let op = if requires_grad { op } else { None };
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                op: RefCell::new(op),
            }),
        }
    }

    /// Constant (non-differentiable) tensor from raw data.
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel_of(shape) {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("from_vec: non-finite input value".into()));
        }
        Ok(Tensor::make(data, shape.to_vec(), false, None))
    }

    /// Convenience wrapper over [`Tensor::from_vec`] for f64 literals.
    pub fn from_f64s(data: &[f64], shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(data.iter().map(|&v| F::of(v)).collect(), shape)
    }

    /// Trainable leaf: participates in `backward` and accumulates a gradient.
    pub fn param(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(Tensor::make(t.inner.data.clone(), t.inner.shape.clone(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::make(vec![F::zero(); numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Tensor::make(vec![v; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(v: F) -> Self {
        Tensor::make(vec![v], Vec::new(), false, None)
    }

    pub fn scalar_param(v: F) -> Self {
        Tensor::make(vec![v], Vec::new(), true, None)
    }

    /// I.i.d. standard normal draws; a constant with respect to the graph.
    pub fn gaussian(rng: &mut Rng, shape: &[usize]) -> Self {
        let data = (0..numel_of(shape)).map(|_| F::of(rng.gaussian())).collect();
        Tensor::make(data, shape.to_vec(), false, None)
    }

    /// Gaussian-initialized trainable leaf with standard deviation `std`.
    pub fn randn_param(rng: &mut Rng, shape: &[usize], std: f64) -> Self {
        let data = (0..numel_of(shape)).map(|_| F::of(rng.gaussian() * std)).collect();
        Tensor::make(data, shape.to_vec(), true, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.inner.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("numel {} != 1", self.numel())));
        }
        Ok(self.inner.data[0])
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Multiply the accumulated gradient in place (no-op when there is
    /// none). Used by global-norm clipping.
    pub fn scale_grad(&self, factor: F) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            for v in g {
                *v = *v * factor;
            }
        }
    }

    /// Same values, detached from the graph, never differentiable.
    pub fn detach(&self) -> Self {
        Tensor::make(self.inner.data.clone(), self.inner.shape.clone(), false, None)
    }

    /// Same values as a fresh trainable leaf (used by the optimizer when it
    /// produces updated parameters).
    pub fn reparam(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        Tensor::param(data, shape)
    }

    /// Do two handles alias the same graph node?
    pub fn same_node(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[F]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi = *gi + *ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<String> =
            self.inner.data.iter().take(8).map(|v| format!("{v}")).collect();
        write!(
            f,
            "Tensor{:?}[{}{}]",
            self.inner.shape,
            preview.join(", "),
            if self.numel() > 8 { ", ..." } else { "" }
        )
    }
}
