//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to a shape, a data buffer and an
//! optional gradient accumulator. Operations record a backward closure on the
//! output node when any input participates in differentiation; calling
//! [`Tensor::backward`] on a scalar output walks the graph in reverse
//! topological order and accumulates gradients into every reachable tensor
//! that requested them.
//!
//! Evaluation is single-threaded and allocation order is fixed, so identical
//! inputs produce bitwise identical outputs and gradients.

mod gradcheck;
mod ops;

pub use gradcheck::grad_check;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Result, TfkError};
use crate::scalar::Real;

thread_local! {
    static TAPE_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables gradient recording for the lifetime of the guard.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = TAPE_ENABLED.with(|t| t.replace(false));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        TAPE_ENABLED.with(|t| t.set(self.prev));
    }
}

pub(crate) fn tape_enabled() -> bool {
    TAPE_ENABLED.with(|t| t.get())
}

type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>])>;

struct Node<T: Real> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<T>>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    node: RefCell<Option<Node<T>>>,
}

/// N-dimensional real tensor participating in the gradient tape.
pub struct Tensor<T: Real>(Rc<Inner<T>>);

impl<T: Real> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(", "))
}

impl<T: Real> Tensor<T> {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        node: Option<Node<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Inner {
            shape,
            data: Rc::new(RefCell::new(data)),
            grad: RefCell::new(None),
            requires_grad,
            node: RefCell::new(node),
        }))
    }

    /// Leaf tensor from a shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TfkError::dim(
                "from_vec",
                format!("{} elements for shape {}", expected, fmt_shape(shape)),
                format!("{} elements", data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TfkError::dim(
                "from_vec",
                "positive extents",
                fmt_shape(shape),
            ));
        }
        Ok(Self::new_inner(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![T::zero(); n], false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![v; n], false, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::new_inner(vec![1], vec![v], false, None)
    }

    /// Marks a leaf tensor as a gradient target. Consumes and returns the
    /// handle so construction reads as `Tensor::from_vec(..)?.with_grad()`.
    pub fn with_grad(self) -> Self {
        debug_assert!(
            self.0.node.borrow().is_none(),
            "with_grad is for leaf tensors"
        );
        Tensor(Rc::new(Inner {
            shape: self.0.shape.clone(),
            data: Rc::clone(&self.0.data),
            grad: RefCell::new(None),
            requires_grad: true,
            node: RefCell::new(None),
        }))
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = tape_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Self::new_inner(shape, data, true, Some(Node { parents, backward }))
        } else {
            Self::new_inner(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Copy of the underlying buffer.
    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// Runs `f` over the raw data without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.0.data.borrow())
    }

    /// Mutates the raw data in place (parameter updates, finite differences).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [T]) -> R) -> R {
        f(&mut self.0.data.borrow_mut())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Accumulates `add` into the gradient buffer (no-op unless the tensor
    /// requires grad).
    pub(crate) fn accum_grad(&self, add: &[T]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![T::zero(); self.len()]);
        for (gi, ai) in g.iter_mut().zip(add.iter()) {
            *gi += *ai;
        }
    }

    /// Runs `f` over the (zero-initialized) gradient buffer for in-place
    /// accumulation; no-op unless the tensor requires grad.
    pub(crate) fn with_grad_mut(&self, f: impl FnOnce(&mut [T])) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![T::zero(); self.len()]);
        f(g);
    }

    /// New leaf holding a copy of this tensor's current values.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_inner(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Reverse-mode differentiation from a scalar output.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TfkError::contract(
                "backward",
                format!("expected scalar output, got shape {}", fmt_shape(self.shape())),
            ));
        }
        if !self.0.requires_grad {
            return Err(TfkError::contract(
                "backward",
                "output does not require grad".to_string(),
            ));
        }

        // Post-order DFS over parent edges gives a topological order.
        let mut topo: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<*const ()> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.0) as *const ());
        while let Some((t, child_idx)) = stack.pop() {
            let next_child = {
                let node = t.0.node.borrow();
                node.as_ref().and_then(|n| {
                    n.parents[child_idx..]
                        .iter()
                        .enumerate()
                        .find(|(_, p)| {
                            p.requires_grad()
                                && !visited.contains(&(Rc::as_ptr(&p.0) as *const ()))
                        })
                        .map(|(off, p)| (child_idx + off, p.clone()))
                })
            };
            match next_child {
                Some((idx, child)) => {
                    visited.insert(Rc::as_ptr(&child.0) as *const ());
                    stack.push((t, idx + 1));
                    stack.push((child, 0));
                }
                None => topo.push(t),
            }
        }

        self.accum_grad(&[T::one()]);
        for t in topo.iter().rev() {
            let node = t.0.node.borrow();
            if let Some(n) = node.as_ref() {
                let g = t
                    .0
                    .grad
                    .borrow()
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); t.len()]);
                (n.backward)(&g, &n.parents);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_invariant_is_enforced() {
        let err = Tensor::<f64>::from_vec(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TfkError::Dim { .. }));
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(Tensor::<f64>::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let y = x.scale(2.0);
        assert!(y.backward().is_err());
    }

    #[test]
    fn grad_accumulates_over_multiple_uses() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let y = x.add(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn no_grad_guard_suppresses_recording() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let _guard = NoGradGuard::new();
        let y = x.scale(3.0);
        assert!(!y.requires_grad());
    }
}
