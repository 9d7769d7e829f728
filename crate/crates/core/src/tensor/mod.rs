//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation produces a new immutable [`Tensor`]. When at least one
//! operand requires a gradient, the result keeps handles to its operands and
//! a backward closure mapping the upstream gradient to one gradient per
//! operand. [`Tensor::backward`] walks the graph in reverse topological order
//! from a scalar root and accumulates into each node's `grad` buffer.
//!
//! Graphs are single-threaded (`Rc`), and every kernel reduces in a fixed
//! sequential order, so identical inputs give bit-identical outputs.

mod gradcheck;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use gradcheck::{grad_check, grad_check_per_input, GRAD_CHECK_STEP};
pub use ops::inverse_permutation;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a node in a differentiation graph. Cloning is cheap.
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Test hook: scale every gradient produced by the named op's backward rule
/// by 1.5 on the current thread. `None` restores correct behavior.
pub fn inject_backward_fault(op: Option<&'static str>) {
    BACKWARD_FAULT.with(|f| f.set(op));
}

fn backward_fault() -> Option<&'static str> {
    BACKWARD_FAULT.with(|f| f.get())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Leaf tensor. Fails when `shape` has a zero dimension or does not
    /// match the buffer length.
    pub fn new(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::Dimension {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::leaf(shape.to_vec(), data, requires_grad))
    }

    pub fn constant(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::new(shape, data, false)
    }

    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::new(shape, data, true)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![T::zero(); numel(shape)], false)
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![1], vec![v], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            op: "leaf",
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Result of an op. The backward closure is only retained when some
    /// parent needs a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "op {op}");
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward): (Vec<Tensor<T>>, Option<BackwardFn<T>>) = if requires_grad {
            (parents, Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            op,
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn grad_vec(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    /// Same values, detached from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node<T> {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode pass from a scalar. Populates `grad` on every reachable
    /// tensor that requires one; repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward() requires a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        accumulate(&self.0.grad, vec![T::one()]);
        let fault = backward_fault();

        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let upstream = match node.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let mut grads = backward(&upstream);
            debug_assert_eq!(grads.len(), node.0.parents.len(), "op {}", node.0.op);
            if fault == Some(node.0.op) {
                for g in grads.iter_mut().flatten() {
                    g.iter_mut().for_each(|v| *v *= T::of(1.5));
                }
            }
            for (parent, g) in node.0.parents.iter().zip(grads) {
                if let Some(g) = g {
                    if parent.requires_grad() {
                        accumulate(&parent.0.grad, g);
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes requiring gradients.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.parents.iter().rev() {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

fn accumulate<T: Scalar>(slot: &RefCell<Option<Vec<T>>>, g: Vec<T>) {
    let mut slot = slot.borrow_mut();
    match slot.as_mut() {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(matches!(
            Tensor::<f64>::new(&[2, 3], vec![0.0; 5], false),
            Err(Error::Dimension { .. })
        ));
        assert!(Tensor::<f64>::new(&[0, 3], vec![], false).is_err());
    }

    #[test]
    fn backward_reaches_every_trainable_node() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let y = x.mul(&x).unwrap();
        let z = y.sum();
        z.backward().unwrap();
        assert_eq!(*x.grad().unwrap(), vec![2.0, 4.0]);
        assert_eq!(*y.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Tensor::param(&[1], vec![3.0f64]).unwrap();
        let y = x.add(&x).unwrap().mul(&x).unwrap().sum();
        y.backward().unwrap();
        // d/dx 2x^2 = 4x
        assert_eq!(x.grad().unwrap()[0], 12.0);
    }

    #[test]
    fn non_scalar_backward_is_a_contract_error() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_do_not_build_graph() {
        let a = Tensor::constant(&[2], vec![1.0f32, 2.0]).unwrap();
        let b = a.add(&a).unwrap();
        assert!(!b.requires_grad());
        assert!(b.0.parents.is_empty());
    }
}
