//! Dense-tensor numerical core with reverse-mode automatic differentiation.
//!
//! Tensors are row-major `f64` buffers with a shape. Operations build a
//! define-by-run graph: each result keeps handles to its inputs and a closure
//! that routes the upstream gradient to them. [`backward`](Tensor::backward)
//! walks that graph once in reverse topological order.
//!
//! The graph is rebuilt on every forward pass, which keeps variable-length
//! sequence models simple. There is no broadcasting beyond leading batch
//! dims, no views, and no implicit type promotion: every op checks shapes and
//! returns a dimension error on mismatch.
//!
//! Within one forward/backward pass everything is single-threaded. Distinct
//! model replicas can live on distinct threads; tensors are deliberately not
//! `Send`.

mod checkpoint;
mod ops;

pub use checkpoint::{average_entries, Checkpoint, CheckpointEntry};
pub use ops::*;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with gradient recording disabled on this thread.
///
/// Ops executed inside produce plain leaves with no graph attached, which is
/// what inference and finite-difference probes want.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let guard = Guard(GRAD_ENABLED.with(|c| c.replace(false)));
    let out = f();
    drop(guard);
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

type BackwardFn = Box<dyn Fn(&Tensor, &[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to a node of the autodiff graph.
///
/// Cloning is cheap and aliases the same storage; parameters stay alive as
/// long as the model holds them, while intermediate nodes are dropped with
/// the loss tensor after each step.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_inner(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Leaf tensor that does not require gradients.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::new_inner(data, shape.to_vec(), false, vec![], None))
    }

    /// Leaf parameter that accumulates gradients.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::new_inner(data, shape.to_vec(), true, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_inner(vec![0.0; n], shape.to_vec(), false, vec![], None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::new_inner(vec![v], vec![1], false, vec![], None)
    }

    pub(crate) fn result(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let tracked = grad_enabled() && parents.iter().any(|p| p.tracked());
        if tracked {
            Self::new_inner(data, shape, false, parents, Some(backward))
        } else {
            Self::new_inner(data, shape, false, vec![], None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True if gradients flow through or into this node.
    pub fn tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.backward.is_some()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer (optimizer updates, init).
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn value(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        debug_assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Populates `grad` on every `requires_grad` leaf reachable from `self`.
    /// Repeated calls without zeroing accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }

        // Iterative post-order DFS: parents land before children, so the
        // reversed list visits each node after all of its consumers.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, idx)) = stack.pop() {
            if idx < node.inner.parents.len() {
                let parent = node.inner.parents[idx].clone();
                stack.push((node, idx + 1));
                if visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let Some(backward) = node.inner.backward.as_ref() else {
                continue;
            };
            let upstream = node.inner.grad.borrow().clone();
            let Some(upstream) = upstream else { continue };
            backward(node, &upstream);
            if !node.inner.requires_grad {
                // Intermediate grads are no longer needed.
                *node.inner.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }
}

/// Shape-checking helper shared by the ops.
pub(crate) fn expect_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let loss = sum(&x);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = sum(&mul(&x, &x).unwrap());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(x.backward().is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = sum(&x);
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn shared_node_accumulates_once_per_path() {
        // y = x + x => dy/dx = 2
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let y = add(&x, &x).unwrap();
        let loss = sum(&y);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = no_grad(|| mul(&x, &x).unwrap());
        assert!(!y.tracked());
    }
}
