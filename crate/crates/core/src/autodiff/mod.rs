//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Values
//! are immutable once recorded; [`Graph::backward`] replays the record in
//! reverse and accumulates gradients on tracked leaves. A graph supports one
//! backward pass per [`Graph::zero_grad`].

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, grad_check_with_step, GradCheckReport};
pub(crate) use ops::sigmoid as sigmoid_scalar;

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    graph: u32,
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

pub struct Graph<T: Real = f32> {
    id: u32,
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
    backward_done: Cell<bool>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records backward closures for tracked values.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A graph that only evaluates; nothing is tracked.
    pub fn no_grad() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            recording,
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) {
        assert_eq!(v.graph, self.id, "Var used on a graph that did not create it");
    }

    fn insert(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { id: nodes.len() - 1, graph: self.id }
    }

    /// Registers a gradient-tracked leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.insert(Node {
            value: Rc::new(value),
            requires_grad: self.recording,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Registers an untracked input.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.constant_rc(Rc::new(value))
    }

    pub(crate) fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var {
        self.insert(Node { value, requires_grad: false, parents: Vec::new(), backward: None })
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant_rc(value)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.check(v);
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.check(v);
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v);
        self.nodes.borrow()[v.id].requires_grad
    }

    /// Records a derived value. `backward` maps the output gradient to one
    /// optional gradient per parent, in order; it is kept only when some
    /// parent is tracked.
    pub fn push<F>(&self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        self.push_rc(Rc::new(value), parents, backward)
    }

    pub(crate) fn push_rc<F>(&self, value: Rc<Tensor<T>>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        parents.iter().for_each(|&p| self.check(p));
        let tracked = self.recording && parents.iter().any(|&p| self.requires_grad(p));
        if !tracked {
            return self.constant_rc(value);
        }
        self.insert(Node {
            value,
            requires_grad: true,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
        })
    }

    /// Accumulates d`loss`/d`leaf` for every tracked leaf reachable from a
    /// scalar `loss`. Calling it twice without [`Graph::zero_grad`] is an error.
    pub fn backward(&self, loss: Var) -> Result<()> {
        self.check(loss);
        if self.backward_done.get() {
            return Err(Error::Contract("backward called twice without zero_grad".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = back(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => acc.data_mut().iter_mut().zip(pg.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // keep leaf gradients only
        for (id, g) in grads.iter_mut().enumerate() {
            if nodes[id].backward.is_some() {
                *g = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    /// Gradient of the last backward pass for a tracked leaf, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.check(v);
        self.grads.borrow().get(v.id).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn independent_leaf_gets_zero_or_none() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones([2]));
        let y = g.leaf(Tensor::ones([2]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(g.grad(y).map_or(true, |t| t.max_abs() == 0.0));
    }

    #[test]
    fn repeated_backward_is_error_until_reset() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones([2]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Contract(_))));
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones([2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x^2
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let g = Graph::<f32>::no_grad();
        let x = g.leaf(Tensor::ones([2]));
        let y = g.scale(x, 2.0);
        assert!(!g.requires_grad(y));
        assert_eq!(g.value(y).data(), &[2.0, 2.0]);
    }
}
