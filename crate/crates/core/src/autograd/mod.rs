//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! A [`Graph`] records every operation of one forward pass. Each recorded node
//! keeps its value and, when any input requires a gradient, a closure that
//! maps the node's output gradient onto its inputs. [`Graph::backward`]
//! replays the closures in reverse creation order.
//!
//! Leaves created with `requires_grad = false` (frozen weights, data) never
//! receive gradients, and kernels skip the work for them; gradients still
//! flow *through* the operations that consume them.

mod kernels;
mod ops;

use std::cell::RefCell;

use crate::tensor::{Float, Tensor};

pub use kernels::{attention_forward, bilinear_taps, im2col};

type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &mut Grads<T>)>;

struct Node<T: Float> {
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Tape of one forward pass.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    graph: &'g Graph<T>,
    id: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
    needs: Vec<bool>,
}

impl<T: Float> Grads<T> {
    /// Whether node `id` wants a gradient at all.
    pub(crate) fn needs(&self, id: usize) -> bool {
        self.needs[id]
    }

    pub(crate) fn accumulate(&mut self, id: usize, g: Tensor<T>) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    /// A leaf node (parameter or input).
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an operation. `backward` is kept only if some parent needs a
    /// gradient.
    pub(crate) fn push<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: FnOnce(&Tensor<T>, &mut Grads<T>) + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagate from a single-element `loss`.
    ///
    /// Gradients of intermediate nodes are released once consumed; only
    /// leaves keep theirs.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        let mut nodes = self.nodes.borrow_mut();
        let n = nodes.len();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        let mut grads = Grads {
            grads: vec![None; n],
            needs: nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if !nodes[loss.id].requires_grad {
            return grads;
        }
        grads.grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let Some(bw) = nodes[id].backward.take() else {
                continue;
            };
            if let Some(g) = grads.grads[id].take() {
                bw(&g, &mut grads);
            }
        }
        grads
    }
}

impl<'g, T: Float> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }
}

#[cfg(test)]
mod tests;
