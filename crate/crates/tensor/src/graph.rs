use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::real::Real;
use crate::tensor::Tensor;

/// Computes the gradients of a node's parents from the node's output gradient.
///
/// The `needs` slice tells which parents require a gradient; entries for the others
/// may be returned as `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// A recording of tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so ids are already a topological order.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node inside a [`Graph`].
pub struct Var<'g, T> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T> Copy for Var<'_, T> {}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Leaf that receives a gradient.
    pub fn input(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf_arc(Arc::new(t), true)
    }

    /// Leaf without gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf_arc(Arc::new(t), false)
    }

    pub fn leaf_arc(&self, t: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node { value: t, parents: Vec::new(), requires_grad, backward: None })
    }

    pub(crate) fn op(&self, value: Tensor<T>, parents: &[usize], backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Node { value: Arc::new(value), parents: parents.to_vec(), requires_grad, backward })
    }

    pub(crate) fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from `root`, seeded with `seed` (ones for a scalar root if `None`).
    pub fn backward_with(&self, root: Var<'_, T>, seed: Option<Tensor<T>>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let n = root.id + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let seed = seed.unwrap_or_else(|| Tensor::ones(nodes[root.id].value.shape()));
        assert_eq!(seed.shape(), nodes[root.id].value.shape(), "backward seed shape mismatch");
        grads[root.id] = Some(seed);
        for id in (0..n).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else { continue };
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        // interior gradients were taken above; only leaf gradients remain
        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| if nodes[i].parents.is_empty() && nodes[i].requires_grad { g } else { None })
            .collect();
        Grads { grads: leaves }
    }
}

/// Gradients of the leaves of a graph after a backward pass.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros of its shape when no path reached it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn backward(&self) -> Grads<T> {
        self.graph.backward_with(*self, None)
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.leaf_arc(self.value(), false)
    }
}
