use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees when the tape is replayed.
pub(crate) struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    leaf: bool,
}

/// Computation tape for reverse-mode differentiation.
///
/// Every operation appends one node holding its forward value. `backward`
/// replays the nodes in reverse recording order, each exactly once. A graph is
/// meant to live for a single optimisation step; drop it or call [`clear`]
/// afterwards.
///
/// [`clear`]: Graph::clear
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    nearest_tie: Option<f64>,
    nearest_activation_kink: Option<f64>,
}

/// Kinds of non-differentiable point an operation can sit near.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kink {
    /// Selection ties (max-pooling, top-k) and clamp boundaries.
    Tie,
    /// Piecewise-linear activation breakpoints.
    Activation,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            nearest_tie: None,
            nearest_activation_kink: None,
        }
    }

    /// A graph that records values only; no backward rules are retained.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.nearest_tie = None;
        self.nearest_activation_kink = None;
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, self.grad_enabled)
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            leaf: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Smallest distance seen so far between a selection's chosen entries and
    /// the runner-up, or between a clamped quantity and its clamp bound.
    pub fn nearest_tie(&self) -> Option<f64> {
        self.nearest_tie
    }

    /// Smallest magnitude of any activation input seen so far.
    pub fn nearest_activation_kink(&self) -> Option<f64> {
        self.nearest_activation_kink
    }

    pub(crate) fn note_kink(&mut self, kind: Kink, distance: T) {
        if !self.grad_enabled {
            return;
        }
        let d = distance.to_f64().unwrap_or(f64::INFINITY);
        let slot = match kind {
            Kink::Tie => &mut self.nearest_tie,
            Kink::Activation => &mut self.nearest_activation_kink,
        };
        *slot = Some(slot.map_or(d, |k| k.min(d)));
    }

    /// Records an operation result. The backward rule is kept only when some
    /// parent is differentiable.
    pub(crate) fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            leaf: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must hold one value, has shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(root.value.shape().to_vec()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = rule(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[parent.0].value.shape());
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !(node.leaf && node.requires_grad) {
                grads[id] = None;
            } else if grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of differentiable leaves, produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_tracked_leaf_receives_a_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::<f64>::full(vec![2], 3.0));
        let unused = g.param(Tensor::<f64>::ones(vec![3]));
        let c = g.constant(Tensor::<f64>::ones(vec![2]));
        let p = g.mul(a, c).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), [1.0, 1.0]);
        assert_eq!(grads.get(unused).unwrap().data(), [0.0, 0.0, 0.0]);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_none());
    }

    #[test]
    fn shared_nodes_accumulate() {
        let mut g = Graph::new();
        let a = g.param(Tensor::<f64>::full(vec![1], 2.0));
        let sq = g.mul(a, a).unwrap();
        let s = g.add(sq, a).unwrap();
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), [5.0]);
    }

    #[test]
    fn loss_must_be_a_single_value() {
        let mut g = Graph::new();
        let a = g.param(Tensor::<f64>::ones(vec![2]));
        assert!(matches!(g.backward(a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn inference_graphs_record_no_gradients() {
        let mut g = Graph::<f64>::inference();
        let a = g.param(Tensor::ones(vec![2]));
        assert!(!g.requires_grad(a));
        let l = g.sum(a);
        assert!(g.backward(l).unwrap().get(a).is_none());
    }

    #[test]
    fn clear_and_truncate() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::ones(vec![2]));
        let mark = g.len();
        let _ = g.sum(a);
        g.note_kink(Kink::Tie, 0.5);
        assert_eq!(g.nearest_tie(), Some(0.5));
        g.truncate(mark);
        assert_eq!(g.len(), 1);
        g.clear();
        assert!(g.is_empty());
        assert_eq!(g.nearest_tie(), None);
    }
}
