//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value and, when any
//! input needs a gradient, a closure that maps the node's output gradient to
//! gradients of its inputs. `backward` walks the tape once in reverse.
//! Nodes whose gradient never materialises are skipped entirely, which is
//! what keeps unselected ladder rungs free during the backward pass.

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &Values<'_, T>, &mut Grads<T>)>;

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Read-only view of forward values handed to backward closures.
pub struct Values<'a, T: Real> {
    nodes: &'a [Node<T>],
}

impl<T: Real> Values<'_, T> {
    pub fn get(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }
}

/// Gradient accumulators indexed by node.
pub struct Grads<T: Real> {
    slots: Vec<Option<Vec<T>>>,
    needs: Vec<bool>,
    lens: Vec<usize>,
}

impl<T: Real> Grads<T> {
    /// Mutable gradient buffer for `v`, zero-initialised on first touch.
    /// Returns `None` when `v` does not need a gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.needs[v.0] {
            return None;
        }
        let len = self.lens[v.0];
        Some(self.slots[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    pub fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }
}

/// A recording of forward computation.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Leaves with `requires_grad` keep their gradient after `backward`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op output. The backward closure is dropped when no input needs a gradient.
    pub(crate) fn push(&mut self, value: Tensor<T>, inputs: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, backward: requires_grad.then_some(backward) });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from the scalar `loss`. Gradients are retained for leaves only.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let n = loss.0 + 1;
        let mut grads = Grads {
            slots: (0..n).map(|_| None).collect(),
            needs: self.nodes[..n].iter().map(|x| x.requires_grad).collect(),
            lens: self.nodes[..n].iter().map(|x| x.value.numel()).collect(),
        };
        if !grads.needs[loss.0] {
            self.grads = (0..self.nodes.len()).map(|_| None).collect();
            return Ok(());
        }
        grads.slots[loss.0] = Some(vec![T::one()]);
        let values = Values { nodes: &self.nodes[..n] };
        let mut kept: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..n).rev() {
            let Some(g) = grads.slots[i].take() else {
                continue;
            };
            match &self.nodes[i].backward {
                Some(bw) => bw(&g, &values, &mut grads),
                None => kept[i] = Some(g),
            }
        }
        self.grads = kept;
        Ok(())
    }

    /// Gradient of the last `backward` loss w.r.t. leaf `v`, if any flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Graph::grad`] but zeros when nothing reached `v`.
    pub fn grad_or_zero(&self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }
}
