//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes
//! are appended in evaluation order, so walking the tape backwards visits each
//! node after all of its consumers.

use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything an operator sees when propagating gradients to its inputs.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// Whether input `i` needs a gradient. Operators may skip work for inputs that do not.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one operator.
///
/// Returns one entry per input, in the order the inputs were passed to
/// [`Graph::push`]. `None` means "no gradient" and is only valid for inputs with
/// `needs[i] == false`.
pub type Backward<T> = dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<usize>,
    op: Option<Box<Backward<T>>>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input. Receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf. Its gradient is kept after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    #[inline]
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Append the result of an operator. The backward closure is dropped when
    /// none of the inputs requires a gradient.
    pub fn push<F>(&mut self, value: Tensor<T>, inputs: &[Var], op: F) -> Var
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: inputs.iter().map(|v| v.0).collect(),
            op: if requires_grad { Some(Box::new(op)) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagate `d loss / d node` from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward() needs a single-element loss"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let input_grads = op(&ctx);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(input_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                let g = g.expect("operator skipped a required gradient");
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        // Intermediate gradients were consumed above; only leaves remain.
        Gradients { grads }
    }
}

/// Gradients of trainable leaves after a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
