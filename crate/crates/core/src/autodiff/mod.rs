//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to a [`Graph`]; [`Graph::backward`] walks the
//! nodes in exact reverse recording order. Gradients of leaves accumulate
//! (`+=`) into their tensor's gradient buffer, so callers zero them between
//! steps.

mod conv;
mod ops;

pub use ops::LEAKY_SLOPE;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded op.
pub trait Function<T: Real> {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one gradient per input, `None` where the
    /// input needs none (`needs[i] == false`) or receives no signal.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    func: Option<Box<dyn Function<T>>>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            inputs: Vec::new(),
            func: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn param(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, once `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if node.func.is_none() && node.requires_grad {
                node.value.zero_grad();
            }
        }
    }

    /// Records `value` as the output of `func` applied to `inputs`.
    ///
    /// Outputs must be finite; the backward rule is dropped when no input
    /// requires a gradient.
    pub fn record<F: Function<T> + 'static>(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        func: F,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                func.name()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let func: Option<Box<dyn Function<T>>> = if requires_grad {
            Some(Box::new(func))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            func,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss` into every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let Some(func) = &node.func else {
                // Leaf: park the gradient until the sweep is done.
                grads[i] = Some(grad_out);
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = func.backward(&inputs, &node.value, &grad_out, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", func.name());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[v.0].value.len(), "{}", func.name());
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot => *slot = Some(g),
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[i];
                if node.func.is_none() && node.requires_grad {
                    node.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}
