use std::cell::RefCell;
use std::rc::Rc;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Everything an adjoint needs: the forward inputs and output, the incoming
/// gradient, and which inputs actually want a gradient back.
pub struct BackwardArgs<'a, T> {
    pub inputs: &'a [Rc<Tensor<T>>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Tensor<T>>,
}

/// Tape of executed operations. Nodes are appended in execution order, so the
/// tape is topologically sorted by construction and `backward` is a single
/// reverse sweep.
pub struct Graph<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Graph`].
pub struct Var<'g, T: Element = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Element> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Element> Copy for Var<'_, T> {}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Untracked input (images, index grids).
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Tracked leaf whose gradient is kept after `backward`.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub(crate) fn record<'g>(
        &'g self,
        value: Tensor<T>,
        inputs: &[Var<'g, T>],
        backward: BackwardFn<T>,
    ) -> Var<'g, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Accumulate d`loss`/d`leaf` into every tracked leaf reachable from `loss`.
    /// Calling it twice without [`Graph::zero_grad`] adds the gradients.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::contract(
                "loss does not depend on any tracked tensor",
            ));
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        pending[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            if nodes[id].backward.is_none() {
                let node = &mut nodes[id];
                if node.requires_grad {
                    match node.grad.as_mut() {
                        Some(acc) => acc.add_assign(&grad),
                        None => node.grad = Some(grad),
                    }
                }
                continue;
            }
            let node = &nodes[id];
            let inputs: Vec<Rc<Tensor<T>>> = node
                .inputs
                .iter()
                .map(|&i| Rc::clone(&nodes[i].value))
                .collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let args = BackwardArgs {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
                needs: &needs,
            };
            let backward = node.backward.as_ref().expect("checked above");
            let input_grads = backward(&args);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    nodes[input].value.shape(),
                    "adjoint shape for node {input}"
                );
                match pending[input].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => pending[input] = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient accumulated by `backward`, if this is a tracked leaf.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }
}
