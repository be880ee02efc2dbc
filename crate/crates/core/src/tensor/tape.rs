//! Execution tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its forward value, the ids of
//! its parents and a closure that maps the output gradient to parent
//! gradients. Nodes are appended in execution order, so walking the tape
//! backwards is already a topological order.

use std::cell::RefCell;

use super::{Shape, Tensor};

/// Maps (grad wrt output, which-parents-need-grads) to per-parent gradients.
pub(crate) type GradFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
}

/// Recorded execution of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one tape node. Cheap to copy; ops on `Var` grow the tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked input: gradients are accumulated for it during backward.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), None, true)
    }

    /// Untracked input (fixed kernels, injected noise): no gradient flows.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), None, false)
    }

    pub(crate) fn push(&self, value: Tensor, parents: Vec<usize>, grad_fn: GradFn) -> Var<'_> {
        debug_assert!(
            value.all_finite(),
            "op produced non-finite value (shape {})",
            value.shape()
        );
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        self.insert(value, parents, Some(grad_fn), needs)
    }

    fn insert(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        grad_fn: Option<GradFn>,
        needs_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            grad_fn,
            needs_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a scalar loss. Returns gradients for every tracked
    /// node on the path from the loss to the leaves.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(loss.tape, self), "loss is from another tape");
        let nodes = self.nodes.borrow();
        assert!(
            nodes[loss.id].value.shape().is_scalar(),
            "backward requires a scalar loss, got {}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if node.grad_fn.is_none() || !node.needs_grad {
                continue;
            }
            let Some(grad_out) = grads[id].clone() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].needs_grad)
                .collect();
            let parent_grads = (node.grad_fn.as_ref().unwrap())(&grad_out, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                debug_assert!(g.all_finite(), "non-finite gradient for node {pid}");
                debug_assert_eq!(g.shape(), nodes[pid].value.shape());
                grads[pid] = Some(match grads[pid].take() {
                    Some(acc) => acc.zip_map(&g, |a, b| a + b),
                    None => g,
                });
            }
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.value().shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_chain_gradient() {
        // y = 2x summed; dy/dx = 2 everywhere, exactly.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, -2.0, 3.0, 0.5]));
        let y = x.scale(2.0);
        let loss = y.sum();
        let grads = tape.backward(loss);
        let gx = grads.wrt(x);
        assert!(gx.data().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn constant_gets_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let k = tape.constant(Tensor::scalar(5.0));
        let loss = x.mul(k).sum();
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(x).scalar_value(), 5.0);
        assert!(grads.get(k).is_none());
    }

    #[test]
    fn repeated_parent_accumulates() {
        // loss = x * x; d/dx = 2x.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let loss = x.mul(x).sum();
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(x).scalar_value(), 6.0);
    }
}
