use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Maps the gradient of a node's output to gradients of each of its inputs.
///
/// Entries may be `None` for inputs that do not need a gradient.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
    op: &'static str,
}

/// Records a single forward evaluation for reverse-mode differentiation.
///
/// A tape is single-threaded and append-only. Build a fresh tape per forward
/// pass; independent tapes can be driven from different threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        write!(f, "Var#{}({} {:?})", self.id, node.op, node.value.dims())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. It takes part in differentiation iff `t.requires_grad`.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let needs_grad = t.requires_grad;
        self.push(Rc::new(t), Vec::new(), None, needs_grad, "leaf")
    }

    /// Records a leaf that always receives a gradient.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        self.leaf(t.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records the result of a custom operation.
    ///
    /// `backward` is only built when some input needs a gradient, so callers
    /// can skip capturing intermediate state during inference.
    pub fn custom<'t, F>(&'t self, op: &'static str, inputs: &[Var<'t>], value: Tensor, backward: F) -> Var<'t>
    where
        F: FnOnce() -> BackwardFn,
    {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let needs_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].needs_grad)
        };
        let bw = if needs_grad { Some(backward()) } else { None };
        self.push(Rc::new(value), ids, bw, needs_grad, op)
    }

    fn push(
        &self,
        value: Rc<Tensor>,
        inputs: Vec<usize>,
        backward: Option<BackwardFn>,
        needs_grad: bool,
        op: &'static str,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs,
            backward,
            needs_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Returns the first recorded op (in evaluation order) whose value is not finite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op))
    }

    /// Back-propagates from a scalar `root`, seeding its gradient with 1.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let numel = root.value().numel();
        if numel != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, has {numel} elements"),
            ));
        }
        self.backward_with(root, vec![1.0])
    }

    /// Back-propagates from `root` with an explicit output gradient.
    pub fn backward_with(&self, root: Var<'_>, seed: Vec<f64>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if seed.len() != nodes[root.id].value.numel() {
            return Err(Error::shape("backward", "seed length differs from root size"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            // Leaves have no backward and keep their accumulated gradient.
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let input_grads = bw(&g);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when no path reached it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; v.value().numel()],
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.dims().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].op
    }
}
