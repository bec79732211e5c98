//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every operation appends one node holding its output value and, when any
//! input requires a gradient, a closure that maps the output gradient onto
//! its inputs. Nodes are only ever appended, so node order is a topological
//! order and `backward` is a single reverse sweep.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// The compute record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
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

    /// A leaf that gradients flow into.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            requires_grad,
            backward: None,
        })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends an operation output. The backward closure is dropped when no
    /// parent requires a gradient.
    pub(crate) fn push_op(
        &self,
        value: Rc<Tensor>,
        parents: &[usize],
        backward: BackwardFn,
    ) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(Node {
            value,
            requires_grad,
            backward: requires_grad.then_some(backward),
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::invalid("backward root belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let count = root.id + 1;
        let requires: Vec<bool> = nodes[..count].iter().map(|n| n.requires_grad).collect();
        let numels: Vec<usize> = nodes[..count].iter().map(|n| n.value.numel()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        if requires[root.id] {
            grads[root.id] = Some(vec![1.0]);
        }
        for id in (0..count).rev() {
            let Some(backward) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            {
                let mut sink = GradSink {
                    grads: &mut grads,
                    requires: &requires,
                    numels: &numels,
                };
                backward(&upstream, &mut sink);
            }
            grads[id] = Some(upstream);
        }
        let shapes = nodes[..count].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradient accumulator handed to backward closures.
pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    requires: &'a [bool],
    numels: &'a [usize],
}

impl GradSink<'_> {
    pub(crate) fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    /// Zero-initialized on first touch.
    pub(crate) fn slot(&mut self, id: usize) -> &mut [f64] {
        let numel = self.numels[id];
        self.grads[id].get_or_insert_with(|| vec![0.0; numel])
    }

    pub(crate) fn accumulate(&mut self, id: usize, grad: &[f64]) {
        if !self.wants(id) {
            return;
        }
        for (g, d) in self.slot(id).iter_mut().zip(grad) {
            *g += d;
        }
    }
}

/// Result of one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; `None` when no gradient reached it.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.get_slice(var)
            .map(|g| Tensor::from_raw(self.shapes[var.id].clone(), g.to_vec()))
    }

    pub fn get_slice(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
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
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Copy of this value cut off from the gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push_node(Node {
            value: self.value(),
            requires_grad: false,
            backward: None,
        })
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid("operands live on different tapes"))
        }
    }
}
