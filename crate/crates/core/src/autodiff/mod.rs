//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is created per forward pass. Leaves are registered with
//! [`Tape::leaf`] or [`Tape::constant`], every operation on a [`Var`] appends
//! a node, and [`Tape::backward`] replays the recorded adjoints in reverse
//! order. Nothing is global: dropping the tape drops the whole graph.
//!
//! ```
//! use xmodal_core::autodiff::Tape;
//! use xmodal_core::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
//! ```

mod gradcheck;
mod ops;

pub use gradcheck::{check_gradients, finite_diff_check, GradCheckOutcome};
pub use ops::concat;

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Operation kinds, used for reporting and adjoint fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    Scale,
    Exp,
    Log,
    Sqrt,
    Gelu,
    MatMul,
    TransposeLast,
    Softmax,
    LogSumExp,
    Sum,
    SumAxis,
    Reshape,
    Expand,
    Slice,
    Concat,
    Gather,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Gelu(usize),
    MatMul(usize, usize),
    TransposeLast(usize),
    Softmax(usize),
    LogSumExp(usize),
    Sum(usize),
    SumAxis(usize, usize),
    Reshape(usize),
    Expand(usize),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        srcs: Vec<usize>,
        axis: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Scale(..) => OpKind::Scale,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Gelu(_) => OpKind::Gelu,
            Op::MatMul(..) => OpKind::MatMul,
            Op::TransposeLast(_) => OpKind::TransposeLast,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSumExp(_) => OpKind::LogSumExp,
            Op::Sum(_) => OpKind::Sum,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Expand(_) => OpKind::Expand,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::Gather { .. } => OpKind::Gather,
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Scales the adjoint of every node of one kind. Test fixture for
/// demonstrating that gradient checks catch broken backward rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointFault {
    pub op: OpKind,
    pub scale: f64,
}

/// Ordered record of one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    fault: Cell<Option<AdjointFault>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            fault: Cell::new(None),
        }
    }

    pub fn with_adjoint_fault(fault: AdjointFault) -> Self {
        let t = Self::new();
        t.fault.set(Some(fault));
        t
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.grads.borrow_mut().clear();
    }

    /// Resets accumulated gradients, keeping the recorded graph.
    pub fn zero_grads(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Accumulated gradient of `v`; zeros when nothing reached it.
    pub fn grad(&self, v: Var<'_>) -> Tensor {
        let nodes = self.nodes.borrow();
        let shape = nodes[v.id].value.shape().to_vec();
        match &self.grads.borrow()[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape tracks value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls; intermediate adjoints are
    /// recomputed from scratch each time.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.item().is_finite() {
            return Err(Error::Numeric(format!("loss is {}", root.value.item())));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads = self.grads.borrow_mut();
        for (g, node) in grads.iter_mut().zip(nodes.iter()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        accumulate(&mut grads[loss.id], &[1.0]);
        let fault = self.fault.get();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut upstream) = grads[id].take() else {
                continue;
            };
            if let Some(f) = fault {
                if f.op == node.op.kind() {
                    upstream.iter_mut().for_each(|g| *g *= f.scale);
                }
            }
            ops::backprop(&nodes, id, &upstream, &mut grads);
            grads[id] = Some(upstream);
        }
        Ok(())
    }
}

pub(crate) fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    pub fn grad(&self) -> Tensor {
        self.tape.grad(*self)
    }
}
