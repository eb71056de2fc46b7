//! Reverse-mode automatic differentiation over scalars and small arrays.
//!
//! A [`Tape`] owns an append-only list of nodes; a [`Var`] is a copyable
//! handle to one node. Graphs are built eagerly per step, differentiated
//! once with [`Tape::backward`], and discarded. Construction order is a
//! topological order (parents always precede children), so the backward
//! sweep visits each node exactly once in reverse index order and cycles
//! cannot be constructed.
//!
//! Conventions:
//! - Elementwise binary ops require exactly matching shapes; the only
//!   broadcast is scalar against array.
//! - Gradients are zeroed at the start of every `backward`, so calling it
//!   twice on the same root is idempotent.
//! - Nodes lifted with `differentiable = false` are constants: no gradient
//!   is ever accumulated into them.
//! - `sqrt`, `norm` and `abs` use the zero subgradient at the origin.

mod gradcheck;
mod ops;
mod value;

pub use gradcheck::grad_check;
pub use value::{Shape, Value};

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One recorded primitive. Variants carry parent indices plus whatever the
/// backward rule needs beyond the stored node values.
#[derive(Debug, Clone)]
pub(crate) enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Square(usize),
    Sqrt(usize),
    Abs(usize),
    Exp(usize),
    Sigmoid(usize),
    Tanh(usize),
    Sin(usize),
    Cos(usize),
    Clamp(usize, S, S),
    Sum(usize),
    Mean(usize),
    Norm(usize),
    Dot(usize, usize),
    MatVec(usize, usize),
    Gather(usize, Vec<usize>),
}

impl<S> Op<S> {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Dot(a, b) | MatVec(a, b) => {
                [Some(*a), Some(*b)]
            }
            Neg(a) | Square(a) | Sqrt(a) | Abs(a) | Exp(a) | Sigmoid(a) | Tanh(a) | Sin(a)
            | Cos(a) | Clamp(a, _, _) | Sum(a) | Mean(a) | Norm(a) | Gather(a, _) => {
                [Some(*a), None]
            }
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Value<S>,
    grad: Option<Value<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Append-only computation graph. Confined to one thread from construction
/// through backward; build distinct tapes for parallel work.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a node on a tape.
#[derive(Debug)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    index: usize,
}

impl<S: Scalar> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<S: Scalar> Copy for Var<'_, S> {}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Value<S>, requires_grad: bool, op: Op<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var { tape: self, index }
    }

    /// Insert a leaf. `differentiable = false` marks a constant that never
    /// accumulates gradient (a stop-gradient input).
    pub fn lift(&self, value: Value<S>, differentiable: bool) -> Result<Var<'_, S>> {
        if !value.is_finite() {
            return Err(Error::non_finite("lift"));
        }
        Ok(self.push(value, differentiable, Op::Leaf))
    }

    /// Differentiable scalar leaf. Panics on non-finite input; use `lift`
    /// when the value is not known to be finite.
    pub fn scalar(&self, v: S) -> Var<'_, S> {
        self.lift(Value::scalar(v), true).expect("finite scalar")
    }

    /// Constant scalar leaf.
    pub fn constant(&self, v: S) -> Var<'_, S> {
        self.lift(Value::scalar(v), false).expect("finite scalar")
    }

    pub fn vector(&self, data: Vec<S>, differentiable: bool) -> Result<Var<'_, S>> {
        self.lift(Value::vector(data), differentiable)
    }

    fn with_node<R>(&self, index: usize, f: impl FnOnce(&Node<S>) -> R) -> R {
        f(&self.nodes.borrow()[index])
    }

    /// Reverse sweep from a scalar root. Zeroes all gradients first, seeds
    /// the root with 1, and returns the gradients of every differentiable
    /// leaf, keyed by node id. Individual gradients are also readable
    /// through [`Var::grad`].
    pub fn backward(&self, root: Var<'_, S>) -> Result<BTreeMap<usize, Value<S>>> {
        assert!(
            std::ptr::eq(root.tape, self),
            "backward called with a root from another tape"
        );
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root.index].value.shape() != Shape::Scalar {
            return Err(Error::NonScalarRoot {
                shape: format!("{:?}", nodes[root.index].value.shape()),
            });
        }
        for node in nodes.iter_mut() {
            node.grad = None;
        }
        nodes[root.index].grad = Some(Value::scalar(S::one()));

        for i in (0..=root.index).rev() {
            if !nodes[i].requires_grad || nodes[i].grad.is_none() {
                continue;
            }
            let (parents_slice, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            let g = node.grad.as_ref().expect("checked above");
            ops::accumulate_parents(node, g, parents_slice);
        }

        let mut map = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let grad = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| Value::zeros(node.value.shape()));
                map.insert(i, grad);
            }
        }
        Ok(map)
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.index
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Value<S> {
        self.tape.with_node(self.index, |n| n.value.clone())
    }

    pub fn shape(&self) -> Shape {
        self.tape.with_node(self.index, |n| n.value.shape())
    }

    /// Scalar payload; panics if the node is not scalar-shaped.
    pub fn scalar_value(&self) -> S {
        self.tape.with_node(self.index, |n| n.value.as_scalar())
    }

    pub fn is_differentiable(&self) -> bool {
        self.tape.with_node(self.index, |n| n.requires_grad)
    }

    /// Gradient accumulated by the last `backward`; zeros before any
    /// backward has run (and always zeros for constants).
    pub fn grad(&self) -> Value<S> {
        self.tape.with_node(self.index, |n| {
            n.grad
                .clone()
                .unwrap_or_else(|| Value::zeros(n.value.shape()))
        })
    }
}
