//! Primitive forward rules (graph construction) and backward rules.

use super::{Node, Op, Shape, Tape, Value, Var};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// forward

fn broadcast_shapes(a: Shape, b: Shape, what: &str) -> Shape {
    match (a, b) {
        (x, y) if x == y => x,
        (Shape::Scalar, y) => y,
        (x, Shape::Scalar) => x,
        _ => panic!("{what}: shape mismatch {a:?} vs {b:?} (only scalar-array broadcast)"),
    }
}

fn bget<S: Scalar>(v: &Value<S>, i: usize) -> S {
    if v.shape() == Shape::Scalar {
        v.data()[0]
    } else {
        v.data()[i]
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    fn binary_elementwise(self, rhs: Var<'t, S>, f: impl Fn(S, S) -> S, op: Op<S>) -> Var<'t, S> {
        assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        let (va, vb, rg) = self.tape.with_node(self.index, |a| {
            rhs.tape.with_node(rhs.index, |b| {
                (
                    a.value.clone(),
                    b.value.clone(),
                    a.requires_grad || b.requires_grad,
                )
            })
        });
        let shape = broadcast_shapes(va.shape(), vb.shape(), "elementwise op");
        let out = Value::from_fn(shape, |i| f(bget(&va, i), bget(&vb, i)));
        self.tape.push(out, rg, op)
    }

    fn unary(self, f: impl Fn(S) -> S, op: Op<S>) -> Var<'t, S> {
        let (out, rg) = self
            .tape
            .with_node(self.index, |n| (n.value.map(&f), n.requires_grad));
        self.tape.push(out, rg, op)
    }

    fn reduce(self, f: impl Fn(&Value<S>) -> S, op: Op<S>) -> Var<'t, S> {
        let (out, rg) = self
            .tape
            .with_node(self.index, |n| (f(&n.value), n.requires_grad));
        self.tape.push(Value::scalar(out), rg, op)
    }

    pub fn square(self) -> Var<'t, S> {
        self.unary(|v| v * v, Op::Square(self.index))
    }

    pub fn sqrt(self) -> Var<'t, S> {
        self.unary(|v| v.sqrt(), Op::Sqrt(self.index))
    }

    pub fn abs(self) -> Var<'t, S> {
        self.unary(|v| v.abs(), Op::Abs(self.index))
    }

    pub fn exp(self) -> Var<'t, S> {
        self.unary(|v| v.exp(), Op::Exp(self.index))
    }

    pub fn sigmoid(self) -> Var<'t, S> {
        self.unary(sigmoid, Op::Sigmoid(self.index))
    }

    pub fn tanh(self) -> Var<'t, S> {
        self.unary(|v| v.tanh(), Op::Tanh(self.index))
    }

    pub fn sin(self) -> Var<'t, S> {
        self.unary(|v| v.sin(), Op::Sin(self.index))
    }

    pub fn cos(self) -> Var<'t, S> {
        self.unary(|v| v.cos(), Op::Cos(self.index))
    }

    pub fn clamp(self, lo: S, hi: S) -> Var<'t, S> {
        assert!(lo <= hi, "clamp bounds out of order");
        self.unary(|v| v.max(lo).min(hi), Op::Clamp(self.index, lo, hi))
    }

    pub fn sum(self) -> Var<'t, S> {
        self.reduce(
            |v| v.data().iter().fold(S::zero(), |acc, &x| acc + x),
            Op::Sum(self.index),
        )
    }

    pub fn mean(self) -> Var<'t, S> {
        self.reduce(
            |v| {
                assert!(!v.is_empty(), "mean of empty value");
                let n = S::from_f64(v.len() as f64);
                v.data().iter().fold(S::zero(), |acc, &x| acc + x) / n
            },
            Op::Mean(self.index),
        )
    }

    /// Euclidean norm over all elements.
    pub fn norm(self) -> Var<'t, S> {
        self.reduce(
            |v| {
                v.data()
                    .iter()
                    .fold(S::zero(), |acc, &x| acc + x * x)
                    .sqrt()
            },
            Op::Norm(self.index),
        )
    }

    pub fn dot(self, rhs: Var<'t, S>) -> Var<'t, S> {
        assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        let (va, vb, rg) = self.tape.with_node(self.index, |a| {
            rhs.tape.with_node(rhs.index, |b| {
                (
                    a.value.clone(),
                    b.value.clone(),
                    a.requires_grad || b.requires_grad,
                )
            })
        });
        assert!(
            matches!(va.shape(), Shape::Vector(_)) && va.shape() == vb.shape(),
            "dot requires equal-length vectors, got {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let out = va
            .data()
            .iter()
            .zip(vb.data())
            .fold(S::zero(), |acc, (&x, &y)| acc + x * y);
        self.tape
            .push(Value::scalar(out), rg, Op::Dot(self.index, rhs.index))
    }

    /// Matrix-vector product; `self` must be a matrix and `rhs` a vector of
    /// matching length.
    pub fn matvec(self, rhs: Var<'t, S>) -> Var<'t, S> {
        assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        let (vm, vv, rg) = self.tape.with_node(self.index, |a| {
            rhs.tape.with_node(rhs.index, |b| {
                (
                    a.value.clone(),
                    b.value.clone(),
                    a.requires_grad || b.requires_grad,
                )
            })
        });
        let (r, c) = match vm.shape() {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("matvec lhs must be a matrix, got {s:?}"),
        };
        assert_eq!(
            vv.shape(),
            Shape::Vector(c),
            "matvec rhs must be a vector of length {c}"
        );
        let mut out = vec![S::zero(); r];
        for i in 0..r {
            let mut acc = S::zero();
            for j in 0..c {
                acc += vm.data()[i * c + j] * vv.data()[j];
            }
            out[i] = acc;
        }
        self.tape
            .push(Value::vector(out), rg, Op::MatVec(self.index, rhs.index))
    }

    /// Gather elements of a vector (or rows of a matrix) by fixed indices.
    /// The indices are constants of the step: gradients flow through the
    /// gathered values, not the selection.
    pub fn gather(self, indices: &[usize]) -> Var<'t, S> {
        let (v, rg) = self
            .tape
            .with_node(self.index, |n| (n.value.clone(), n.requires_grad));
        let out = match v.shape() {
            Shape::Vector(n) => {
                let data = indices
                    .iter()
                    .map(|&i| {
                        assert!(i < n, "gather index {i} out of range {n}");
                        v.data()[i]
                    })
                    .collect();
                Value::vector(data)
            }
            Shape::Matrix(r, c) => {
                let mut data = Vec::with_capacity(indices.len() * c);
                for &i in indices {
                    assert!(i < r, "gather row {i} out of range {r}");
                    data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
                }
                Value::matrix(indices.len(), c, data)
            }
            Shape::Scalar => panic!("gather on a scalar"),
        };
        self.tape
            .push(out, rg, Op::Gather(self.index, indices.to_vec()))
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    // Stable in both tails.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'t, S: Scalar> std::ops::$trait for Var<'t, S> {
            type Output = Var<'t, S>;
            fn $method(self, rhs: Var<'t, S>) -> Var<'t, S> {
                self.binary_elementwise(rhs, $f, Op::$op(self.index, rhs.index))
            }
        }
        impl<'t, S: Scalar> std::ops::$trait<S> for Var<'t, S> {
            type Output = Var<'t, S>;
            fn $method(self, rhs: S) -> Var<'t, S> {
                let c = self.tape.constant(rhs);
                self.binary_elementwise(c, $f, Op::$op(self.index, c.index))
            }
        }
    };
}

binop!(Add, add, Add, |a, b| a + b);
binop!(Sub, sub, Sub, |a, b| a - b);
binop!(Mul, mul, Mul, |a, b| a * b);
binop!(Div, div, Div, |a, b| a / b);

impl<'t, S: Scalar> std::ops::Neg for Var<'t, S> {
    type Output = Var<'t, S>;
    fn neg(self) -> Var<'t, S> {
        self.unary(|v| -v, Op::Neg(self.index))
    }
}

// ---------------------------------------------------------------------------
// backward

fn accum<S: Scalar>(parents: &mut [Node<S>], idx: usize, contribution: impl FnOnce() -> Value<S>) {
    let p = &mut parents[idx];
    if !p.requires_grad {
        return;
    }
    let c = contribution();
    match &mut p.grad {
        Some(g) => g.add_assign(&c),
        None => p.grad = Some(c),
    }
}

/// Contribution to a (possibly scalar-broadcast) parent: sum-reduce when the
/// parent is scalar but the output is not.
fn reduce_to<S: Scalar>(target: Shape, n: usize, f: impl Fn(usize) -> S) -> Value<S> {
    if target == Shape::Scalar {
        let mut acc = S::zero();
        for i in 0..n {
            acc += f(i);
        }
        Value::scalar(acc)
    } else {
        debug_assert_eq!(target.len(), n);
        Value::from_fn(target, f)
    }
}

pub(crate) fn accumulate_parents<S: Scalar>(
    node: &Node<S>,
    g: &Value<S>,
    parents: &mut [Node<S>],
) {
    let out = &node.value;
    let n = out.len();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (sa, sb) = (parents[*a].value.shape(), parents[*b].value.shape());
            accum(parents, *a, || reduce_to(sa, n, |i| g.data()[i]));
            accum(parents, *b, || reduce_to(sb, n, |i| g.data()[i]));
        }
        Op::Sub(a, b) => {
            let (sa, sb) = (parents[*a].value.shape(), parents[*b].value.shape());
            accum(parents, *a, || reduce_to(sa, n, |i| g.data()[i]));
            accum(parents, *b, || reduce_to(sb, n, |i| -g.data()[i]));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (parents[*a].value.clone(), parents[*b].value.clone());
            accum(parents, *a, || {
                reduce_to(va.shape(), n, |i| g.data()[i] * bget(&vb, i))
            });
            accum(parents, *b, || {
                reduce_to(vb.shape(), n, |i| g.data()[i] * bget(&va, i))
            });
        }
        Op::Div(a, b) => {
            let (va, vb) = (parents[*a].value.clone(), parents[*b].value.clone());
            accum(parents, *a, || {
                reduce_to(va.shape(), n, |i| g.data()[i] / bget(&vb, i))
            });
            accum(parents, *b, || {
                reduce_to(vb.shape(), n, |i| {
                    let d = bget(&vb, i);
                    -g.data()[i] * bget(&va, i) / (d * d)
                })
            });
        }
        Op::Neg(a) => accum(parents, *a, || g.map(|v| -v)),
        Op::Square(a) => {
            let va = parents[*a].value.clone();
            accum(parents, *a, || {
                let two = S::from_f64(2.0);
                Value::from_fn(va.shape(), |i| two * va.data()[i] * g.data()[i])
            });
        }
        Op::Sqrt(a) => {
            // Zero subgradient at the origin keeps graphs with exactly-zero
            // residuals finite.
            let shape = parents[*a].value.shape();
            accum(parents, *a, || {
                let half = S::from_f64(0.5);
                Value::from_fn(shape, |i| {
                    let o = out.data()[i];
                    if o > S::zero() {
                        half * g.data()[i] / o
                    } else {
                        S::zero()
                    }
                })
            });
        }
        Op::Abs(a) => {
            let va = parents[*a].value.clone();
            accum(parents, *a, || {
                Value::from_fn(va.shape(), |i| {
                    let x = va.data()[i];
                    if x > S::zero() {
                        g.data()[i]
                    } else if x < S::zero() {
                        -g.data()[i]
                    } else {
                        S::zero()
                    }
                })
            });
        }
        Op::Exp(a) => {
            let shape = parents[*a].value.shape();
            accum(parents, *a, || {
                Value::from_fn(shape, |i| g.data()[i] * out.data()[i])
            });
        }
        Op::Sigmoid(a) => {
            let shape = parents[*a].value.shape();
            accum(parents, *a, || {
                Value::from_fn(shape, |i| {
                    let o = out.data()[i];
                    g.data()[i] * o * (S::one() - o)
                })
            });
        }
        Op::Tanh(a) => {
            let shape = parents[*a].value.shape();
            accum(parents, *a, || {
                Value::from_fn(shape, |i| {
                    let o = out.data()[i];
                    g.data()[i] * (S::one() - o * o)
                })
            });
        }
        Op::Sin(a) => {
            let va = parents[*a].value.clone();
            accum(parents, *a, || {
                Value::from_fn(va.shape(), |i| g.data()[i] * va.data()[i].cos())
            });
        }
        Op::Cos(a) => {
            let va = parents[*a].value.clone();
            accum(parents, *a, || {
                Value::from_fn(va.shape(), |i| -g.data()[i] * va.data()[i].sin())
            });
        }
        Op::Clamp(a, lo, hi) => {
            let va = parents[*a].value.clone();
            let (lo, hi) = (*lo, *hi);
            accum(parents, *a, || {
                Value::from_fn(va.shape(), |i| {
                    let x = va.data()[i];
                    if x >= lo && x <= hi {
                        g.data()[i]
                    } else {
                        S::zero()
                    }
                })
            });
        }
        Op::Sum(a) => {
            let shape = parents[*a].value.shape();
            let gs = g.as_scalar();
            accum(parents, *a, || Value::from_fn(shape, |_| gs));
        }
        Op::Mean(a) => {
            let shape = parents[*a].value.shape();
            let gs = g.as_scalar() / S::from_f64(shape.len() as f64);
            accum(parents, *a, || Value::from_fn(shape, |_| gs));
        }
        Op::Norm(a) => {
            let va = parents[*a].value.clone();
            let o = out.as_scalar();
            let gs = g.as_scalar();
            accum(parents, *a, || {
                Value::from_fn(va.shape(), |i| {
                    if o > S::zero() {
                        gs * va.data()[i] / o
                    } else {
                        S::zero()
                    }
                })
            });
        }
        Op::Dot(a, b) => {
            let (va, vb) = (parents[*a].value.clone(), parents[*b].value.clone());
            let gs = g.as_scalar();
            accum(parents, *a, || {
                Value::from_fn(va.shape(), |i| gs * vb.data()[i])
            });
            accum(parents, *b, || {
                Value::from_fn(vb.shape(), |i| gs * va.data()[i])
            });
        }
        Op::MatVec(m, v) => {
            let (vm, vv) = (parents[*m].value.clone(), parents[*v].value.clone());
            let (r, c) = match vm.shape() {
                Shape::Matrix(r, c) => (r, c),
                _ => unreachable!(),
            };
            accum(parents, *m, || {
                Value::from_fn(vm.shape(), |k| {
                    let (i, j) = (k / c, k % c);
                    g.data()[i] * vv.data()[j]
                })
            });
            accum(parents, *v, || {
                Value::from_fn(vv.shape(), |j| {
                    let mut acc = S::zero();
                    for i in 0..r {
                        acc += vm.data()[i * c + j] * g.data()[i];
                    }
                    acc
                })
            });
        }
        Op::Gather(a, indices) => {
            let pshape = parents[*a].value.shape();
            accum(parents, *a, || {
                let mut grad = Value::zeros(pshape);
                match pshape {
                    Shape::Vector(_) => {
                        for (k, &src) in indices.iter().enumerate() {
                            grad.data_mut()[src] += g.data()[k];
                        }
                    }
                    Shape::Matrix(_, c) => {
                        for (k, &src) in indices.iter().enumerate() {
                            for j in 0..c {
                                grad.data_mut()[src * c + j] += g.data()[k * c + j];
                            }
                        }
                    }
                    Shape::Scalar => unreachable!(),
                }
                grad
            });
        }
    }
}
