//! Pose and point-cloud arithmetic on the tape.
//!
//! A cloud lives on the tape as three column vectors (x, y, z), which keeps
//! the unrolled solver graph to a few hundred array nodes per iteration. A
//! pose is nine rotation entries plus three translation entries, each a
//! scalar node.

use super::{Mat3, Pose};
use crate::autodiff::{Tape, Value, Var};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Copy)]
pub struct GraphPose<'t, S: Scalar> {
    /// Row-major rotation entries.
    pub r: [Var<'t, S>; 9],
    pub t: [Var<'t, S>; 3],
}

impl<'t, S: Scalar> GraphPose<'t, S> {
    pub fn identity(tape: &'t Tape<S>) -> Self {
        GraphPose::constant(tape, &Pose::identity())
    }

    /// Lift a pose as constants (no gradient flows into it).
    pub fn constant(tape: &'t Tape<S>, pose: &Pose<S>) -> Self {
        let m = &pose.rotation.0;
        let r = [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
        .map(|v| tape.constant(v));
        let t = pose.translation.map(|v| tape.constant(v));
        GraphPose { r, t }
    }

    pub fn value(&self) -> Pose<S> {
        let rv = self.r.map(|v| v.scalar_value());
        Pose {
            rotation: Mat3([
                [rv[0], rv[1], rv[2]],
                [rv[3], rv[4], rv[5]],
                [rv[6], rv[7], rv[8]],
            ]),
            translation: self.t.map(|v| v.scalar_value()),
        }
    }

    /// `self ∘ other`, matching [`Pose::compose`].
    pub fn compose(&self, other: &GraphPose<'t, S>) -> GraphPose<'t, S> {
        let a = &self.r;
        let b = &other.r;
        let mut r = Vec::with_capacity(9);
        for i in 0..3 {
            for j in 0..3 {
                r.push(a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j]);
            }
        }
        let t = [0, 1, 2].map(|i| {
            a[3 * i] * other.t[0] + a[3 * i + 1] * other.t[1] + a[3 * i + 2] * other.t[2]
                + self.t[i]
        });
        GraphPose {
            r: r.try_into().ok().expect("nine entries"),
            t,
        }
    }

    /// Row-wise `R p + t` over a cloud.
    pub fn transform(&self, cloud: &GraphCloud<'t, S>) -> GraphCloud<'t, S> {
        let r = &self.r;
        let (x, y, z) = (cloud.x, cloud.y, cloud.z);
        GraphCloud {
            x: x * r[0] + y * r[1] + z * r[2] + self.t[0],
            y: x * r[3] + y * r[4] + z * r[5] + self.t[1],
            z: x * r[6] + y * r[7] + z * r[8] + self.t[2],
        }
    }
}

/// Differentiable exponential map from six scalar tangent nodes.
///
/// The series-vs-closed-form branch is selected on the current value of
/// `|omega|^2`; both branches are smooth where they are used, and the
/// crossover error is far below gradient-check tolerances.
pub fn exp_se3_graph<'t, S: Scalar>(xi: &[Var<'t, S>; 6]) -> GraphPose<'t, S> {
    let (w0, w1, w2) = (xi[0], xi[1], xi[2]);
    let (v0, v1, v2) = (xi[3], xi[4], xi[5]);
    let theta2 = w0.square() + w1.square() + w2.square();

    let (a, b, c) = if theta2.scalar_value().to_f64() < super::SMALL_ANGLE_SQ {
        let t4 = theta2.square();
        let a = -theta2 / S::from_f64(6.0) + t4 / S::from_f64(120.0) + S::one();
        let b = -theta2 / S::from_f64(24.0) + t4 / S::from_f64(720.0) + S::from_f64(0.5);
        let c = -theta2 / S::from_f64(120.0) + t4 / S::from_f64(5040.0) + S::from_f64(1.0 / 6.0);
        (a, b, c)
    } else {
        let theta = theta2.sqrt();
        let a = theta.sin() / theta;
        let sh = (theta * S::from_f64(0.5)).sin();
        let b = sh.square() * S::from_f64(2.0) / theta2;
        let c = (-a + S::one()) / theta2;
        (a, b, c)
    };

    // R = I + A [w]x + B (w w^T - theta^2 I); V likewise with (B, C).
    let diag = |wi: Var<'t, S>, coef: Var<'t, S>| coef * (wi.square() - theta2) + S::one();
    let off = |wi: Var<'t, S>,
               wj: Var<'t, S>,
               wk: Var<'t, S>,
               sign: S,
               lin: Var<'t, S>,
               quad: Var<'t, S>| lin * wk * sign + quad * (wi * wj);

    let build = |lin: Var<'t, S>, quad: Var<'t, S>| -> [Var<'t, S>; 9] {
        [
            diag(w0, quad),
            off(w0, w1, w2, -S::one(), lin, quad),
            off(w0, w2, w1, S::one(), lin, quad),
            off(w1, w0, w2, S::one(), lin, quad),
            diag(w1, quad),
            off(w1, w2, w0, -S::one(), lin, quad),
            off(w2, w0, w1, -S::one(), lin, quad),
            off(w2, w1, w0, S::one(), lin, quad),
            diag(w2, quad),
        ]
    };

    let r = build(a, b);
    let jl = build(b, c);
    let t = [0, 1, 2].map(|i| jl[3 * i] * v0 + jl[3 * i + 1] * v1 + jl[3 * i + 2] * v2);
    GraphPose { r, t }
}

/// A point cloud on the tape, stored as coordinate columns.
#[derive(Clone, Copy)]
pub struct GraphCloud<'t, S: Scalar> {
    pub x: Var<'t, S>,
    pub y: Var<'t, S>,
    pub z: Var<'t, S>,
}

impl<'t, S: Scalar> GraphCloud<'t, S> {
    pub fn from_points(
        tape: &'t Tape<S>,
        points: &[[S; 3]],
        differentiable: bool,
    ) -> Result<Self> {
        let col = |k: usize| -> Result<Var<'t, S>> {
            tape.lift(
                Value::vector(points.iter().map(|p| p[k]).collect()),
                differentiable,
            )
        };
        Ok(GraphCloud {
            x: col(0)?,
            y: col(1)?,
            z: col(2)?,
        })
    }

    pub fn from_columns(x: Var<'t, S>, y: Var<'t, S>, z: Var<'t, S>) -> Self {
        assert_eq!(x.shape(), y.shape());
        assert_eq!(x.shape(), z.shape());
        GraphCloud { x, y, z }
    }

    pub fn len(&self) -> usize {
        self.x.shape().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<[S; 3]> {
        let (x, y, z) = (self.x.value(), self.y.value(), self.z.value());
        (0..self.len())
            .map(|i| [x.data()[i], y.data()[i], z.data()[i]])
            .collect()
    }

    pub fn gather(&self, indices: &[usize]) -> Self {
        GraphCloud {
            x: self.x.gather(indices),
            y: self.y.gather(indices),
            z: self.z.gather(indices),
        }
    }

    /// Sum of squared distances to the matching rows of `other`.
    pub fn squared_distance_sum(&self, other: &GraphCloud<'t, S>) -> Var<'t, S> {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx.square().sum() + dy.square().sum() + dz.square().sum()
    }
}
