//! SE(3) rigid-body math: exponential/logarithm maps, composition,
//! inversion, and the tape-side counterparts used inside unrolled solvers.
//!
//! Rotations are stored as 3x3 matrices; quaternions appear only at the
//! serialization boundary. Tangent vectors are ordered `[omega, v]`
//! (rotation first, both length 3).

mod graph;

pub use graph::{exp_se3_graph, GraphCloud, GraphPose};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Vec3<S> = [S; 3];
/// Tangent vector `[omega_x, omega_y, omega_z, v_x, v_y, v_z]`.
pub type Vec6<S> = [S; 6];

/// Angles below this use the series expansions of the exp/log coefficients.
const SMALL_ANGLE_SQ: f64 = 1e-8;

pub fn vadd<S: Scalar>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vsub<S: Scalar>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vscale<S: Scalar>(a: Vec3<S>, s: S) -> Vec3<S> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn vdot<S: Scalar>(a: Vec3<S>, b: Vec3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn vcross<S: Scalar>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn vnorm2<S: Scalar>(a: Vec3<S>) -> S {
    vdot(a, a)
}

pub fn vnorm<S: Scalar>(a: Vec3<S>) -> S {
    vnorm2(a).sqrt()
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3<S>(pub [[S; 3]; 3]);

impl<S: Scalar> Mat3<S> {
    pub fn identity() -> Self {
        let (o, z) = (S::one(), S::zero());
        Mat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn zeros() -> Self {
        Mat3([[S::zero(); 3]; 3])
    }

    pub fn skew(w: Vec3<S>) -> Self {
        let z = S::zero();
        Mat3([[z, -w[2], w[1]], [w[2], z, -w[0]], [-w[1], w[0], z]])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul(&self, rhs: &Mat3<S>) -> Mat3<S> {
        let mut out = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = S::zero();
                for k in 0..3 {
                    acc += self.0[i][k] * rhs.0[k][j];
                }
                out.0[i][j] = acc;
            }
        }
        out
    }

    pub fn mul_vec(&self, v: Vec3<S>) -> Vec3<S> {
        [
            vdot(self.0[0], v),
            vdot(self.0[1], v),
            vdot(self.0[2], v),
        ]
    }

    pub fn add(&self, rhs: &Mat3<S>) -> Mat3<S> {
        let mut out = *self;
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] += rhs.0[i][j];
            }
        }
        out
    }

    pub fn scale(&self, s: S) -> Mat3<S> {
        let mut out = *self;
        for row in out.0.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    pub fn det(&self) -> S {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn trace(&self) -> S {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Rigid transform: rotation then translation, `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose<S> {
    pub rotation: Mat3<S>,
    pub translation: Vec3<S>,
}

impl<S: Scalar> Default for Pose<S> {
    fn default() -> Self {
        Pose::identity()
    }
}

impl<S: Scalar> Pose<S> {
    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: [S::zero(); 3],
        }
    }

    pub fn new(rotation: Mat3<S>, translation: Vec3<S>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// `self` applied after `other`: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &Pose<S>) -> Pose<S> {
        Pose {
            rotation: self.rotation.mul(&other.rotation),
            translation: vadd(self.rotation.mul_vec(other.translation), self.translation),
        }
    }

    pub fn inverse(&self) -> Pose<S> {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: vscale(rt.mul_vec(self.translation), -S::one()),
        }
    }

    pub fn transform(&self, p: Vec3<S>) -> Vec3<S> {
        vadd(self.rotation.mul_vec(p), self.translation)
    }

    /// Geodesic rotation angle in radians.
    pub fn rotation_angle(&self) -> S {
        let half = S::from_f64(0.5);
        let c = ((self.rotation.trace() - S::one()) * half)
            .max(-S::one())
            .min(S::one());
        c.acos()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.iter().all(|v| v.is_finite())
    }

    /// Check orthonormality and positive determinant within `tol`.
    pub fn validate(&self, tol: S) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::non_finite("pose"));
        }
        let should_be_i = self.rotation.transpose().mul(&self.rotation);
        let i = Mat3::identity();
        for r in 0..3 {
            for c in 0..3 {
                if (should_be_i.0[r][c] - i.0[r][c]).abs() > tol {
                    return Err(Error::DegenerateGeometry {
                        detail: format!(
                            "rotation not orthonormal: R^T R deviates by {} at ({r},{c})",
                            (should_be_i.0[r][c] - i.0[r][c]).to_f64()
                        ),
                    });
                }
            }
        }
        if (self.rotation.det() - S::one()).abs() > tol {
            return Err(Error::DegenerateGeometry {
                detail: format!("rotation determinant {} != 1", self.rotation.det().to_f64()),
            });
        }
        Ok(())
    }
}

/// Coefficients of the exponential map: `A = sin t / t`,
/// `B = (1 - cos t) / t^2`, `C = (t - sin t) / t^3`, as functions of `t^2`
/// with series fallbacks near zero.
fn exp_coefficients<S: Scalar>(theta2: S) -> (S, S, S) {
    if theta2.to_f64() < SMALL_ANGLE_SQ {
        let a = S::one() - theta2 / S::from_f64(6.0) + theta2 * theta2 / S::from_f64(120.0);
        let b = S::from_f64(0.5) - theta2 / S::from_f64(24.0)
            + theta2 * theta2 / S::from_f64(720.0);
        let c = S::from_f64(1.0 / 6.0) - theta2 / S::from_f64(120.0)
            + theta2 * theta2 / S::from_f64(5040.0);
        (a, b, c)
    } else {
        let theta = theta2.sqrt();
        let a = theta.sin() / theta;
        let sh = (theta * S::from_f64(0.5)).sin();
        let b = S::from_f64(2.0) * sh * sh / theta2; // cancellation-free 1-cos
        let c = (S::one() - a) / theta2;
        (a, b, c)
    }
}

/// Exponential map from the tangent `[omega, v]` to a pose. Rodrigues for
/// the rotation, left Jacobian of SO(3) for the translation.
pub fn exp_se3<S: Scalar>(xi: &Vec6<S>) -> Result<Pose<S>> {
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("exp_se3 input"));
    }
    let w = [xi[0], xi[1], xi[2]];
    let v = [xi[3], xi[4], xi[5]];
    let theta2 = vnorm2(w);
    let (a, b, c) = exp_coefficients(theta2);
    let wx = Mat3::skew(w);
    let wx2 = wx.mul(&wx);
    let rotation = Mat3::identity().add(&wx.scale(a)).add(&wx2.scale(b));
    let jl = Mat3::identity().add(&wx.scale(b)).add(&wx2.scale(c));
    Ok(Pose {
        rotation,
        translation: jl.mul_vec(v),
    })
}

/// Logarithm map; inverse of [`exp_se3`] away from the angle-pi singularity.
pub fn log_se3<S: Scalar>(p: &Pose<S>) -> Result<Vec6<S>> {
    let half = S::from_f64(0.5);
    let cos_theta = ((p.rotation.trace() - S::one()) * half)
        .max(-S::one())
        .min(S::one());
    let theta = cos_theta.acos();
    if theta.to_f64() > std::f64::consts::PI - 1e-6 {
        return Err(Error::NearPiRotation {
            angle: theta.to_f64(),
        });
    }
    let m = &p.rotation.0;
    let vee = [
        m[2][1] - m[1][2],
        m[0][2] - m[2][0],
        m[1][0] - m[0][1],
    ];
    let theta2 = theta * theta;
    // theta / (2 sin theta), by series for small angles.
    let scale = if theta2.to_f64() < SMALL_ANGLE_SQ {
        half * (S::one() + theta2 / S::from_f64(6.0)
            + theta2 * theta2 * S::from_f64(7.0 / 360.0))
    } else {
        theta / (S::from_f64(2.0) * theta.sin())
    };
    let w = vscale(vee, scale);

    // V^{-1} = I - w_x/2 + k w_x^2 with k = (1 - (t/2) cot(t/2)) / t^2.
    let k = if theta2.to_f64() < SMALL_ANGLE_SQ {
        S::from_f64(1.0 / 12.0) + theta2 / S::from_f64(720.0)
    } else {
        let ht = theta * half;
        (S::one() - ht * ht.cos() / ht.sin()) / theta2
    };
    let wx = Mat3::skew(w);
    let wx2 = wx.mul(&wx);
    let v_inv = Mat3::identity().add(&wx.scale(-half)).add(&wx2.scale(k));
    let v = v_inv.mul_vec(p.translation);
    Ok([w[0], w[1], w[2], v[0], v[1], v[2]])
}

/// Rotation matrix to unit quaternion `[w, x, y, z]` (Shepperd's method).
pub fn mat_to_quat<S: Scalar>(m: &Mat3<S>) -> [S; 4] {
    let r = &m.0;
    let quarter = S::from_f64(0.25);
    let tr = m.trace();
    if tr > S::zero() {
        let s = (tr + S::one()).sqrt() * S::from_f64(2.0);
        [
            quarter * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        ]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (S::one() + r[0][0] - r[1][1] - r[2][2]).sqrt() * S::from_f64(2.0);
        [
            (r[2][1] - r[1][2]) / s,
            quarter * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        ]
    } else if r[1][1] > r[2][2] {
        let s = (S::one() + r[1][1] - r[0][0] - r[2][2]).sqrt() * S::from_f64(2.0);
        [
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            quarter * s,
            (r[1][2] + r[2][1]) / s,
        ]
    } else {
        let s = (S::one() + r[2][2] - r[0][0] - r[1][1]).sqrt() * S::from_f64(2.0);
        [
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            quarter * s,
        ]
    }
}

/// Unit quaternion `[w, x, y, z]` to rotation matrix. Normalizes the input.
pub fn quat_to_mat<S: Scalar>(q: &[S; 4]) -> Mat3<S> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let two = S::from_f64(2.0);
    Mat3([
        [
            S::one() - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            S::one() - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            S::one() - two * (x * x + y * y),
        ],
    ])
}

#[cfg(test)]
mod tests;
