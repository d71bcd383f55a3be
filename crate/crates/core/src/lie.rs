//! SO(3) / SE(3) group operations.
//!
//! Tangent vectors are ordered translation-first: `(rho, theta)`. All
//! residuals in this crate take the form `log(between(estimate, measurement))`
//! and are perturbed on the right, `X <- X * exp(delta)`, so the Jacobians
//! exposed here are the standard right/left Jacobians of SE(3).

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use thiserror::Error;

/// Below this rotation angle the closed forms switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-5;

/// Angles within this distance of pi have an ambiguous logarithm.
pub const BRANCH_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LieError {
    /// The rotation is (numerically) a half turn; `tangent` is one of the two
    /// valid logarithms.
    #[error("rotation angle {angle} is within {BRANCH_TOLERANCE} of pi; logarithm branch is ambiguous")]
    BranchAmbiguity { angle: f64, tangent: Tangent6 },
}

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// An element of se(3): translational part `rho` (meters) and rotational
/// part `theta` (radians).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tangent6 {
    pub rho: Vector3<f64>,
    pub theta: Vector3<f64>,
}

impl Tangent6 {
    pub fn new(rho: Vector3<f64>, theta: Vector3<f64>) -> Self {
        Self { rho, theta }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rho: Vector3::new(v[0], v[1], v[2]),
            theta: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x,
            self.rho.y,
            self.rho.z,
            self.theta.x,
            self.theta.y,
            self.theta.z,
        )
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rho: self.rho * s,
            theta: self.theta * s,
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

impl std::ops::Add for Tangent6 {
    type Output = Tangent6;
    fn add(self, rhs: Tangent6) -> Tangent6 {
        Tangent6::new(self.rho + rhs.rho, self.theta + rhs.theta)
    }
}

impl std::ops::Sub for Tangent6 {
    type Output = Tangent6;
    fn sub(self, rhs: Tangent6) -> Tangent6 {
        Tangent6::new(self.rho - rhs.rho, self.theta - rhs.theta)
    }
}

impl std::ops::Neg for Tangent6 {
    type Output = Tangent6;
    fn neg(self) -> Tangent6 {
        Tangent6::new(-self.rho, -self.theta)
    }
}

/// A proper rotation stored as a unit quaternion.
pub type Rotation = UnitQuaternion<f64>;

/// Rigid transform: `p -> rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.quaternion();
        write!(
            f,
            "Pose(t: [{:.4}, {:.4}, {:.4}], q: [{:.4}, {:.4}, {:.4}, {:.4}])",
            self.translation.x, self.translation.y, self.translation.z, q.w, q.i, q.j, q.k
        )
    }
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// Builds a pose from a `(w, x, y, z)` quaternion, normalizing it.
    pub fn from_parts(t: [f64; 3], q_wxyz: [f64; 4]) -> Self {
        let q = Quaternion::new(q_wxyz[0], q_wxyz[1], q_wxyz[2], q_wxyz[3]);
        // keep already-normalized input bit-exact so JSON roundtrips are stable
        let rotation = if (q.norm_squared() - 1.0).abs() < 4.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Self::new(rotation, Vector3::from(t))
    }

    /// `(w, x, y, z)` with `w >= 0`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            renormalize(self.rotation * other.rotation),
            self.translation + self.rotation * other.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose::new(r_inv, -(r_inv * self.translation))
    }

    /// `self^-1 * other`.
    pub fn between(&self, other: &Pose) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose::new(
            renormalize(r_inv * other.rotation),
            r_inv * (other.translation - self.translation),
        )
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Right retraction `self * exp(delta)`.
    pub fn retract(&self, delta: &Tangent6) -> Pose {
        self.compose(&exp_se3(delta))
    }

    /// 6x6 adjoint in `(rho, theta)` ordering.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * r));
        ad
    }

    pub fn to_matrix(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

// Keeps long composition chains on the unit sphere.
fn renormalize(q: Rotation) -> Rotation {
    UnitQuaternion::from_quaternion(q.into_inner())
}

pub fn between(a: &Pose, b: &Pose) -> Pose {
    a.between(b)
}

pub fn exp_so3(theta: &Vector3<f64>) -> Rotation {
    let angle2 = theta.norm_squared();
    let angle = angle2.sqrt();
    let (w, s) = if angle < SMALL_ANGLE {
        // sin(a/2)/a and cos(a/2) to fourth order
        (1.0 - angle2 / 8.0, 0.5 - angle2 / 48.0)
    } else {
        let half = 0.5 * angle;
        (half.cos(), half.sin() / angle)
    };
    renormalize(UnitQuaternion::new_unchecked(Quaternion::new(
        w,
        s * theta.x,
        s * theta.y,
        s * theta.z,
    )))
}

/// Rotation vector of `r`, with angle in `[0, pi]`.
pub fn log_so3(r: &Rotation) -> Vector3<f64> {
    let q = r.quaternion();
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = v.norm();
    if n < 0.5 * SMALL_ANGLE {
        // 2 atan(n/w)/n ~= 2/w (1 - n^2 / (3 w^2))
        v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    } else {
        v * (2.0 * n.atan2(w) / n)
    }
}

/// Rotation angle in `[0, pi]`.
pub fn rotation_angle(r: &Rotation) -> f64 {
    let q = r.quaternion();
    let n = q.imag().norm();
    2.0 * n.atan2(q.w.abs())
}

pub fn translation_distance(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm()
}

/// Coefficients `(1 - cos a) / a^2` and `(a - sin a) / a^3`.
fn so3_coeffs(angle: f64) -> (f64, f64) {
    if angle < SMALL_ANGLE {
        let a2 = angle * angle;
        (0.5 - a2 / 24.0, 1.0 / 6.0 - a2 / 120.0)
    } else {
        let a2 = angle * angle;
        ((1.0 - angle.cos()) / a2, (angle - angle.sin()) / (a2 * angle))
    }
}

/// Left Jacobian of SO(3); also the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian(theta: &Vector3<f64>) -> Matrix3<f64> {
    let (c1, c2) = so3_coeffs(theta.norm());
    let k = hat(theta);
    Matrix3::identity() + k * c1 + k * k * c2
}

pub fn so3_left_jacobian_inverse(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let k = hat(theta);
    let c = if angle < SMALL_ANGLE {
        1.0 / 12.0 + angle * angle / 720.0
    } else {
        1.0 / (angle * angle) - (1.0 + angle.cos()) / (2.0 * angle * angle.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

pub fn exp_se3(x: &Tangent6) -> Pose {
    Pose::new(exp_so3(&x.theta), so3_left_jacobian(&x.theta) * x.rho)
}

/// Logarithm of `t`. Near a half turn one of the two valid branches is
/// returned; see [`log_se3_checked`] to detect that case.
pub fn log_se3(t: &Pose) -> Tangent6 {
    let theta = log_so3(&t.rotation);
    let rho = so3_left_jacobian_inverse(&theta) * t.translation;
    Tangent6::new(rho, theta)
}

pub fn log_se3_checked(t: &Pose) -> Result<Tangent6, LieError> {
    let tangent = log_se3(t);
    let angle = tangent.theta.norm();
    if PI - angle < BRANCH_TOLERANCE {
        Err(LieError::BranchAmbiguity { angle, tangent })
    } else {
        Ok(tangent)
    }
}

/// The `Q` block of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vector3<f64>, theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let a2 = angle * angle;
    let (c1, c2, c3) = if angle < SMALL_ANGLE {
        (1.0 / 6.0 - a2 / 120.0, 1.0 / 24.0 - a2 / 720.0, 1.0 / 120.0)
    } else {
        let (s, c) = angle.sin_cos();
        (
            (angle - s) / (a2 * angle),
            (a2 + 2.0 * c - 2.0) / (2.0 * a2 * a2),
            (2.0 * angle - 3.0 * s + angle * c) / (2.0 * a2 * a2 * angle),
        )
    };
    let p = hat(rho);
    let t = hat(theta);
    let tp = t * p;
    let pt = p * t;
    let tpt = tp * t;
    p * 0.5 + (tp + pt + tpt) * c1 + (t * tp + pt * t - tpt * 3.0) * c2 + (tpt * t + t * tpt) * c3
}

pub fn se3_left_jacobian(x: &Tangent6) -> Matrix6<f64> {
    let j = so3_left_jacobian(&x.theta);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&se3_q_block(&x.rho, &x.theta));
    out
}

pub fn se3_left_jacobian_inverse(x: &Tangent6) -> Matrix6<f64> {
    let j_inv = so3_left_jacobian_inverse(&x.theta);
    let q = se3_q_block(&x.rho, &x.theta);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-j_inv * q * j_inv));
    out
}

pub fn se3_right_jacobian(x: &Tangent6) -> Matrix6<f64> {
    se3_left_jacobian(&-*x)
}

pub fn se3_right_jacobian_inverse(x: &Tangent6) -> Matrix6<f64> {
    se3_left_jacobian_inverse(&-*x)
}

/// Serialized form shared by every file format: translation in meters and a
/// unit quaternion ordered `(w, x, y, z)`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    t: [f64; 3],
    q: [f64; 4],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRecord {
            t: [self.translation.x, self.translation.y, self.translation.z],
            q: self.quaternion_wxyz(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = PoseRecord::deserialize(d)?;
        let norm = rec.q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-6) || rec.t.iter().any(|v| !v.is_finite()) {
            return Err(serde::de::Error::custom(
                "pose needs finite `t` and a non-zero quaternion `q` (w, x, y, z)",
            ));
        }
        Ok(Pose::from_parts(rec.t, rec.q))
    }
}
