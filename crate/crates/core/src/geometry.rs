//! Rigid-body poses and the small-perturbation algebra the estimator
//! linearizes in.
//!
//! Rotations are Hamilton unit quaternions. A pose perturbation is a 6-vector
//! split into an axis-angle rotation part and a translation part, applied as
//!
//! ```text
//! q <- q * exp(delta_theta)      (right-multiplicative, body frame)
//! p <- p + delta_p               (additive, world frame)
//! ```
//!
//! Every analytic Jacobian in this crate differentiates with respect to this
//! convention, and [`AxisAnglePerturbation::between`] is its exact inverse,
//! so finite-difference checks can be stated without sign gymnastics.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

/// Below this rotation angle (radians), `quat_exp` / `quat_log` switch to
/// their Taylor expansions to avoid dividing by a vanishing norm.
pub const SMALL_ANGLE_EPS: f64 = 1e-8;

/// Quaternion norms are kept within this distance of 1.
pub const QUAT_NORM_TOL: f64 = 1e-12;

/// Skew-symmetric cross-product matrix: `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Maps an axis-angle vector to a unit quaternion.
///
/// For angles below [`SMALL_ANGLE_EPS`] the scalar and vector coefficients
/// come from second-order Taylor expansions of `cos(t/2)` and `sin(t/2)/t`.
pub fn quat_exp(delta_theta: &Vector3<f64>) -> UnitQuaternion<f64> {
    let angle = delta_theta.norm();
    let (w, scale) = if angle < SMALL_ANGLE_EPS {
        let a2 = angle * angle;
        (1.0 - a2 / 8.0, 0.5 - a2 / 48.0)
    } else {
        let half = 0.5 * angle;
        (half.cos(), half.sin() / angle)
    };
    let v = delta_theta * scale;
    UnitQuaternion::from_quaternion(Quaternion::new(w, v.x, v.y, v.z))
}

/// Maps a unit quaternion to its axis-angle vector, the inverse of
/// [`quat_exp`]. The result has magnitude in `[0, pi]`: the sign of the
/// quaternion is canonicalized first so `q` and `-q` map to the same vector.
pub fn quat_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut w = q.w;
    let mut v = Vector3::new(q.i, q.j, q.k);
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < SMALL_ANGLE_EPS {
        // angle/s = 2*atan2(s, w)/s expanded around s = 0 (w close to 1).
        v * (2.0 / w) * (1.0 - s * s / (3.0 * w * w))
    } else {
        v * (2.0 * s.atan2(w) / s)
    }
}

/// A rigid transform: `transform_point(x) = rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    /// Builds a pose, renormalizing the rotation if its norm has drifted
    /// beyond [`QUAT_NORM_TOL`].
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: renormalize(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self * other`, the transform that applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.translation + self.rotation * other.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose::new(inv_rot, -(inv_rot * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Applies a perturbation in the crate-wide convention: rotation
    /// right-multiplied in the body frame, translation added in the world
    /// frame.
    pub fn apply(&self, delta: &AxisAnglePerturbation) -> Pose {
        Pose::new(
            self.rotation * quat_exp(&delta.rotation),
            self.translation + delta.translation,
        )
    }

    /// Geodesic rotation distance to `other`, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        quat_log(&(self.rotation.inverse() * other.rotation)).norm()
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let raw = q.into_inner();
    if (raw.norm() - 1.0).abs() > QUAT_NORM_TOL {
        UnitQuaternion::from_quaternion(raw)
    } else {
        q
    }
}

/// Element of the tangent space at a pose, in the convention documented at
/// module level. `between` and `Pose::apply` are exact inverses:
/// `a.apply(&AxisAnglePerturbation::between(&a, &b)) == b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAnglePerturbation {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl AxisAnglePerturbation {
    pub fn zero() -> Self {
        AxisAnglePerturbation {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        AxisAnglePerturbation {
            rotation,
            translation,
        }
    }

    /// The perturbation taking `a` to `b`.
    pub fn between(a: &Pose, b: &Pose) -> Self {
        AxisAnglePerturbation {
            rotation: quat_log(&(a.rotation.inverse() * b.rotation)),
            translation: b.translation - a.translation,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.rotation.norm_squared() + self.translation.norm_squared()).sqrt()
    }
}
