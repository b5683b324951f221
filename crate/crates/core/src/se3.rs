//! Rigid transforms and the SO(3) logarithm used for pose errors.

use std::ops::Mul;

use nalgebra::{Matrix3, Point3, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// A rigid transform: rotate, then translate.
///
/// Composition follows the usual frame-chaining convention, `a * b` maps
/// points expressed in the child frame of `b` into the parent frame of `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Rotation3::identity(), Vector3::new(x, y, z))
    }

    /// Roll/pitch/yaw about fixed x, y, z axes: `R = Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_xyz_rpy(translation: [f64; 3], rpy: [f64; 3]) -> Self {
        Self::new(
            Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]),
            Vector3::from(translation),
        )
    }

    /// Planar pose: yaw `theta` about world z at `(x, y, 0)`.
    pub fn planar(x: f64, y: f64, theta: f64) -> Self {
        Self::new(
            Rotation3::from_axis_angle(&Vector3::z_axis(), theta),
            Vector3::new(x, y, 0.0),
        )
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation matrix is orthonormal with unit determinant within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = self.rotation.matrix();
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        ortho <= tol && (r.determinant() - 1.0).abs() <= tol && self.translation.iter().all(|v| v.is_finite())
    }

    /// Re-orthonormalize the rotation (SVD projection onto SO(3)).
    pub fn renormalized(&self) -> Pose {
        Pose {
            rotation: Rotation3::from_matrix(self.rotation.matrix()),
            translation: self.translation,
        }
    }

    /// Largest element-wise difference of rotation matrices and translations.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let dr = (self.rotation.matrix() - other.rotation.matrix()).amax();
        let dt = (self.translation - other.translation).amax();
        dr.max(dt)
    }

    pub fn position(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;

    fn mul(self, rhs: &'a Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Serialized pose: translation plus roll/pitch/yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl From<PoseSpec> for Pose {
    fn from(s: PoseSpec) -> Self {
        Pose::from_xyz_rpy(s.translation, s.rpy)
    }
}

/// Below this `sin(angle)` the axis is recovered from the symmetric part.
const NEAR_PI_SIN: f64 = 1e-6;

/// Logarithm of a rotation matrix as an axis-angle vector with angle in `[0, pi]`.
///
/// For angles at (or numerically indistinguishable from) pi the axis is read
/// from the column of `(R + I) / 2` with the largest diagonal entry, and
/// its sign is fixed so that this component is positive. Away from pi the sign
/// follows the skew-symmetric part as usual.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * skew.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    let angle = sin.atan2(cos);

    if sin > NEAR_PI_SIN || cos > 0.0 {
        // theta / sin(theta) -> 1 as theta -> 0
        let scale = if sin < 1e-15 { 0.5 } else { 0.5 * angle / sin };
        return skew * scale;
    }

    // Near pi: R ~ 2 a a^T - I, so the diagonal of (R + I)/2 holds a_i^2.
    let sym = (r + Matrix3::identity()) * 0.5;
    let mut pivot = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(pivot, pivot)] {
            pivot = i;
        }
    }
    let denom = sym[(pivot, pivot)].max(0.0).sqrt();
    let mut axis = Vector3::zeros();
    for i in 0..3 {
        axis[i] = if i == pivot {
            denom
        } else {
            0.5 * (sym[(i, pivot)] + sym[(pivot, i)]) / denom
        };
    }
    axis.normalize_mut();
    if skew.dot(&axis) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

pub fn rotation_exp(w: &Vector3<f64>) -> Rotation3<f64> {
    Rotation3::new(*w)
}

/// World-frame error twist `(v; w)` that moves `current` toward `goal`.
///
/// `v` is the translation difference, `w` the axis-angle of
/// `R_goal * R_current^T`.
pub fn pose_error_twist(current: &Pose, goal: &Pose) -> Vector6<f64> {
    let v = goal.translation - current.translation;
    let rel = goal.rotation * current.rotation.inverse();
    let w = rotation_log(rel.matrix());
    Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
}

pub fn twist_linear(t: &Vector6<f64>) -> Vector3<f64> {
    Vector3::new(t[0], t[1], t[2])
}

pub fn twist_angular(t: &Vector6<f64>) -> Vector3<f64> {
    Vector3::new(t[3], t[4], t[5])
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform3(-2.0f64..2.0),
        )
            .prop_map(|(w, t)| Pose::new(rotation_exp(&Vector3::from(w)), Vector3::from(t)))
    }

    #[test]
    fn compose_identity_and_inverse() {
        let p = Pose::new(
            rotation_exp(&Vector3::new(0.3, -0.2, 1.1)),
            Vector3::new(0.4, 1.0, -0.2),
        );
        assert!(Pose::identity().compose(&p).max_abs_diff(&p) < 1e-15);
        assert!(p.compose(&p.inverse()).max_abs_diff(&Pose::identity()) < 1e-12);
    }

    #[test]
    fn compose_rotated_frame_then_translation() {
        let a = Pose::new(
            Rotation3::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2),
            Vector3::new(1.0, 0.0, 0.0),
        );
        let b = Pose::from_translation(1.0, 0.0, 0.0);
        let c = a.compose(&b);
        // homogeneous-matrix product as an independent check
        let expected = a.rotation.to_homogeneous() * b.rotation.to_homogeneous();
        let mut ha = a.rotation.to_homogeneous();
        ha.fixed_view_mut::<3, 1>(0, 3).copy_from(&a.translation);
        let mut hb = b.rotation.to_homogeneous();
        hb.fixed_view_mut::<3, 1>(0, 3).copy_from(&b.translation);
        let h = ha * hb;
        assert_relative_eq!(c.translation, Vector3::new(1.0, 1.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(h.fixed_view::<3, 1>(0, 3).into_owned(), c.translation, epsilon = 1e-15);
        assert_relative_eq!(
            expected.fixed_view::<3, 3>(0, 0).into_owned(),
            *c.rotation.matrix(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn error_twist_examples() {
        let p = Pose::from_xyz_rpy([0.1, 0.2, 0.3], [0.2, -0.4, 0.9]);
        assert_eq!(pose_error_twist(&p, &p).amax(), 0.0);

        let g = Pose::new(p.rotation, p.translation + Vector3::new(0.3, 0.0, 0.0));
        let e = pose_error_twist(&p, &g);
        assert_relative_eq!(e, Vector6::new(0.3, 0.0, 0.0, 0.0, 0.0, 0.0), epsilon = 1e-15);

        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), 0.2);
        let g = Pose::new(rz * p.rotation, p.translation);
        let e = pose_error_twist(&p, &g);
        assert_relative_eq!(twist_angular(&e), Vector3::new(0.0, 0.0, 0.2), epsilon = 1e-9);
    }

    #[test]
    fn log_at_pi_picks_largest_diagonal_axis() {
        for axis in [Vector3::x(), Vector3::y(), Vector3::z(), Vector3::new(1.0, 1.0, 0.0).normalize()] {
            let r = rotation_exp(&(axis * PI));
            let w = rotation_log(r.matrix());
            assert_relative_eq!(w.norm(), PI, epsilon = 1e-9);
            // rotation is preserved even if the sign of the axis flipped
            assert!((rotation_exp(&w).matrix() - r.matrix()).amax() < 1e-9);
            // tie-break: the pivot component is positive
            let pivot = w.iamax();
            assert!(w[pivot] > 0.0);
        }
        // deterministic on the exact matrix
        let r = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(rotation_log(&r), Vector3::new(0.0, 0.0, PI), epsilon = 1e-12);
    }

    #[test]
    fn log_near_pi_keeps_sign() {
        let w = Vector3::new(0.2, -0.5, 0.7).normalize() * (PI - 1e-8);
        let back = rotation_log(rotation_exp(&w).matrix());
        assert!((back - w).amax() < 1e-6, "{back} vs {w}");
    }

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(wrap_angle(PI), PI);
        assert_relative_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI + 0.1), -PI + 0.1, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(0.5), 0.5);
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(l.max_abs_diff(&r) < 1e-12);
            prop_assert!(l.is_valid(1e-9));
        }

        #[test]
        fn log_exp_roundtrip(w in prop::array::uniform3(-1.8f64..1.8)) {
            let w = Vector3::from(w);
            prop_assume!(w.norm() < PI - 1e-3);
            let back = rotation_log(rotation_exp(&w).matrix());
            prop_assert!((back - w).amax() < 1e-10);
        }

        #[test]
        fn inverse_cancels(a in arb_pose()) {
            prop_assert!(a.compose(&a.inverse()).max_abs_diff(&Pose::identity()) < 1e-9);
        }
    }
}
