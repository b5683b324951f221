//! Whole-body kinematics of a holonomic base carrying a serial revolute arm.
//!
//! Generalized coordinates are stacked as `(x, y, theta, q_1 .. q_m)`, so a
//! model with `m` arm joints has `n = m + 3` coordinates. All Jacobians are
//! expressed in the world frame with linear rows first.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{read_toml, Error, Result};
use crate::se3::{rotation_log, wrap_angle, Pose, PoseSpec};

/// Number of base coordinates `(x, y, theta)`.
pub const BASE_DOF: usize = 3;

pub type Jacobian = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct ArmJoint {
    /// Fixed transform from the previous joint frame to this joint's frame.
    pub offset: Pose,
    pub axis: Unit<Vector3<f64>>,
    pub lower: f64,
    pub upper: f64,
    pub vel_limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub joints: Vec<ArmJoint>,
    pub base_vel_xy: f64,
    pub base_vel_theta: f64,
    /// Base frame to arm mount frame.
    pub mount: Pose,
    /// Last joint frame to end-effector (tool) frame.
    pub ee_offset: Pose,
}

/// Stacked base pose and arm joint angles.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub arm: DVector<f64>,
}

impl JointState {
    pub fn new(x: f64, y: f64, theta: f64, arm: DVector<f64>) -> Self {
        Self { x, y, theta, arm }
    }

    pub fn home(m: usize) -> Self {
        Self::new(0.0, 0.0, 0.0, DVector::zeros(m))
    }

    pub fn dof(&self) -> usize {
        self.arm.len() + BASE_DOF
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dof());
        v[0] = self.x;
        v[1] = self.y;
        v[2] = self.theta;
        v.rows_mut(BASE_DOF, self.arm.len()).copy_from(&self.arm);
        v
    }

    /// Inverse of [`JointState::to_vector`]; `theta` is taken verbatim.
    pub fn from_vector(v: &DVector<f64>) -> Self {
        assert!(v.len() > BASE_DOF, "state vector needs base and at least one arm joint");
        Self {
            x: v[0],
            y: v[1],
            theta: v[2],
            arm: v.rows(BASE_DOF, v.len() - BASE_DOF).into_owned(),
        }
    }

    /// Explicit Euler step `q + qdot * dt` with the heading wrapped to `(-pi, pi]`.
    pub fn integrate(&self, qdot: &DVector<f64>, dt: f64) -> JointState {
        let mut s = JointState::from_vector(&(self.to_vector() + qdot * dt));
        s.theta = wrap_angle(s.theta);
        s
    }

    pub fn base_pose(&self) -> Pose {
        Pose::planar(self.x, self.y, self.theta)
    }
}

impl RobotModel {
    pub fn arm_dof(&self) -> usize {
        self.joints.len()
    }

    pub fn dof(&self) -> usize {
        self.joints.len() + BASE_DOF
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::InvalidModel("at least one arm joint is required".into()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel(format!("joint {i}: axis is not unit length")));
            }
            if !(j.lower < j.upper) {
                return Err(Error::InvalidModel(format!("joint {i}: lower limit must be below upper limit")));
            }
            if !(j.vel_limit > 0.0) {
                return Err(Error::InvalidModel(format!("joint {i}: velocity limit must be positive")));
            }
        }
        if !(self.base_vel_xy > 0.0 && self.base_vel_theta > 0.0) {
            return Err(Error::InvalidModel("base velocity limits must be positive".into()));
        }
        Ok(())
    }

    /// Velocity limit per generalized coordinate, base first.
    pub fn velocity_limits(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dof());
        v[0] = self.base_vel_xy;
        v[1] = self.base_vel_xy;
        v[2] = self.base_vel_theta;
        for (i, j) in self.joints.iter().enumerate() {
            v[BASE_DOF + i] = j.vel_limit;
        }
        v
    }

    pub fn check_state(&self, q: &JointState) -> Result<()> {
        if q.arm.len() != self.arm_dof() {
            return Err(Error::Dimension {
                what: "arm joint vector",
                expected: self.arm_dof(),
                got: q.arm.len(),
            });
        }
        Ok(())
    }

    pub fn within_limits(&self, q: &JointState) -> bool {
        self.joints
            .iter()
            .zip(q.arm.iter())
            .all(|(j, &a)| a >= j.lower && a <= j.upper)
    }

    /// World pose of every arm joint frame (after its fixed offset, before its
    /// own rotation is applied) followed by the end-effector pose.
    fn joint_frames(&self, q: &JointState) -> (Vec<Pose>, Pose) {
        let mut t = q.base_pose().compose(&self.mount);
        let mut frames = Vec::with_capacity(self.joints.len());
        for (j, &angle) in self.joints.iter().zip(q.arm.iter()) {
            t = t.compose(&j.offset);
            frames.push(t);
            t = t.compose(&Pose::new(Rotation3::from_axis_angle(&j.axis, angle), Vector3::zeros()));
        }
        (frames, t.compose(&self.ee_offset))
    }

    /// World end-effector pose `T_base(x, y, theta) * T_mount * T_arm(q_a)`.
    pub fn forward_kinematics(&self, q: &JointState) -> Result<Pose> {
        self.check_state(q)?;
        Ok(self.joint_frames(q).1)
    }

    /// Analytic world-frame whole-body Jacobian (6 x n).
    pub fn jacobian(&self, q: &JointState) -> Result<Jacobian> {
        self.check_state(q)?;
        let (frames, ee) = self.joint_frames(q);
        let pe = ee.translation;
        let mut jac = DMatrix::zeros(6, self.dof());

        jac[(0, 0)] = 1.0;
        jac[(1, 1)] = 1.0;
        // heading: e_z x (p_e - p_base)
        jac[(0, 2)] = -(pe.y - q.y);
        jac[(1, 2)] = pe.x - q.x;
        jac[(5, 2)] = 1.0;

        for (i, (frame, joint)) in frames.iter().zip(&self.joints).enumerate() {
            let z = frame.rotation * joint.axis.into_inner();
            let lin = z.cross(&(pe - frame.translation));
            let col = BASE_DOF + i;
            jac.fixed_view_mut::<3, 1>(0, col).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, col).copy_from(&z);
        }
        Ok(jac)
    }

    /// Points along the arm used for collision sampling: the mount, every
    /// joint origin, the midpoint of each link and the end-effector.
    pub fn link_points(&self, q: &JointState) -> Result<Vec<Vector3<f64>>> {
        self.check_state(q)?;
        let (frames, ee) = self.joint_frames(q);
        let mut chain = vec![q.base_pose().compose(&self.mount).translation];
        chain.extend(frames.iter().map(|f| f.translation));
        chain.push(ee.translation);
        let mut pts = Vec::with_capacity(2 * chain.len());
        for w in chain.windows(2) {
            pts.push(w[0]);
            pts.push(0.5 * (w[0] + w[1]));
        }
        pts.push(ee.translation);
        Ok(pts)
    }

    /// Default 7-DoF surrogate arm on a holonomic base.
    ///
    /// Axes alternate z/y. The fixed pitch offsets bake a bent "ready" posture
    /// into the zero configuration so that `q = 0` is well away from the
    /// stretched-out singularity. Shoulder-to-tool reach is 0.9 m. The tool
    /// frame is aligned with the world at home (tool pointing along its -z).
    /// This is a generic surrogate, not a replica of any commercial arm.
    pub fn surrogate_7dof() -> Self {
        let spec = RobotConfig::surrogate();
        spec.into_model().expect("built-in surrogate is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RobotConfig = read_toml(path)?;
        cfg.into_model()
    }
}

/// Central-difference Jacobian of [`RobotModel::forward_kinematics`].
///
/// Angular rows use the axis-angle of `R(q + h e_i) R(q - h e_i)^T` divided by `2h`.
pub fn numeric_jacobian(model: &RobotModel, q: &JointState, h: f64) -> Result<Jacobian> {
    model.check_state(q)?;
    let n = model.dof();
    let base = q.to_vector();
    let mut jac = DMatrix::zeros(6, n);
    for i in 0..n {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += h;
        minus[i] -= h;
        let tp = model.forward_kinematics(&JointState::from_vector(&plus))?;
        let tm = model.forward_kinematics(&JointState::from_vector(&minus))?;
        let lin = (tp.translation - tm.translation) / (2.0 * h);
        let ang = rotation_log((tp.rotation * tm.rotation.inverse()).matrix()) / (2.0 * h);
        jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, i).copy_from(&ang);
    }
    Ok(jac)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseConfig {
    pub vel_limit_xy: f64,
    pub vel_limit_theta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointConfig {
    pub axis: [f64; 3],
    pub offset: PoseSpec,
    pub limits: [f64; 2],
    pub vel_limit: f64,
}

/// On-disk robot description (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotConfig {
    pub base: BaseConfig,
    pub mount_offset: PoseSpec,
    pub ee_offset: PoseSpec,
    pub joints: Vec<JointConfig>,
}

impl RobotConfig {
    pub fn surrogate() -> Self {
        use std::f64::consts::PI;
        let pose = |z: f64, pitch: f64| PoseSpec {
            translation: [0.0, 0.0, z],
            rpy: [0.0, pitch, 0.0],
        };
        let zs = [0.0, 0.0, 1.0];
        let ys = [0.0, 1.0, 0.0];
        let joint = |axis, offset| JointConfig {
            axis,
            offset,
            limits: [-2.8, 2.8],
            vel_limit: 2.0,
        };
        RobotConfig {
            base: BaseConfig {
                vel_limit_xy: 0.5,
                vel_limit_theta: 1.0,
            },
            mount_offset: PoseSpec {
                translation: [0.2, 0.0, 0.4],
                rpy: [0.0; 3],
            },
            ee_offset: PoseSpec {
                translation: [0.0, 0.0, 0.10],
                rpy: [0.0, PI, 0.0],
            },
            joints: vec![
                joint(zs, pose(0.10, 0.0)),
                joint(ys, pose(0.05, -0.16)),
                joint(zs, pose(0.40, 0.0)),
                joint(ys, pose(0.0, 1.27)),
                joint(zs, pose(0.35, 0.0)),
                joint(ys, pose(0.0, PI - 1.11)),
                joint(zs, pose(0.05, 0.0)),
            ],
        }
    }

    pub fn into_model(self) -> Result<RobotModel> {
        let joints = self
            .joints
            .iter()
            .enumerate()
            .map(|(i, j)| {
                let axis = Vector3::from(j.axis);
                if (axis.norm() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidModel(format!("joint {i}: axis is not unit length")));
                }
                Ok(ArmJoint {
                    offset: j.offset.into(),
                    axis: Unit::new_unchecked(axis),
                    lower: j.limits[0],
                    upper: j.limits[1],
                    vel_limit: j.vel_limit,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = RobotModel {
            joints,
            base_vel_xy: self.base.vel_limit_xy,
            base_vel_theta: self.base.vel_limit_theta,
            mount: self.mount_offset.into(),
            ee_offset: self.ee_offset.into(),
        };
        model.validate()?;
        Ok(model)
    }
}
