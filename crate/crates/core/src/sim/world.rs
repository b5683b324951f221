//! World state, kinematic integration, grasping and phase transitions.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use crate::error::Result;
use crate::kinematics::{JointState, RobotModel};
use crate::se3::{rotation_log, wrap_angle, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    NavA,
    DeskA,
    NavB,
    DeskB,
    Done,
}

impl Phase {
    pub const TASK: [Phase; 4] = [Phase::NavA, Phase::DeskA, Phase::NavB, Phase::DeskB];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::NavA => "NavA",
            Phase::DeskA => "DeskA",
            Phase::NavB => "NavB",
            Phase::DeskB => "DeskB",
            Phase::Done => "Done",
        }
    }

    pub fn is_navigation(self) -> bool {
        matches!(self, Phase::NavA | Phase::NavB)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Gripper {
    #[default]
    Open,
    Close,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub robot: JointState,
    pub object_pose: Pose,
    /// Object frame relative to the end-effector while attached.
    pub grasp_offset: Option<Pose>,
    pub gripper: Gripper,
    pub time: f64,
    pub phase: Phase,
    /// Rear camera angle: carried for completeness, unused by control.
    pub phi_cam: f64,
    /// Phase entry times for `DeskA`, `NavB`, `DeskB`, `Done`.
    pub boundaries: Vec<f64>,
}

impl WorldState {
    pub fn initial(model: &RobotModel, scene: &Scene) -> Self {
        let [x, y, theta] = scene.robot_start;
        Self {
            robot: JointState::new(x, y, wrap_angle(theta), DVector::zeros(model.arm_dof())),
            object_pose: scene.object_start,
            grasp_offset: None,
            gripper: Gripper::Open,
            time: 0.0,
            phase: Phase::NavA,
            phi_cam: 0.0,
            boundaries: Vec::with_capacity(4),
        }
    }

    pub fn attached(&self) -> bool {
        self.grasp_offset.is_some()
    }
}

/// Integrate one command: `q += qdot * dt`, time advances by `period`
/// (`>= dt`), and an attached object follows the end-effector.
pub fn step_world(model: &RobotModel, w: &WorldState, qdot: &DVector<f64>, dt: f64, period: f64) -> Result<WorldState> {
    debug_assert!(dt > 0.0 && period >= dt);
    let robot = w.robot.integrate(qdot, dt);
    let mut next = WorldState { robot, time: w.time + period, ..w.clone() };
    if let Some(offset) = &w.grasp_offset {
        next.object_pose = model.forward_kinematics(&next.robot)?.compose(offset);
    }
    Ok(next)
}

/// Attach on a close command inside the grasp window; release on open, in
/// which case the object settles onto the surface below it.
pub fn apply_gripper(model: &RobotModel, w: &mut WorldState, cmd: Gripper, scene: &Scene) -> Result<()> {
    w.gripper = cmd;
    match (cmd, w.attached()) {
        (Gripper::Close, false) => {
            let ee = model.forward_kinematics(&w.robot)?;
            let target = scene.grasp_pose(&w.object_pose);
            let dp = (ee.translation - target.translation).norm();
            let da = rotation_log((target.rotation * ee.rotation.inverse()).matrix()).norm();
            let th = &scene.thresholds;
            if dp <= th.attach_position && da <= th.attach_angle {
                w.grasp_offset = Some(ee.inverse().compose(&w.object_pose));
            }
        }
        (Gripper::Open, true) => {
            w.grasp_offset = None;
            let p = &mut w.object_pose.translation;
            p.z = scene.tables().iter().find(|t| t.contains_xy(p)).map_or(0.0, |t| t.height);
        }
        _ => {}
    }
    Ok(())
}

/// Slack on threshold comparisons so boundary values computed in floating
/// point still count as reached.
const THRESHOLD_EPS: f64 = 1e-9;

/// Base within tolerance of a planar approach pose.
pub fn base_at(q: &JointState, target: [f64; 3], scene: &Scene) -> bool {
    let th = &scene.thresholds;
    (q.x - target[0]).hypot(q.y - target[1]) <= th.base_position + THRESHOLD_EPS
        && wrap_angle(q.theta - target[2]).abs() <= th.base_heading + THRESHOLD_EPS
}

/// Distance from the end-effector to the grasp pose of the (released) object.
pub fn retreat_distance(model: &RobotModel, w: &WorldState, scene: &Scene) -> Result<f64> {
    let ee = model.forward_kinematics(&w.robot)?;
    Ok((ee.translation - scene.grasp_pose(&w.object_pose).translation).norm())
}

/// Advance the task phase when its exit condition holds (at most one step).
pub fn phase_update(model: &RobotModel, w: &mut WorldState, scene: &Scene) -> Result<()> {
    let th = &scene.thresholds;
    let advance = match w.phase {
        Phase::NavA => base_at(&w.robot, scene.approach_a, scene),
        Phase::DeskA => w.attached() && w.object_pose.translation.z - scene.table_a.height >= th.lift_height - THRESHOLD_EPS,
        Phase::NavB => base_at(&w.robot, scene.approach_b, scene),
        Phase::DeskB => {
            !w.attached()
                && (w.object_pose.translation - scene.place_goal.translation).norm() <= th.place_position + THRESHOLD_EPS
                && retreat_distance(model, w, scene)? >= th.retreat_distance - THRESHOLD_EPS
        }
        Phase::Done => false,
    };
    if advance {
        w.phase = match w.phase {
            Phase::NavA => Phase::DeskA,
            Phase::DeskA => Phase::NavB,
            Phase::NavB => Phase::DeskB,
            Phase::DeskB | Phase::Done => Phase::Done,
        };
        w.boundaries.push(w.time);
    }
    Ok(())
}
