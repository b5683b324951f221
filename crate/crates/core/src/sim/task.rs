//! Stage sequencing and end-effector goal sources.
//!
//! A single [`Sequencer`] turns world events (phase changes, attach/release,
//! waypoint arrival) into stages; goal sources differ only in how they map a
//! stage and state to an end-effector goal.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use super::world::{Gripper, Phase, WorldState};
use crate::diffusion::{DiffusionPolicy, ACTION_DIM};
use crate::error::{Error, Result};
use crate::kinematics::RobotModel;
use crate::se3::{rotation_exp, rotation_log, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Approach,
    PreGrasp,
    Grasp,
    Lift,
    Carry,
    PrePlace,
    Place,
    Retreat,
}

impl Stage {
    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Waypoint geometry and arrival tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaypointConfig {
    pub reach_position: f64,
    pub reach_angle: f64,
    /// A waypoint also counts as reached once the end-effector has settled
    /// (speed below `settle_speed`) inside this looser window. Preference
    /// terms leave a small steady-state offset under proportional servoing.
    pub settle_position: f64,
    pub settle_angle: f64,
    pub settle_speed: f64,
    /// Hover height of pre-grasp and pre-place waypoints.
    pub hover_height: f64,
    pub lift_height: f64,
    pub retreat_height: f64,
}

impl Default for WaypointConfig {
    fn default() -> Self {
        Self {
            reach_position: 0.01,
            reach_angle: 0.05,
            settle_position: 0.03,
            settle_angle: 0.15,
            settle_speed: 0.005,
            hover_height: 0.10,
            lift_height: 0.15,
            retreat_height: 0.15,
        }
    }
}

fn reached(ee: &Pose, goal: &Pose, speed: f64, cfg: &WaypointConfig) -> bool {
    let dp = (ee.translation - goal.translation).norm();
    let da = rotation_log((goal.rotation * ee.rotation.inverse()).matrix()).norm();
    (dp <= cfg.reach_position && da <= cfg.reach_angle)
        || (speed <= cfg.settle_speed && dp <= cfg.settle_position && da <= cfg.settle_angle)
}

fn raised(p: &Pose, dz: f64) -> Pose {
    Pose::new(p.rotation, p.translation + Vector3::new(0.0, 0.0, dz))
}

/// Goal that keeps the current end-effector pose relative to the base but
/// re-anchors it at a target base pose; its only fixed point puts the base
/// on the target.
pub fn relative_carry_goal(w: &WorldState, ee: &Pose, target: [f64; 3]) -> Pose {
    let [x, y, theta] = target;
    Pose::planar(x, y, theta) * (w.robot.base_pose().inverse() * *ee)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequencer {
    pub cfg: WaypointConfig,
    stage: Stage,
    gripper: Gripper,
    lift_from: Option<Pose>,
    release_from: Option<Pose>,
    /// Previous end-effector position and time, for the settle test.
    prev: Option<(Vector3<f64>, f64)>,
}

impl Sequencer {
    pub fn new(cfg: WaypointConfig) -> Self {
        Self {
            cfg,
            stage: Stage::Approach,
            gripper: Gripper::Open,
            lift_from: None,
            release_from: None,
            prev: None,
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn gripper(&self) -> Gripper {
        self.gripper
    }

    /// Advance on world events. `last_goal` is the goal servoed toward on
    /// the previous tick, used for arrival checks.
    pub fn sync(&mut self, w: &WorldState, ee: &Pose, last_goal: Option<&Pose>) {
        let speed = match self.prev {
            Some((p, t)) if w.time > t => (ee.translation - p).norm() / (w.time - t),
            _ => f64::INFINITY,
        };
        self.prev = Some((ee.translation, w.time));
        let arrived = last_goal.is_some_and(|g| reached(ee, g, speed, &self.cfg));
        let next = match self.stage {
            Stage::Approach if w.phase >= Phase::DeskA => Stage::PreGrasp,
            Stage::PreGrasp if arrived => Stage::Grasp,
            Stage::Grasp if w.attached() => Stage::Lift,
            Stage::Lift if w.phase >= Phase::NavB => Stage::Carry,
            Stage::Carry if w.phase >= Phase::DeskB => Stage::PrePlace,
            Stage::PrePlace if arrived => Stage::Place,
            Stage::Place if !w.attached() => Stage::Retreat,
            other => other,
        };
        if next == self.stage {
            // gripper commands latch on arrival at the grasp / place pose
            match self.stage {
                Stage::Grasp if arrived => self.gripper = Gripper::Close,
                Stage::Place if arrived => self.gripper = Gripper::Open,
                _ => {}
            }
            return;
        }
        match next {
            Stage::Lift => self.lift_from = Some(*ee),
            Stage::Retreat => self.release_from = Some(*ee),
            _ => {}
        }
        self.stage = next;
    }

    /// Expert goal for the current stage.
    pub fn scripted_goal(&self, w: &WorldState, ee: &Pose, scene: &Scene) -> Pose {
        let c = &self.cfg;
        let release_pose = || {
            let offset = w.grasp_offset.unwrap_or_else(|| scene.grasp_offset.inverse());
            scene.place_goal * offset.inverse()
        };
        match self.stage {
            Stage::Approach => relative_carry_goal(w, ee, scene.approach_a),
            Stage::PreGrasp => raised(&scene.grasp_pose(&w.object_pose), c.hover_height),
            Stage::Grasp => scene.grasp_pose(&w.object_pose),
            Stage::Lift => raised(&self.lift_from.unwrap_or(*ee), c.lift_height),
            Stage::Carry => relative_carry_goal(w, ee, scene.approach_b),
            Stage::PrePlace => raised(&release_pose(), c.hover_height),
            Stage::Place => release_pose(),
            Stage::Retreat => raised(&self.release_from.unwrap_or(*ee), c.retreat_height),
        }
    }
}

/// Critically damped second-order shaping of the commanded goal.
///
/// Waypoint switches would otherwise step the servo twist in one tick. The
/// rotation state is integrated on SO(3) with a world-frame angular rate.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalFilter {
    bandwidth: f64,
    pose: Pose,
    lin_vel: Vector3<f64>,
    ang_vel: Vector3<f64>,
}

impl GoalFilter {
    pub fn new(bandwidth: f64, start: Pose) -> Self {
        Self { bandwidth, pose: start, lin_vel: Vector3::zeros(), ang_vel: Vector3::zeros() }
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    /// Advance by `dt` toward `target` and return the shaped goal.
    pub fn update(&mut self, target: &Pose, dt: f64) -> Pose {
        let w = self.bandwidth;
        let e_lin = target.translation - self.pose.translation;
        let e_ang = rotation_log((target.rotation * self.pose.rotation.inverse()).matrix());
        self.lin_vel += (e_lin * (w * w) - self.lin_vel * (2.0 * w)) * dt;
        self.ang_vel += (e_ang * (w * w) - self.ang_vel * (2.0 * w)) * dt;
        self.pose.translation += self.lin_vel * dt;
        self.pose.rotation = rotation_exp(&(self.ang_vel * dt)) * self.pose.rotation;
        self.pose
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalCommand {
    pub pose: Pose,
    pub gripper: Gripper,
}

/// Source of end-effector goals for the control loop.
pub trait GoalSource {
    fn next_goal(&mut self, model: &RobotModel, w: &WorldState, scene: &Scene) -> Result<GoalCommand>;

    /// Stage label for logs; sources without stages report `None`.
    fn stage(&self) -> Option<Stage> {
        None
    }
}

/// Constant goal with the gripper open.
#[derive(Debug, Clone, Copy)]
pub struct FixedGoal(pub Pose);

impl GoalSource for FixedGoal {
    fn next_goal(&mut self, _: &RobotModel, _: &WorldState, _: &Scene) -> Result<GoalCommand> {
        Ok(GoalCommand { pose: self.0, gripper: Gripper::Open })
    }
}

/// Expert waypoints.
#[derive(Debug, Clone)]
pub struct ScriptedGoals {
    seq: Sequencer,
    last: Option<Pose>,
}

impl ScriptedGoals {
    pub fn new(cfg: WaypointConfig) -> Self {
        Self { seq: Sequencer::new(cfg), last: None }
    }
}

impl GoalSource for ScriptedGoals {
    fn next_goal(&mut self, model: &RobotModel, w: &WorldState, scene: &Scene) -> Result<GoalCommand> {
        let ee = model.forward_kinematics(&w.robot)?;
        self.seq.sync(w, &ee, self.last.as_ref());
        let pose = self.seq.scripted_goal(w, &ee, scene);
        self.last = Some(pose);
        Ok(GoalCommand { pose, gripper: self.seq.gripper() })
    }

    fn stage(&self) -> Option<Stage> {
        Some(self.seq.stage())
    }
}

/// Length of the policy condition vector.
pub const CONDITION_DIM: usize = 4 + 3 + 3 + 3 + 3 + 1 + Stage::COUNT;

/// Condition vector: base `(x, y, cos, sin)`, end-effector position and
/// axis-angle, object position, place position, attached flag, stage one-hot.
pub fn condition(w: &WorldState, ee: &Pose, scene: &Scene, stage: Stage) -> DVector<f64> {
    let mut h = Vec::with_capacity(CONDITION_DIM);
    h.extend([w.robot.x, w.robot.y, w.robot.theta.cos(), w.robot.theta.sin()]);
    h.extend(ee.translation.iter());
    h.extend(rotation_log(ee.rotation.matrix()).iter());
    h.extend(w.object_pose.translation.iter());
    h.extend(scene.place_goal.translation.iter());
    h.push(if w.attached() { 1.0 } else { 0.0 });
    h.extend((0..Stage::COUNT).map(|i| if i == stage.index() { 1.0 } else { 0.0 }));
    DVector::from_vec(h)
}

/// Goal pose as a 6-vector: position then axis-angle.
pub fn pose_to_action(p: &Pose) -> DVector<f64> {
    let w = rotation_log(p.rotation.matrix());
    DVector::from_vec(vec![p.translation.x, p.translation.y, p.translation.z, w.x, w.y, w.z])
}

pub fn action_to_pose(a: &DVector<f64>) -> Result<Pose> {
    if a.len() != ACTION_DIM {
        return Err(Error::Dimension { what: "action", expected: ACTION_DIM, got: a.len() });
    }
    Ok(Pose::new(rotation_exp(&Vector3::new(a[3], a[4], a[5])), Vector3::new(a[0], a[1], a[2])))
}

/// Goals sampled from a diffusion policy, re-queried at a fixed period and
/// on every stage change.
#[derive(Debug)]
pub struct PolicyGoals<'a> {
    seq: Sequencer,
    policy: &'a DiffusionPolicy,
    period: f64,
    seed: u64,
    queries: u64,
    planned: Option<(f64, Stage, Pose)>,
}

impl<'a> PolicyGoals<'a> {
    pub fn new(policy: &'a DiffusionPolicy, cfg: WaypointConfig, period: f64, seed: u64) -> Self {
        Self { seq: Sequencer::new(cfg), policy, period, seed, queries: 0, planned: None }
    }
}

impl GoalSource for PolicyGoals<'_> {
    fn next_goal(&mut self, model: &RobotModel, w: &WorldState, scene: &Scene) -> Result<GoalCommand> {
        let ee = model.forward_kinematics(&w.robot)?;
        self.seq.sync(w, &ee, self.planned.as_ref().map(|p| &p.2));
        let stage = self.seq.stage();
        let stale = match self.planned {
            Some((t, s, _)) => s != stage || w.time - t >= self.period - 1e-9,
            None => true,
        };
        if stale {
            let h = condition(w, &ee, scene, stage);
            let seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.queries);
            let pose = action_to_pose(&self.policy.sample(&h, seed)?)?;
            self.queries += 1;
            self.planned = Some((w.time, stage, pose));
        }
        let pose = self.planned.expect("planned above").2;
        Ok(GoalCommand { pose, gripper: self.seq.gripper() })
    }

    fn stage(&self) -> Option<Stage> {
        Some(self.seq.stage())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::JointState;
    use crate::sim::scene::SceneConfig;

    #[test]
    fn goal_filter_converges_without_overshoot() {
        let target = Pose::new(rotation_exp(&Vector3::new(0.0, 0.0, 0.8)), Vector3::new(0.5, 0.0, 0.0));
        let mut f = GoalFilter::new(4.0, Pose::identity());
        let mut prev = 0.0;
        for _ in 0..400 {
            let p = f.update(&target, 0.01);
            assert!(p.translation.x >= prev - 1e-15 && p.translation.x <= 0.5 + 1e-12);
            prev = p.translation.x;
        }
        assert!(f.pose().max_abs_diff(&target) < 1e-4);
    }

    #[test]
    fn relative_carry_fixed_point_is_target() {
        let model = RobotModel::surrogate_7dof();
        let scene = SceneConfig::default().instantiate(0).unwrap();
        let mut w = WorldState::initial(&model, &scene);
        let [x, y, t] = scene.approach_a;
        w.robot = JointState::new(x, y, t, DVector::from_element(7, 0.2));
        let ee = model.forward_kinematics(&w.robot).unwrap();
        let g = relative_carry_goal(&w, &ee, scene.approach_a);
        assert!(g.max_abs_diff(&ee) < 1e-12);
        let g = relative_carry_goal(&w, &ee, scene.approach_b);
        assert!((g.translation - ee.translation - Vector3::new(0.0, 4.0, 0.0)).norm() < 0.2);
    }

    #[test]
    fn action_roundtrip() {
        let p = Pose::from_xyz_rpy([1.0, 2.0, 0.8], [0.1, -0.2, 0.3]);
        let back = action_to_pose(&pose_to_action(&p)).unwrap();
        assert!(back.max_abs_diff(&p) < 1e-12);
        assert!(action_to_pose(&DVector::zeros(5)).is_err());
    }

    #[test]
    fn condition_layout() {
        let model = RobotModel::surrogate_7dof();
        let scene = SceneConfig::default().instantiate(0).unwrap();
        let w = WorldState::initial(&model, &scene);
        let ee = model.forward_kinematics(&w.robot).unwrap();
        let h = condition(&w, &ee, &scene, Stage::Lift);
        assert_eq!(h.len(), CONDITION_DIM);
        assert_eq!(h[CONDITION_DIM - Stage::COUNT + Stage::Lift.index()], 1.0);
        assert_eq!(h.rows(CONDITION_DIM - Stage::COUNT, Stage::COUNT).sum(), 1.0);
    }
}
