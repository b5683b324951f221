//! The closed control loop: goal, servo, controller, integrate, phases.

use serde::{Deserialize, Serialize};

use super::log::{Record, StepMode, TrajectoryLog};
use super::metrics::{compute_metrics, Metrics};
use super::scene::{check_collision, Scene};
use super::task::{condition, pose_to_action, GoalFilter, GoalSource, ScriptedGoals, WaypointConfig};
use super::world::{apply_gripper, phase_update, step_world, Phase, WorldState};
use crate::control::{Controller, ControllerConfig};
use crate::diffusion::Sample;
use crate::error::{Error, Result};
use crate::kinematics::RobotModel;
use crate::qp::QpStatus;

/// Deterministic stand-in for QP compute latency: `scale * (n + m_eq)^3`
/// seconds, the cube of the KKT system size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub scale: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { scale: 1.6e-6 }
    }
}

impl LatencyModel {
    pub fn compute_time(&self, num_vars: usize, num_eq: usize) -> f64 {
        self.scale * ((num_vars + num_eq) as f64).powi(3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub mode: StepMode,
    /// Simulated-time cap (s); reaching it marks the episode timed out.
    pub episode_cap: f64,
    pub latency: LatencyModel,
    pub waypoints: WaypointConfig,
    /// Re-query period of policy goal sources (s).
    pub policy_period: f64,
    /// Bandwidth (rad/s) of the goal shaping filter; 0 disables it.
    pub goal_filter: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            mode: StepMode::LatencyCoupled,
            episode_cap: 300.0,
            latency: LatencyModel::default(),
            waypoints: WaypointConfig::default(),
            policy_period: 0.1,
            goal_filter: 4.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.episode_cap > 0.0 && self.latency.scale >= 0.0 && self.policy_period > 0.0 && self.goal_filter >= 0.0) {
            return Err(Error::Config("dt, episode_cap and policy_period must be positive, goal_filter nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub log: TrajectoryLog,
    /// Mean and max measured wall-clock QP solve time (s). Not part of the
    /// log, which stays deterministic.
    pub wall_solve_mean: f64,
    pub wall_solve_max: f64,
}

impl Episode {
    pub fn metrics(&self) -> Result<Metrics> {
        compute_metrics(&self.log)
    }
}

fn record(model: &RobotModel, w: &WorldState, solve_time: f64, icn: f64) -> Result<Record> {
    let ee = model.forward_kinematics(&w.robot)?.translation;
    Ok(Record {
        t: w.time,
        q: w.robot.to_vector().iter().copied().collect(),
        ee: [ee.x, ee.y, ee.z],
        solve_time,
        icn,
        phase: w.phase,
    })
}

/// Optional per-tick observer, called before the controller with the
/// commanded goal.
pub trait TickObserver {
    fn observe(&mut self, w: &WorldState, goal: &super::task::GoalCommand, source: &dyn GoalSource, model: &RobotModel, scene: &Scene) -> Result<()>;
}

pub fn run_episode(
    model: &RobotModel,
    scene: &Scene,
    controller: &ControllerConfig,
    goals: &mut dyn GoalSource,
    sim: &SimConfig,
) -> Result<Episode> {
    run_episode_observed(model, scene, controller, goals, sim, None)
}

pub fn run_episode_observed(
    model: &RobotModel,
    scene: &Scene,
    controller: &ControllerConfig,
    goals: &mut dyn GoalSource,
    sim: &SimConfig,
    mut observer: Option<&mut dyn TickObserver>,
) -> Result<Episode> {
    sim.validate()?;
    let mut ctrl = Controller::new(model.clone(), controller.clone())?;
    let mut w = WorldState::initial(model, scene);
    phase_update(model, &mut w, scene)?;
    let mut log = TrajectoryLog::new(sim.mode, sim.dt);
    log.records.push(record(model, &w, 0.0, crate::control::icn_at(model, &w.robot)?)?);
    let mut colliding = check_collision(model, &w.robot, &w.object_pose, scene)?;
    let (mut wall_sum, mut wall_max, mut ticks) = (0.0, 0.0f64, 0usize);
    let mut filter = (sim.goal_filter > 0.0).then(|| GoalFilter::new(sim.goal_filter, model.forward_kinematics(&w.robot).expect("state checked")));

    while w.phase != Phase::Done {
        if w.time >= sim.episode_cap {
            log.timed_out = true;
            break;
        }
        let goal = goals.next_goal(model, &w, scene)?;
        if let Some(obs) = observer.as_deref_mut() {
            obs.observe(&w, &goal, goals, model, scene)?;
        }
        let shaped = match filter.as_mut() {
            Some(f) => f.update(&goal.pose, sim.dt),
            None => goal.pose,
        };
        let cmd = ctrl.compute_control(&w.robot, &shaped)?;
        let wall = cmd.solve_time;
        wall_sum += wall;
        wall_max = wall_max.max(wall);
        ticks += 1;
        if cmd.status == QpStatus::Infeasible {
            log.infeasible_ticks += 1;
        }
        let compute = sim.latency.compute_time(cmd.qp_dims.0, cmd.qp_dims.1);
        let period = match sim.mode {
            StepMode::FixedDt => sim.dt,
            StepMode::LatencyCoupled => sim.dt.max(compute),
        };
        w = step_world(model, &w, &cmd.qdot, sim.dt, period)?;
        apply_gripper(model, &mut w, goal.gripper, scene)?;
        phase_update(model, &mut w, scene)?;
        let now = check_collision(model, &w.robot, &w.object_pose, scene)?;
        if now && !colliding {
            log.collisions += 1;
        }
        colliding = now;
        log.records.push(record(model, &w, compute, cmd.icn)?);
    }
    log.boundaries = w.boundaries.clone();
    Ok(Episode {
        log,
        wall_solve_mean: if ticks > 0 { wall_sum / ticks as f64 } else { 0.0 },
        wall_solve_max: wall_max,
    })
}

/// Expert episode with scripted waypoints.
pub fn run_scripted(model: &RobotModel, scene: &Scene, controller: &ControllerConfig, sim: &SimConfig) -> Result<Episode> {
    run_episode(model, scene, controller, &mut ScriptedGoals::new(sim.waypoints), sim)
}

struct Recorder {
    period: f64,
    last: Option<f64>,
    samples: Vec<Sample>,
}

impl TickObserver for Recorder {
    fn observe(&mut self, w: &WorldState, goal: &super::task::GoalCommand, source: &dyn GoalSource, model: &RobotModel, scene: &Scene) -> Result<()> {
        if self.last.is_some_and(|t| w.time - t < self.period - 1e-9) {
            return Ok(());
        }
        let Some(stage) = source.stage() else {
            return Ok(());
        };
        self.last = Some(w.time);
        let ee = model.forward_kinematics(&w.robot)?;
        self.samples.push(Sample { action: pose_to_action(&goal.pose), cond: condition(w, &ee, scene, stage) });
        Ok(())
    }
}

/// Run one scripted episode and record `(condition, expert goal)` pairs at
/// the policy query period. Returns the samples and whether it succeeded.
pub fn collect_demonstrations(
    model: &RobotModel,
    scene: &Scene,
    controller: &ControllerConfig,
    sim: &SimConfig,
) -> Result<(Vec<Sample>, bool)> {
    let mut rec = Recorder { period: sim.policy_period, last: None, samples: Vec::new() };
    let ep = run_episode_observed(model, scene, controller, &mut ScriptedGoals::new(sim.waypoints), sim, Some(&mut rec))?;
    Ok((rec.samples, ep.log.success()))
}
