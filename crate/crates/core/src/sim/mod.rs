//! Deterministic kinematic simulation of the table-to-table task.

pub mod episode;
pub mod log;
pub mod metrics;
pub mod scene;
pub mod task;
pub mod world;

pub use episode::{collect_demonstrations, run_episode, run_scripted, Episode, LatencyModel, SimConfig};
pub use log::{Record, StepMode, TrajectoryLog};
pub use metrics::{compute_metrics, Metrics};
pub use scene::{check_collision, Scene, SceneConfig};
pub use task::{FixedGoal, GoalSource, PolicyGoals, ScriptedGoals, Stage, WaypointConfig};
pub use world::{Gripper, Phase, WorldState};
