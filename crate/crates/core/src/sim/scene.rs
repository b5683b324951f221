//! Two-table scene geometry, per-seed randomization and collision checks.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_toml, Error, Result};
use crate::kinematics::RobotModel;
use crate::se3::Pose;

/// Axis-aligned table: a solid box from the floor to the top surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub height: f64,
}

impl Table {
    fn half(&self) -> Vector2<f64> {
        Vector2::new(self.size[0], self.size[1]) * 0.5
    }

    pub fn contains_xy(&self, p: &Vector3<f64>) -> bool {
        let h = self.half();
        (p.x - self.center[0]).abs() <= h.x && (p.y - self.center[1]).abs() <= h.y
    }

    /// Depth of `p` inside the box, or a non-positive value when outside.
    pub fn penetration(&self, p: &Vector3<f64>) -> f64 {
        let h = self.half();
        let dx = h.x - (p.x - self.center[0]).abs();
        let dy = h.y - (p.y - self.center[1]).abs();
        dx.min(dy).min(self.height - p.z).min(p.z)
    }

    fn overlaps(&self, other: &Table) -> bool {
        let (a, b) = (self.half(), other.half());
        (self.center[0] - other.center[0]).abs() < a.x + b.x && (self.center[1] - other.center[1]).abs() < a.y + b.y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Base position / heading tolerance for reaching an approach pose.
    pub base_position: f64,
    pub base_heading: f64,
    /// Object lift above the table-A surface that ends the grasp phase.
    pub lift_height: f64,
    /// Released-object distance to the place goal that counts as placed.
    pub place_position: f64,
    /// End-effector distance from the released object's grasp pose.
    pub retreat_distance: f64,
    /// Grasp acceptance window around the object grasp pose.
    pub attach_position: f64,
    pub attach_angle: f64,
    /// Penetration depth below which contact is not a collision.
    pub penetration: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            base_position: 0.05,
            base_heading: 0.1,
            lift_height: 0.10,
            place_position: 0.03,
            retreat_distance: 0.10,
            attach_position: 0.02,
            attach_angle: 0.2,
            penetration: 1e-4,
        }
    }
}

/// Seed-dependent perturbations (uniform half-widths).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Randomization {
    pub object_xy: f64,
    pub place_xy: f64,
    pub start_xy: f64,
    pub start_heading: f64,
}

/// Scene description as loaded from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub table_a: Table,
    pub table_b: Table,
    /// Object footprint position on table A (it rests on the surface).
    pub object_xy: [f64; 2],
    pub object_yaw: f64,
    /// Place position on table B.
    pub place_xy: [f64; 2],
    /// Base approach pose sits this far from the object/place point along -x.
    pub approach_standoff: f64,
    /// Robot start `(x, y, theta)`; absent starts at the table-A approach pose.
    #[serde(default)]
    pub robot_start: Option<[f64; 3]>,
    /// Height of the grasp point above the object origin.
    pub grasp_height: f64,
    pub thresholds: Thresholds,
    pub randomize: Randomization,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            table_a: Table { center: [2.0, 0.0], size: [0.8, 0.8], height: 0.75 },
            table_b: Table { center: [2.0, 4.0], size: [0.8, 0.8], height: 0.75 },
            object_xy: [1.75, 0.0],
            object_yaw: 0.0,
            place_xy: [1.75, 4.0],
            approach_standoff: 0.66,
            robot_start: Some([0.0, 0.0, 0.0]),
            grasp_height: 0.05,
            thresholds: Thresholds::default(),
            randomize: Randomization { object_xy: 0.05, place_xy: 0.05, start_xy: 0.1, start_heading: 0.1 },
        }
    }
}

impl SceneConfig {
    /// Short-haul variant used for policy training and evaluation: tables
    /// 1.5 m apart and the robot already at the table-A approach pose.
    pub fn easy() -> Self {
        Self {
            table_b: Table { center: [2.0, 1.5], size: [0.8, 0.6], height: 0.75 },
            place_xy: [1.75, 1.5],
            robot_start: None,
            randomize: Randomization { object_xy: 0.08, place_xy: 0.08, start_xy: 0.0, start_heading: 0.0 },
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path)
    }

    /// Concrete scene for one seed.
    pub fn instantiate(&self, seed: u64) -> Result<Scene> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        let r = self.randomize;
        let object = [self.object_xy[0] + jitter(r.object_xy), self.object_xy[1] + jitter(r.object_xy)];
        let place = [self.place_xy[0] + jitter(r.place_xy), self.place_xy[1] + jitter(r.place_xy)];
        let object_start = Pose::new(
            nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), self.object_yaw),
            Vector3::new(object[0], object[1], self.table_a.height),
        );
        let place_goal = Pose::new(
            object_start.rotation,
            Vector3::new(place[0], place[1], self.table_b.height),
        );
        let approach = |p: [f64; 2]| [p[0] - self.approach_standoff, p[1], 0.0];
        let approach_a = approach(object);
        let approach_b = approach(place);
        let start = match self.robot_start {
            Some(s) => [s[0] + jitter(r.start_xy), s[1] + jitter(r.start_xy), s[2] + jitter(r.start_heading)],
            None => approach_a,
        };
        let scene = Scene {
            table_a: self.table_a,
            table_b: self.table_b,
            object_start,
            place_goal,
            approach_a,
            approach_b,
            robot_start: start,
            grasp_offset: Pose::from_translation(0.0, 0.0, self.grasp_height),
            thresholds: self.thresholds,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// A concrete scene instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub table_a: Table,
    pub table_b: Table,
    pub object_start: Pose,
    pub place_goal: Pose,
    /// Base approach poses `(x, y, theta)`.
    pub approach_a: [f64; 3],
    pub approach_b: [f64; 3],
    pub robot_start: [f64; 3],
    /// End-effector grasp frame relative to the object frame.
    pub grasp_offset: Pose,
    pub thresholds: Thresholds,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidScene(m.to_string()));
        for t in [&self.table_a, &self.table_b] {
            if !(t.size[0] > 0.0 && t.size[1] > 0.0 && t.height > 0.0) {
                return bad("table dimensions must be positive");
            }
        }
        if self.table_a.overlaps(&self.table_b) {
            return bad("tables overlap");
        }
        let on = |t: &Table, p: &Pose| t.contains_xy(&p.translation) && (p.translation.z - t.height).abs() <= 1e-6;
        if !on(&self.table_a, &self.object_start) {
            return bad("object start is not on the table-A surface");
        }
        if !on(&self.table_b, &self.place_goal) {
            return bad("place goal is not on the table-B surface");
        }
        Ok(())
    }

    pub fn tables(&self) -> [&Table; 2] {
        [&self.table_a, &self.table_b]
    }

    /// End-effector pose that grasps an object at `object`.
    pub fn grasp_pose(&self, object: &Pose) -> Pose {
        object * &self.grasp_offset
    }
}

/// Half-angle of the sanctioned approach cone above grasp/place targets.
const CONE_HALF_ANGLE: f64 = std::f64::consts::FRAC_PI_6;
const CONE_BASE_RADIUS: f64 = 0.05;

fn in_cone(p: &Vector3<f64>, apex: &Vector3<f64>) -> bool {
    let dz = p.z - apex.z;
    let r = (p.xy() - apex.xy()).norm();
    dz >= -0.02 && r <= CONE_BASE_RADIUS + dz.max(0.0) * CONE_HALF_ANGLE.tan()
}

/// True iff the end-effector or a sampled arm point penetrates a table by
/// more than the tolerance outside the approach cones above the object and
/// the place goal.
pub fn check_collision(model: &RobotModel, q: &crate::kinematics::JointState, object: &Pose, scene: &Scene) -> Result<bool> {
    let points = model.link_points(q)?;
    let tol = scene.thresholds.penetration;
    let cones = [object.translation, scene.place_goal.translation];
    Ok(points.iter().any(|p| {
        scene.tables().iter().any(|t| t.penetration(p) > tol) && !cones.iter().any(|apex| in_cone(p, apex))
    }))
}

/// Point-only variant of [`check_collision`] for a single position.
pub fn point_collides(p: &Vector3<f64>, object: &Pose, scene: &Scene) -> bool {
    let tol = scene.thresholds.penetration;
    scene.tables().iter().any(|t| t.penetration(p) > tol)
        && ![object.translation, scene.place_goal.translation].iter().any(|apex| in_cone(p, apex))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scene_is_valid_and_deterministic() {
        let cfg = SceneConfig::default();
        let a = cfg.instantiate(3).unwrap();
        assert_eq!(a, cfg.instantiate(3).unwrap());
        assert_ne!(a, cfg.instantiate(4).unwrap());
        assert!((a.object_start.translation.z - 0.75).abs() <= 1e-6);
        SceneConfig::easy().instantiate(0).unwrap();
    }

    #[test]
    fn invalid_scenes_rejected() {
        let mut cfg = SceneConfig::default();
        cfg.table_b.center = [2.3, 0.2];
        assert!(cfg.instantiate(0).is_err());
        let mut cfg = SceneConfig::default();
        cfg.object_xy = [0.0, 0.0];
        assert!(cfg.instantiate(0).is_err());
    }

    #[test]
    fn point_collision_examples() {
        let scene = SceneConfig::default().instantiate(0).unwrap();
        let obj = scene.object_start;
        // 0.2 m above the surface
        assert!(!point_collides(&Vector3::new(2.2, 0.3, 0.95), &obj, &scene));
        // inside the table box, away from the cones
        assert!(point_collides(&Vector3::new(2.2, 0.3, 0.5), &obj, &scene));
        // tangent to the surface
        assert!(!point_collides(&Vector3::new(2.2, 0.3, 0.75), &obj, &scene));
        // just past the tolerance
        assert!(point_collides(&Vector3::new(2.2, 0.3, 0.75 - 2e-4), &obj, &scene));
        // inside the sanctioned cone above the object
        let mut p = obj.translation;
        p.z -= 0.01;
        assert!(!point_collides(&p, &obj, &scene));
    }

    #[test]
    fn scene_config_roundtrips_through_toml() {
        let cfg = SceneConfig::easy();
        let text = toml::to_string(&cfg).unwrap();
        let back: SceneConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
