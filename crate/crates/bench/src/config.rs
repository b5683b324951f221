//! On-disk configuration for benchmark sweeps and policy training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use remqp_core::control::{ControllerConfig, Variant};
use remqp_core::diffusion::{PolicyConfig, TrainConfig};
use remqp_core::kinematics::RobotModel;
use remqp_core::sim::{SceneConfig, SimConfig, StepMode};
use serde::{Deserialize, Serialize};

fn all_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_cap() -> f64 {
    300.0
}

fn default_mode() -> StepMode {
    StepMode::LatencyCoupled
}

/// Variant × seed sweep. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Robot description (TOML). Absent: the built-in surrogate arm.
    #[serde(default)]
    pub robot: Option<PathBuf>,
    pub scene: PathBuf,
    #[serde(default = "all_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_mode")]
    pub mode: StepMode,
    #[serde(default = "default_cap")]
    pub episode_cap: f64,
    pub out_dir: PathBuf,
    /// Controller weights shared by all variants.
    #[serde(default)]
    pub controller: ControllerConfig,
    /// Full per-variant replacements of `controller`.
    #[serde(default)]
    pub overrides: BTreeMap<Variant, ControllerConfig>,
    /// Simulation settings; `mode` and `episode_cap` above take precedence.
    #[serde(default)]
    pub sim: SimConfig,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_robot(path: Option<&Path>) -> Result<RobotModel> {
    match path {
        Some(p) => RobotModel::load(p).with_context(|| format!("loading robot {}", p.display())),
        None => Ok(RobotModel::surrogate_7dof()),
    }
}

impl BenchmarkConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.robot = cfg.robot.map(|p| resolve(base, &p));
        cfg.scene = resolve(base, &cfg.scene);
        cfg.out_dir = resolve(base, &cfg.out_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            bail!("benchmark config lists no variants");
        }
        if self.seeds.is_empty() {
            bail!("benchmark config lists no seeds");
        }
        if !(self.episode_cap > 0.0) {
            bail!("episode_cap must be positive");
        }
        for p in self.robot.iter().chain([&self.scene]) {
            if !p.exists() {
                bail!("config path does not exist: {}", p.display());
            }
        }
        for v in &self.variants {
            self.controller_for(*v).validate()?;
        }
        self.sim_config().validate()?;
        Ok(())
    }

    pub fn controller_for(&self, v: Variant) -> ControllerConfig {
        self.overrides.get(&v).unwrap_or(&self.controller).with_variant(v)
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            mode: self.mode,
            episode_cap: self.episode_cap,
            ..self.sim.clone()
        }
    }

    pub fn robot_model(&self) -> Result<RobotModel> {
        load_robot(self.robot.as_deref())
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        SceneConfig::load(&self.scene).with_context(|| format!("loading scene {}", self.scene.display()))
    }
}

fn default_demo_seeds() -> Vec<u64> {
    (1000..1060).collect()
}

fn default_train() -> TrainConfig {
    TrainConfig {
        steps: 20_000,
        ..TrainConfig::default()
    }
}

/// Demonstration collection and denoiser training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyTrainConfig {
    #[serde(default)]
    pub robot: Option<PathBuf>,
    pub scene: PathBuf,
    /// Scene seeds of the scripted expert episodes.
    #[serde(default = "default_demo_seeds")]
    pub demo_seeds: Vec<u64>,
    /// Controller executing the expert and later the policy.
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    pub checkpoint: PathBuf,
    /// Smoothed loss curve (CSV); absent: not written.
    #[serde(default)]
    pub loss_csv: Option<PathBuf>,
}

impl PolicyTrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.robot = cfg.robot.map(|p| resolve(base, &p));
        cfg.scene = resolve(base, &cfg.scene);
        cfg.checkpoint = resolve(base, &cfg.checkpoint);
        cfg.loss_csv = cfg.loss_csv.map(|p| resolve(base, &p));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.demo_seeds.is_empty() {
            bail!("policy config lists no demonstration seeds");
        }
        for p in self.robot.iter().chain([&self.scene]) {
            if !p.exists() {
                bail!("config path does not exist: {}", p.display());
            }
        }
        self.controller.validate()?;
        self.sim.validate()?;
        Ok(())
    }

    pub fn robot_model(&self) -> Result<RobotModel> {
        load_robot(self.robot.as_deref())
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        SceneConfig::load(&self.scene).with_context(|| format!("loading scene {}", self.scene.display()))
    }
}
