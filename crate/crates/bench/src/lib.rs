//! Benchmark sweeps, reports and policy training on top of `remqp-core`.

pub mod config;
pub mod report;

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use rayon::prelude::*;
use remqp_core::control::{ControllerConfig, Variant};
use remqp_core::diffusion::{DiffusionPolicy, LossHistory, Sample};
use remqp_core::kinematics::RobotModel;
use remqp_core::sim::{collect_demonstrations, run_episode, run_scripted, Episode, PolicyGoals, Scene, SimConfig};

pub use config::{BenchmarkConfig, PolicyTrainConfig};
pub use report::{emit_report, Aggregate, EpisodeResult, Ratios, Report, Stat};

/// Runs every (variant, seed) episode with scripted goals, writes one log
/// per episode under `out_dir/logs`, then the aggregate report files.
/// Timeouts are recorded; any other episode error aborts the run.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<Report> {
    let model = cfg.robot_model()?;
    let scene_cfg = cfg.scene_config()?;
    let sim = cfg.sim_config();
    let seeds: BTreeSet<u64> = cfg.seeds.iter().copied().collect();
    let logs = cfg.out_dir.join("logs");
    fs::create_dir_all(&logs).with_context(|| format!("creating {}", logs.display()))?;

    let jobs: Vec<(Variant, u64)> = cfg.variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let episodes = jobs
        .par_iter()
        .map(|&(variant, seed)| -> Result<EpisodeResult> {
            let scene = scene_cfg.instantiate(seed).with_context(|| format!("scene for seed {seed}"))?;
            let ep = run_scripted(&model, &scene, &cfg.controller_for(variant), &sim)
                .with_context(|| format!("episode {variant} seed {seed}"))?;
            let log_file = PathBuf::from("logs").join(format!("{}_seed{}.csv", variant.name(), seed));
            ep.log.write_csv(&cfg.out_dir.join(&log_file))?;
            let metrics = ep.metrics().with_context(|| format!("metrics of {variant} seed {seed}"))?;
            log::info!(
                "{variant} seed {seed}: success={} time={:.2}s jerk={:.3}",
                metrics.success,
                metrics.total_time,
                metrics.ee_jerk_rms
            );
            if ep.log.timed_out {
                log::warn!("{variant} seed {seed} timed out");
            }
            Ok(EpisodeResult {
                variant,
                seed,
                metrics,
                timed_out: ep.log.timed_out,
                infeasible_ticks: ep.log.infeasible_ticks,
                log_file,
                wall_solve_mean: ep.wall_solve_mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let report = Report::new(cfg.mode, &cfg.variants, episodes);
    emit_report(&report, &cfg.out_dir)?;
    Ok(report)
}

pub struct TrainOutcome {
    pub policy: DiffusionPolicy,
    pub history: LossHistory,
    /// Expert episodes run and how many of them succeeded (only those are used).
    pub demos: usize,
    pub demo_successes: usize,
    pub samples: usize,
}

/// Collects scripted expert demonstrations on the configured scene, trains
/// the denoiser, and writes the checkpoint (and loss curve if requested).
pub fn train_policy(cfg: &PolicyTrainConfig) -> Result<TrainOutcome> {
    let model = cfg.robot_model()?;
    let scene_cfg = cfg.scene_config()?;
    let runs = cfg
        .demo_seeds
        .par_iter()
        .map(|&seed| -> Result<(Vec<Sample>, bool)> {
            let scene = scene_cfg.instantiate(seed)?;
            Ok(collect_demonstrations(&model, &scene, &cfg.controller, &cfg.sim)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let demo_successes = runs.iter().filter(|r| r.1).count();
    let data: Vec<Sample> = runs.into_iter().filter(|r| r.1).flat_map(|r| r.0).collect();
    anyhow::ensure!(!data.is_empty(), "no successful expert episode to learn from");
    log::info!("{demo_successes}/{} expert episodes succeeded, {} samples", cfg.demo_seeds.len(), data.len());

    let mut policy = DiffusionPolicy::new(&cfg.policy, &data)?;
    let history = policy.train(&data, &cfg.train)?;
    log::info!("smoothed loss {:.4} -> {:.4}", history.initial, history.last);
    for file in std::iter::once(&cfg.checkpoint).chain(&cfg.loss_csv) {
        if let Some(dir) = file.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    policy.save(&cfg.checkpoint)?;
    if let Some(p) = &cfg.loss_csv {
        history.write_csv(p)?;
    }
    Ok(TrainOutcome {
        policy,
        history,
        demos: cfg.demo_seeds.len(),
        demo_successes,
        samples: data.len(),
    })
}

/// One episode with goals sampled from `policy`; `seed` drives the sampler.
pub fn rollout(model: &RobotModel, scene: &Scene, controller: &ControllerConfig, sim: &SimConfig, policy: &DiffusionPolicy, seed: u64) -> Result<Episode> {
    let mut source = PolicyGoals::new(policy, sim.waypoints, sim.policy_period, seed);
    Ok(run_episode(model, scene, controller, &mut source, sim)?)
}
