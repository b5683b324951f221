use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use remqp_bench::{rollout, run_benchmark, train_policy, BenchmarkConfig, PolicyTrainConfig};
use remqp_core::control::{ControllerConfig, Variant};
use remqp_core::diffusion::DiffusionPolicy;
use remqp_core::kinematics::RobotModel;
use remqp_core::sim::{SceneConfig, SimConfig, StepMode};

/// Whole-body controller benchmark, policy training and hybrid rollouts.
///
/// Log verbosity follows `RUST_LOG` (default `warn`).
#[derive(Parser)]
#[command(name = "bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the variant x seed sweep with scripted goals and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// fixed_dt | latency_coupled
        #[arg(long)]
        mode: Option<StepMode>,
        /// Comma-separated subset, e.g. `elim_slacks,rem_qp`.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the configured seed list (repeatable).
        #[arg(long)]
        seed: Vec<u64>,
    },
    /// Collect scripted demonstrations and train the diffusion goal policy.
    TrainPolicy {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training seed overriding the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Drive one episode with a trained policy through the controller.
    Rollout {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Robot description; default: built-in surrogate arm.
        #[arg(long)]
        robot: Option<PathBuf>,
        #[arg(long, default_value = "rem_qp")]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "latency_coupled")]
        mode: StepMode,
        /// Write the trajectory log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, mode, variants, out, seed } => {
            let mut cfg = BenchmarkConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(v) = variants {
                cfg.variants = v;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            cfg.validate()?;
            let report = run_benchmark(&cfg)?;
            print!("{}", report.to_text());
            println!();
            println!("Measured mean QP wall time (not written to files)");
            for a in &report.aggregates {
                println!("{:<14} {:>10.1} us", a.variant.label(), a.wall_solve_mean * 1e6);
            }
            println!("Reports written to {}", cfg.out_dir.display());
        }
        Command::TrainPolicy { config, out, seed } => {
            let mut cfg = PolicyTrainConfig::load(&config)?;
            if let Some(o) = out {
                cfg.checkpoint = o;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let t = train_policy(&cfg)?;
            println!(
                "expert episodes {}/{} successful, {} samples; smoothed loss {:.4} -> {:.4}",
                t.demo_successes, t.demos, t.samples, t.history.initial, t.history.last
            );
            println!("checkpoint written to {}", cfg.checkpoint.display());
        }
        Command::Rollout { policy, scene, robot, variant, seed, mode, log } => {
            let model = match robot {
                Some(p) => RobotModel::load(&p).with_context(|| format!("loading robot {}", p.display()))?,
                None => RobotModel::surrogate_7dof(),
            };
            let policy = DiffusionPolicy::load(&policy).with_context(|| format!("loading policy {}", policy.display()))?;
            let scene = SceneConfig::load(&scene)
                .with_context(|| format!("loading scene {}", scene.display()))?
                .instantiate(seed)?;
            let sim = SimConfig { mode, ..SimConfig::default() };
            let ep = rollout(&model, &scene, &ControllerConfig::for_variant(variant), &sim, &policy, seed)?;
            if let Some(p) = log {
                ep.log.write_csv(&p)?;
            }
            let m = ep.metrics()?;
            let phases: Vec<&str> = ep.log.phase_sequence().iter().map(|p| p.name()).collect();
            println!("success: {}", m.success);
            println!("phases: {}", phases.join(" -> "));
            println!(
                "total time {:.3} s, EE acc RMS {:.3} m/s^2, EE jerk RMS {:.3} m/s^3, collisions {}",
                m.total_time, m.ee_acc_rms, m.ee_jerk_rms, m.collision_count
            );
        }
    }
    Ok(())
}
