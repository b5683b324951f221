//! Aggregation and file output of benchmark sweeps.
//!
//! Everything written to disk is a function of the configuration and seeds
//! alone; measured wall-clock times are kept in memory for console output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use remqp_core::control::Variant;
use remqp_core::sim::{Metrics, StepMode};

pub const PHASE_LABELS: [&str; 4] = ["Nav A", "Desk A", "Nav B", "Desk B"];

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Metrics,
    pub timed_out: bool,
    pub infeasible_ticks: usize,
    /// Per-episode log, relative to the output directory.
    pub log_file: PathBuf,
    /// Measured mean QP wall time (s); never written to files.
    pub wall_solve_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        Some(Stat {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Per-variant statistics over successful episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub variant: Variant,
    pub episodes: usize,
    pub successes: usize,
    pub acc: Option<Stat>,
    pub jerk: Option<Stat>,
    pub total_time: Option<Stat>,
    pub phase_times: [Option<Stat>; 4],
    pub collisions: Option<Stat>,
    pub solve_time: Option<Stat>,
    /// Mean measured wall solve time over all episodes (s).
    pub wall_solve_mean: f64,
}

/// Ratios of successful-episode means, variant over baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratios {
    pub acc: f64,
    pub jerk: f64,
    pub total_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub mode: StepMode,
    /// Sorted by variant (configuration order), then seed.
    pub episodes: Vec<EpisodeResult>,
    /// One entry per configured variant, in configuration order.
    pub aggregates: Vec<Aggregate>,
}

impl Report {
    pub fn new(mode: StepMode, variants: &[Variant], mut episodes: Vec<EpisodeResult>) -> Self {
        let rank = |v: Variant| variants.iter().position(|&x| x == v).unwrap_or(usize::MAX);
        episodes.sort_by(|a, b| rank(a.variant).cmp(&rank(b.variant)).then(a.seed.cmp(&b.seed)));
        let aggregates = variants
            .iter()
            .map(|&v| {
                let all: Vec<_> = episodes.iter().filter(|e| e.variant == v).collect();
                let ok: Vec<_> = all.iter().filter(|e| e.metrics.success).collect();
                let stat = |f: &dyn Fn(&Metrics) -> f64| Stat::of(&ok.iter().map(|e| f(&e.metrics)).collect::<Vec<_>>());
                Aggregate {
                    variant: v,
                    episodes: all.len(),
                    successes: ok.len(),
                    acc: stat(&|m| m.ee_acc_rms),
                    jerk: stat(&|m| m.ee_jerk_rms),
                    total_time: stat(&|m| m.total_time),
                    phase_times: std::array::from_fn(|i| stat(&|m| m.phase_times[i])),
                    collisions: stat(&|m| m.collision_count as f64),
                    solve_time: stat(&|m| m.mean_solve_time),
                    wall_solve_mean: if all.is_empty() {
                        0.0
                    } else {
                        all.iter().map(|e| e.wall_solve_mean).sum::<f64>() / all.len() as f64
                    },
                }
            })
            .collect();
        Report { mode, episodes, aggregates }
    }

    pub fn aggregate(&self, v: Variant) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.variant == v)
    }

    /// `None` when either side has no successful episode.
    pub fn ratios_vs_baseline(&self, v: Variant) -> Option<Ratios> {
        let base = self.aggregate(Variant::BaselineSlack)?;
        let a = self.aggregate(v)?;
        let r = |x: Option<Stat>, y: Option<Stat>| Some(x?.mean / y?.mean);
        Some(Ratios {
            acc: r(a.acc, base.acc)?,
            jerk: r(a.jerk, base.jerk)?,
            total_time: r(a.total_time, base.total_time)?,
        })
    }

    /// Plain-text tables: overall metrics, per-phase times, ratios.
    pub fn to_text(&self) -> String {
        let seeds = self.aggregates.first().map_or(0, |a| a.episodes);
        let mut s = String::new();
        let na = |x: Option<Stat>| x.map_or_else(|| "n/a".to_string(), |v| format!("{:.3}", v.mean));
        let _ = writeln!(s, "Overall performance ({} mode, {} seeds; means over successful episodes)", self.mode, seeds);
        let _ = writeln!(s, "{:<14} {:>8} {:>20} {:>20} {:>15} {:>11}", "Method", "Success", "EE Acc RMS (m/s^2)", "EE Jerk RMS (m/s^3)", "Total Time (s)", "Collisions");
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "{:<14} {:>8} {:>20} {:>20} {:>15} {:>11}",
                a.variant.label(),
                format!("{}/{}", a.successes, a.episodes),
                na(a.acc),
                na(a.jerk),
                na(a.total_time),
                na(a.collisions)
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Per-phase execution time (s)");
        let _ = write!(s, "{:<8}", "Phase");
        for a in &self.aggregates {
            let _ = write!(s, " {:>14}", a.variant.label());
        }
        let _ = writeln!(s);
        for (i, label) in PHASE_LABELS.iter().enumerate() {
            let _ = write!(s, "{label:<8}");
            for a in &self.aggregates {
                let _ = write!(s, " {:>14}", na(a.phase_times[i]));
            }
            let _ = writeln!(s);
        }
        let _ = write!(s, "{:<8}", "Total");
        for a in &self.aggregates {
            let _ = write!(s, " {:>14}", na(a.total_time));
        }
        let _ = writeln!(s);
        let _ = writeln!(s);
        let _ = writeln!(s, "Ratios vs Baseline (successful episodes)");
        let _ = writeln!(s, "{:<14} {:>10} {:>10} {:>10}", "Method", "Acc", "Jerk", "Time");
        for a in &self.aggregates {
            match self.ratios_vs_baseline(a.variant) {
                Some(r) => {
                    let _ = writeln!(s, "{:<14} {:>10.3} {:>10.3} {:>10.3}", a.variant.label(), r.acc, r.jerk, r.total_time);
                }
                None => {
                    let _ = writeln!(s, "{:<14} {:>10} {:>10} {:>10}", a.variant.label(), "n/a", "n/a", "n/a");
                }
            }
        }
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes `summary.csv` (one row per variant), `episodes.csv` and
/// `per_phase.csv` (one row per episode) and `report.txt` into `dir`.
pub fn emit_report(r: &Report, dir: &Path) -> Result<()> {
    anyhow::ensure!(!r.episodes.is_empty(), "refusing to write an empty report");
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let summary = r
        .aggregates
        .iter()
        .map(|a| {
            let ratios = r.ratios_vs_baseline(a.variant);
            let mut row = vec![a.variant.name().to_string(), a.episodes.to_string(), a.successes.to_string()];
            for st in [a.acc, a.jerk, a.total_time] {
                row.extend([opt(st.map(|s| s.mean)), opt(st.map(|s| s.min)), opt(st.map(|s| s.max))]);
            }
            row.extend(a.phase_times.iter().map(|st| opt(st.map(|s| s.mean))));
            row.push(opt(a.collisions.map(|s| s.mean)));
            row.push(opt(a.solve_time.map(|s| s.mean)));
            row.extend([opt(ratios.map(|x| x.acc)), opt(ratios.map(|x| x.jerk)), opt(ratios.map(|x| x.total_time))]);
            row
        })
        .collect();
    write_csv(
        &dir.join("summary.csv"),
        &[
            "variant", "episodes", "successes", "acc_mean", "acc_min", "acc_max", "jerk_mean", "jerk_min", "jerk_max", "time_mean", "time_min",
            "time_max", "nav_a_mean", "desk_a_mean", "nav_b_mean", "desk_b_mean", "collisions_mean", "solve_time_mean", "acc_ratio", "jerk_ratio",
            "time_ratio",
        ],
        summary,
    )?;

    let episodes = r
        .episodes
        .iter()
        .map(|e| {
            let m = &e.metrics;
            vec![
                e.variant.name().to_string(),
                e.seed.to_string(),
                m.success.to_string(),
                e.timed_out.to_string(),
                m.ee_acc_rms.to_string(),
                m.ee_jerk_rms.to_string(),
                m.total_time.to_string(),
                m.collision_count.to_string(),
                e.infeasible_ticks.to_string(),
                m.mean_solve_time.to_string(),
                e.log_file.display().to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("episodes.csv"),
        &[
            "variant", "seed", "success", "timed_out", "ee_acc_rms", "ee_jerk_rms", "total_time", "collisions", "infeasible_ticks", "mean_solve_time", "log",
        ],
        episodes,
    )?;

    let phases = r
        .episodes
        .iter()
        .map(|e| {
            let mut row = vec![e.variant.name().to_string(), e.seed.to_string(), e.metrics.success.to_string()];
            row.extend(e.metrics.phase_times.iter().map(|t| t.to_string()));
            row.push(e.metrics.total_time.to_string());
            row
        })
        .collect();
    write_csv(&dir.join("per_phase.csv"), &["variant", "seed", "success", "nav_a", "desk_a", "nav_b", "desk_b", "total_time"], phases)?;

    let path = dir.join("report.txt");
    fs::write(&path, r.to_text()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
