//! Smoothness and timing metrics from a trajectory log.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::log::{StepMode, TrajectoryLog};
use crate::error::{Error, Result};

/// Relative tolerance on tick spacing in fixed-step logs.
const UNIFORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ee_acc_rms: f64,
    pub ee_jerk_rms: f64,
    pub total_time: f64,
    /// Nav A, Desk A, Nav B, Desk B.
    pub phase_times: [f64; 4],
    pub collision_count: usize,
    pub mean_solve_time: f64,
    pub success: bool,
}

/// Time-weighted RMS of vector samples.
fn rms(values: &[Vector3<f64>], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let sum: f64 = values.iter().zip(weights).map(|(v, w)| v.norm_squared() * w).sum();
    (sum / total).sqrt()
}

/// Acceleration and jerk RMS from positions `p` at times `t` by successive
/// central differences (non-uniform spacing allowed).
pub fn derivative_rms(t: &[f64], p: &[Vector3<f64>]) -> (f64, f64) {
    let n = p.len();
    if n < 3 {
        return (0.0, 0.0);
    }
    let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let vel: Vec<Vector3<f64>> = (0..n - 1).map(|i| (p[i + 1] - p[i]) / h[i]).collect();
    let acc: Vec<Vector3<f64>> = (1..n - 1).map(|i| (vel[i] - vel[i - 1]) / (0.5 * (h[i] + h[i - 1]))).collect();
    let acc_w: Vec<f64> = (1..n - 1).map(|i| 0.5 * (h[i] + h[i - 1])).collect();
    let jerk: Vec<Vector3<f64>> = (0..acc.len().saturating_sub(1)).map(|i| (acc[i + 1] - acc[i]) / h[i + 1]).collect();
    let jerk_w: Vec<f64> = (0..jerk.len()).map(|i| h[i + 1]).collect();
    (rms(&acc, &acc_w), rms(&jerk, &jerk_w))
}

pub fn compute_metrics(log: &TrajectoryLog) -> Result<Metrics> {
    let recs = &log.records;
    if recs.len() < 4 {
        return Err(Error::Metrics(format!("need at least 4 ticks, got {}", recs.len())));
    }
    if log.mode == StepMode::FixedDt {
        if let Some(w) = recs.windows(2).find(|w| ((w[1].t - w[0].t) - log.dt).abs() > UNIFORM_TOL * log.dt.max(w[1].t)) {
            return Err(Error::Metrics(format!("non-uniform tick at t = {} in fixed-step log", w[1].t)));
        }
    }
    // motion interval: drop trailing stationary samples
    let pos: Vec<Vector3<f64>> = recs.iter().map(|r| Vector3::from(r.ee)).collect();
    let last_move = (1..pos.len()).rev().find(|&i| pos[i] != pos[i - 1]).unwrap_or(0);
    let times: Vec<f64> = recs.iter().map(|r| r.t).collect();
    let (acc, jerk) = derivative_rms(&times[..=last_move], &pos[..=last_move]);

    let end = if log.success() { log.boundaries[3] } else { recs.last().map_or(0.0, |r| r.t) };
    let mut phase_times = [0.0; 4];
    let mut start = recs[0].t;
    for (i, slot) in phase_times.iter_mut().enumerate() {
        match log.boundaries.get(i) {
            Some(&b) => {
                *slot = b - start;
                start = b;
            }
            None => {
                *slot = end - start;
                break;
            }
        }
    }
    let control = &recs[1..];
    let mean_solve_time = control.iter().map(|r| r.solve_time).sum::<f64>() / control.len() as f64;
    Ok(Metrics {
        ee_acc_rms: acc,
        ee_jerk_rms: jerk,
        total_time: phase_times.iter().sum(),
        phase_times,
        collision_count: log.collisions,
        mean_solve_time,
        success: log.success(),
    })
}
