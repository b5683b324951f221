//! Per-tick trajectory records and CSV export.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::world::Phase;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Time advances by `dt` every tick.
    FixedDt,
    /// Time advances by `max(dt, compute time)`.
    LatencyCoupled,
}

impl std::str::FromStr for StepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_dt" => Ok(StepMode::FixedDt),
            "latency_coupled" => Ok(StepMode::LatencyCoupled),
            _ => Err(Error::Config(format!("unknown mode '{s}' (fixed_dt | latency_coupled)"))),
        }
    }
}

impl std::fmt::Display for StepMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StepMode::FixedDt => "fixed_dt",
            StepMode::LatencyCoupled => "latency_coupled",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub t: f64,
    /// `x, y, theta, q1..qm`.
    pub q: Vec<f64>,
    pub ee: [f64; 3],
    /// Compute time charged to the command that produced this state.
    pub solve_time: f64,
    pub icn: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub mode: StepMode,
    pub dt: f64,
    pub records: Vec<Record>,
    /// Entry times of `DeskA`, `NavB`, `DeskB`, `Done` (as reached).
    pub boundaries: Vec<f64>,
    pub timed_out: bool,
    /// Number of collision onsets.
    pub collisions: usize,
    /// Ticks whose QP was infeasible (zero command issued).
    pub infeasible_ticks: usize,
}

impl TrajectoryLog {
    pub fn new(mode: StepMode, dt: f64) -> Self {
        Self {
            mode,
            dt,
            records: Vec::new(),
            boundaries: Vec::new(),
            timed_out: false,
            collisions: 0,
            infeasible_ticks: 0,
        }
    }

    pub fn success(&self) -> bool {
        !self.timed_out && self.boundaries.len() == 4
    }

    /// Phases in log order with consecutive duplicates removed.
    pub fn phase_sequence(&self) -> Vec<Phase> {
        let mut seq: Vec<Phase> = Vec::new();
        for r in &self.records {
            if seq.last() != Some(&r.phase) {
                seq.push(r.phase);
            }
        }
        seq
    }

    /// Column order: `t, x, y, theta, q1..qm, ee_x, ee_y, ee_z, solve_time,
    /// icn, phase`. Floats use the shortest round-trip representation.
    pub fn to_csv(&self) -> String {
        let arm = self.records.first().map_or(0, |r| r.q.len().saturating_sub(3));
        let mut out = String::from("t,x,y,theta");
        for i in 1..=arm {
            out.push_str(&format!(",q{i}"));
        }
        out.push_str(",ee_x,ee_y,ee_z,solve_time,icn,phase\n");
        for r in &self.records {
            out.push_str(&r.t.to_string());
            for v in r.q.iter().chain(&r.ee).chain([&r.solve_time, &r.icn]) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push(',');
            out.push_str(r.phase.name());
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        File::create(path)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}
