//! Whole-body velocity controllers.
//!
//! All four variants share the same servo law, safety constraints and
//! weights. They differ along two axes:
//!
//! * slack handling: the `(n + 6)`-variable slack form versus the reduced
//!   `n`-variable form obtained by substituting the slack;
//! * preference: none, or the negative finite-difference gradient of the
//!   Jacobian's inverse condition number in the linear term.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{Jacobian, JointState, RobotModel, BASE_DOF};
use crate::qp::{reduce_slack_qp, ActiveSetSolver, QpStatus, SlackQpForm, DEFAULT_MAX_ITER};
use crate::se3::{pose_error_twist, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    BaselineSlack,
    ElimSlacks,
    BaselineIcn,
    RemQp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BaselineSlack,
        Variant::ElimSlacks,
        Variant::BaselineIcn,
        Variant::RemQp,
    ];

    pub fn uses_icn(self) -> bool {
        matches!(self, Variant::BaselineIcn | Variant::RemQp)
    }

    pub fn uses_slack_form(self) -> bool {
        matches!(self, Variant::BaselineSlack | Variant::BaselineIcn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineSlack => "baseline_slack",
            Variant::ElimSlacks => "elim_slacks",
            Variant::BaselineIcn => "baseline_icn",
            Variant::RemQp => "rem_qp",
        }
    }

    /// Row label used in text reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::BaselineSlack => "Baseline",
            Variant::ElimSlacks => "Elim. Slacks",
            Variant::BaselineIcn => "Baseline+ICN",
            Variant::RemQp => "ReM-QP",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown controller variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DamperConfig {
    /// Distance to a limit (rad) below which the damper engages.
    pub influence: f64,
    /// Distance to a limit (rad) at which approach velocity reaches zero.
    pub stop: f64,
    pub gain: f64,
}

impl Default for DamperConfig {
    fn default() -> Self {
        Self {
            influence: 0.9,
            stop: 0.1,
            gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwistClamp {
    pub linear: f64,
    pub angular: f64,
}

/// Velocity-regularization weight `Q_qq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VelocityWeight {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl VelocityWeight {
    pub fn matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        match self {
            VelocityWeight::Scalar(w) => Ok(DMatrix::identity(n, n) * *w),
            VelocityWeight::Diagonal(d) if d.len() == n => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d))),
            VelocityWeight::Full(rows) if rows.len() == n && rows.iter().all(|r| r.len() == n) => {
                Ok(DMatrix::from_fn(n, n, |r, c| rows[r][c]))
            }
            _ => Err(Error::InvalidController(format!("q_qq does not match {n} coordinates"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub variant: Variant,
    pub q_qq: VelocityWeight,
    /// Diagonal of the slack weight `Q_dd` (linear then angular).
    pub slack_weights: [f64; 6],
    pub servo_gain: f64,
    pub twist_clamp: TwistClamp,
    pub icn_weight: f64,
    pub icn_fd_step: f64,
    pub damper: DamperConfig,
    pub max_iter: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self::for_variant(Variant::RemQp)
    }
}

impl ControllerConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            q_qq: VelocityWeight::Scalar(0.01),
            slack_weights: [10.0, 10.0, 10.0, 5.0, 5.0, 5.0],
            servo_gain: 2.0,
            twist_clamp: TwistClamp {
                linear: 0.5,
                angular: 1.0,
            },
            icn_weight: if variant.uses_icn() { 1.0 } else { 0.0 },
            icn_fd_step: 1e-5,
            damper: DamperConfig::default(),
            max_iter: DEFAULT_MAX_ITER,
        }
    }

    /// Same weights, different variant. The ICN weight is zeroed for variants
    /// without the preference and kept (or defaulted to 1) for those with it.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let icn_weight = match (variant.uses_icn(), self.icn_weight) {
            (false, _) => 0.0,
            (true, w) if w > 0.0 => w,
            (true, _) => 1.0,
        };
        Self {
            variant,
            icn_weight,
            ..self.clone()
        }
    }

    pub fn slack_weight_matrix(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::from_column_slice(&self.slack_weights))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidController(m.to_string()));
        if self.variant.uses_icn() {
            if !(self.icn_weight > 0.0) {
                return bad("ICN variants need a positive icn_weight");
            }
        } else if self.icn_weight != 0.0 {
            return bad("icn_weight must be exactly 0 for variants without the ICN preference");
        }
        let d = &self.damper;
        if !(d.stop < d.influence) || d.stop < 0.0 || d.gain < 0.0 {
            return bad("damper needs 0 <= stop < influence and a nonnegative gain");
        }
        if self.servo_gain < 0.0 || self.twist_clamp.linear < 0.0 || self.twist_clamp.angular < 0.0 {
            return bad("servo gain and twist clamps must be nonnegative");
        }
        if !(self.icn_fd_step > 0.0) {
            return bad("icn_fd_step must be positive");
        }
        if self.slack_weights.iter().any(|&w| !(w > 0.0)) {
            return bad("slack weights must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlCommand {
    pub qdot: DVector<f64>,
    /// Wall-clock QP solve time (s).
    pub solve_time: f64,
    pub icn: f64,
    pub status: QpStatus,
    pub iterations: usize,
    /// QP size as solved: (variables, equality rows, inequality rows).
    pub qp_dims: (usize, usize, usize),
}

/// Proportional servo on the pose error with separate norm clamps on the
/// linear and angular parts.
pub fn servo_twist(current: &Pose, goal: &Pose, cfg: &ControllerConfig) -> Vector6<f64> {
    let mut t = pose_error_twist(current, goal) * cfg.servo_gain;
    let clamp = |t: &mut Vector6<f64>, start: usize, limit: f64| {
        let mut part = t.fixed_rows_mut::<3>(start);
        let norm = part.norm();
        if norm > limit {
            part *= limit / norm;
        }
    };
    clamp(&mut t, 0, cfg.twist_clamp.linear);
    clamp(&mut t, 3, cfg.twist_clamp.angular);
    t
}

/// Inverse condition number `sigma_min / sigma_max` of a 6 x n Jacobian.
pub fn icn(jac: &Jacobian) -> f64 {
    let sv = jac.singular_values();
    let max = sv.max();
    if max <= 0.0 || !max.is_finite() {
        return 0.0;
    }
    (sv.min() / max).clamp(0.0, 1.0)
}

pub fn icn_at(model: &RobotModel, q: &JointState) -> Result<f64> {
    Ok(icn(&model.jacobian(q)?))
}

/// Centered finite-difference gradient of the ICN over all generalized
/// coordinates. The base x/y entries are exactly zero: the Jacobian does not
/// depend on base translation, so they are not evaluated.
pub fn icn_gradient(model: &RobotModel, q: &JointState, step: f64) -> Result<DVector<f64>> {
    model.check_state(q)?;
    let n = model.dof();
    let base = q.to_vector();
    let mut grad = DVector::zeros(n);
    for i in 2..n {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += step;
        minus[i] -= step;
        let ip = icn_at(model, &JointState::from_vector(&plus))?;
        let im = icn_at(model, &JointState::from_vector(&minus))?;
        grad[i] = (ip - im) / (2.0 * step);
    }
    Ok(grad)
}

/// Damper bound on approach velocity toward a limit at distance `rho`.
pub fn damper_bound(rho: f64, d: &DamperConfig) -> f64 {
    d.gain * (rho - d.stop) / (d.influence - d.stop)
}

/// Velocity bounds on every coordinate plus velocity dampers on arm joints
/// close to a position limit, as `A qdot <= b`.
///
/// A joint already past its stop distance (or outside its limits) gets a
/// non-positive bound that forces it to retreat; the bound is floored at
/// minus the joint velocity limit so the row set stays feasible.
pub fn build_safety_constraints(
    model: &RobotModel,
    q: &JointState,
    cfg: &ControllerConfig,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    model.check_state(q)?;
    let n = model.dof();
    let limits = model.velocity_limits();
    let mut rows: Vec<(usize, f64, f64)> = Vec::with_capacity(2 * n + 4);
    for i in 0..n {
        rows.push((i, 1.0, limits[i]));
        rows.push((i, -1.0, limits[i]));
    }
    for (j, (joint, &angle)) in model.joints.iter().zip(q.arm.iter()).enumerate() {
        let col = BASE_DOF + j;
        let to_upper = joint.upper - angle;
        if to_upper < cfg.damper.influence {
            rows.push((col, 1.0, damper_bound(to_upper, &cfg.damper).max(-joint.vel_limit)));
        }
        let to_lower = angle - joint.lower;
        if to_lower < cfg.damper.influence {
            rows.push((col, -1.0, damper_bound(to_lower, &cfg.damper).max(-joint.vel_limit)));
        }
    }
    let mut a = DMatrix::zeros(rows.len(), n);
    let mut b = DVector::zeros(rows.len());
    for (r, &(col, sign, bound)) in rows.iter().enumerate() {
        a[(r, col)] = sign;
        b[r] = bound;
    }
    Ok((a, b))
}

/// Assembled per-tick problem data, exposed for analysis and benchmarking.
#[derive(Debug, Clone)]
pub struct TickProblem {
    pub form: SlackQpForm,
    pub twist: Vector6<f64>,
    pub icn: f64,
}

/// Whole-body controller: owns the solver workspace and the warm start.
#[derive(Debug, Clone)]
pub struct Controller {
    model: RobotModel,
    cfg: ControllerConfig,
    q_qq: DMatrix<f64>,
    solver: ActiveSetSolver,
    warm: Option<DVector<f64>>,
}

impl Controller {
    pub fn new(model: RobotModel, cfg: ControllerConfig) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        let q_qq = cfg.q_qq.matrix(model.dof())?;
        Ok(Self {
            solver: ActiveSetSolver::new(cfg.max_iter),
            model,
            cfg,
            q_qq,
            warm: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Servo twist, preference term and constraints for the current state.
    pub fn assemble(&self, q: &JointState, goal: &Pose) -> Result<TickProblem> {
        let current = self.model.forward_kinematics(q)?;
        let twist = servo_twist(&current, goal, &self.cfg);
        let jac = self.model.jacobian(q)?;
        let icn_value = icn(&jac);
        let c_q = if self.cfg.variant.uses_icn() {
            -icn_gradient(&self.model, q, self.cfg.icn_fd_step)? * self.cfg.icn_weight
        } else {
            DVector::zeros(self.model.dof())
        };
        let (a, b) = build_safety_constraints(&self.model, q, &self.cfg)?;
        let form = SlackQpForm::new(
            self.q_qq.clone(),
            self.cfg.slack_weight_matrix(),
            c_q,
            jac,
            twist,
            a,
            b,
        )?;
        Ok(TickProblem {
            form,
            twist,
            icn: icn_value,
        })
    }

    pub fn compute_control(&mut self, q: &JointState, goal: &Pose) -> Result<ControlCommand> {
        let tick = self.assemble(q, goal)?;
        let n = self.model.dof();
        let problem = if self.cfg.variant.uses_slack_form() {
            tick.form.assemble_slack()
        } else {
            reduce_slack_qp(&tick.form)
        };
        let warm = self.warm.as_ref().filter(|w| w.len() == problem.n());
        let sol = self.solver.solve(&problem, warm);
        let usable = match sol.status {
            QpStatus::Optimal => true,
            QpStatus::MaxIter => problem.max_violation(&sol.x) <= 1e-9,
            QpStatus::Infeasible => false,
        };
        let qdot = if usable {
            self.warm = Some(sol.x.clone());
            sol.x.rows(0, n).into_owned()
        } else {
            self.warm = None;
            DVector::zeros(n)
        };
        Ok(ControlCommand {
            qdot,
            solve_time: sol.solve_time,
            icn: tick.icn,
            status: sol.status,
            iterations: sol.iterations,
            qp_dims: (problem.n(), problem.num_eq(), problem.num_ineq()),
        })
    }
}

/// One-shot control computation with a fresh controller.
pub fn compute_control(
    model: &RobotModel,
    q: &JointState,
    goal: &Pose,
    cfg: &ControllerConfig,
) -> Result<ControlCommand> {
    Controller::new(model.clone(), cfg.clone())?.compute_control(q, goal)
}
