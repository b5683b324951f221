//! Dense strictly convex QP with a primal active-set solver.
//!
//! Problems are posed as
//!
//! ```text
//!     minimize    1/2 x' Q x + c' x
//!     subject to  A x <= b
//!                 E x  = d      (optional)
//! ```
//!
//! with `Q` symmetric positive definite. Multipliers follow the sign
//! convention `Q x + c + A' lambda + E' mu = 0`, `lambda >= 0`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added to the diagonal of `Q` before factorization.
pub const HESSIAN_REGULARIZATION: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200;

const SYMMETRY_TOL: f64 = 1e-10;
const SPD_TOL: f64 = 1e-12;
const STEP_TOL: f64 = 1e-11;
const MULTIPLIER_TOL: f64 = 1e-11;
const ACTIVE_TOL: f64 = 1e-9;
const FEASIBILITY_TOL: f64 = 1e-9;
const INDEPENDENCE_TOL: f64 = 1e-8;
/// Linear penalty on the elastic variable of the feasibility phase.
const PHASE_ONE_PENALTY: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub eq: Option<(DMatrix<f64>, DVector<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Inequality multipliers, one per row of `A`.
    pub lambda: DVector<f64>,
    /// Equality multipliers, one per row of `E`.
    pub mu: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Wall-clock seconds spent inside the solver.
    pub solve_time: f64,
    /// For infeasible problems: nonnegative weights `y` on the rows of `A`
    /// with `A' y ~ 0` and `b' y < 0`, normalized to unit sum.
    pub certificate: Option<DVector<f64>>,
}

fn is_spd(m: &DMatrix<f64>, margin: f64) -> bool {
    let shifted = m - DMatrix::identity(m.nrows(), m.ncols()) * margin;
    Cholesky::new(shifted).is_some()
}

fn symmetric_within(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol
}

impl QpProblem {
    /// Validates shapes, symmetry (1e-10) and positive definiteness (1e-12).
    pub fn new(
        q: DMatrix<f64>,
        c: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
        eq: Option<(DMatrix<f64>, DVector<f64>)>,
    ) -> Result<Self> {
        let n = c.len();
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::InvalidProblem(format!(
                "Q is {}x{}, expected {n}x{n}",
                q.nrows(),
                q.ncols()
            )));
        }
        if a.ncols() != n || a.nrows() != b.len() {
            return Err(Error::InvalidProblem(format!(
                "A is {}x{} with {} bounds, expected k x {n}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        if let Some((e, d)) = &eq {
            if e.ncols() != n || e.nrows() != d.len() {
                return Err(Error::InvalidProblem("equality block has inconsistent shape".into()));
            }
        }
        if !symmetric_within(&q, SYMMETRY_TOL) {
            return Err(Error::InvalidProblem("Q is not symmetric".into()));
        }
        if !is_spd(&q, SPD_TOL) {
            return Err(Error::InvalidProblem("Q is not positive definite".into()));
        }
        Ok(Self { q, c, a, b, eq })
    }

    /// Unconstrained problem (no inequality rows).
    pub fn unconstrained(q: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        let n = c.len();
        Self::new(q, c, DMatrix::zeros(0, n), DVector::zeros(0), None)
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.b.len()
    }

    pub fn num_eq(&self) -> usize {
        self.eq.as_ref().map_or(0, |(_, d)| d.len())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.c.dot(x)
    }

    /// Scale objective by `alpha`; the minimizer is unchanged.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            q: &self.q * alpha,
            c: &self.c * alpha,
            ..self.clone()
        }
    }

    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let ineq = (&self.a * x - &self.b).iter().fold(0.0f64, |m, &v| m.max(v));
        let eq = self
            .eq
            .as_ref()
            .map_or(0.0, |(e, d)| (e * x - d).amax());
        ineq.max(eq)
    }

    /// Plain-text dump (TOML, matrices flattened row-major).
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.dump_string()).map_err(|e| Error::io(path, e))
    }

    pub fn dump_string(&self) -> String {
        fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
            (0..m.nrows()).flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>()).collect()
        }
        let mut out = String::new();
        let _ = writeln!(out, "# 1/2 x'Qx + c'x  s.t.  A x <= b,  E x = d; matrices row-major");
        let _ = writeln!(out, "n = {}", self.n());
        let _ = writeln!(out, "k = {}", self.num_ineq());
        let _ = writeln!(out, "p = {}", self.num_eq());
        let fmt = |v: &[f64]| {
            let items: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            format!("[{}]", items.join(", "))
        };
        let _ = writeln!(out, "q = {}", fmt(&row_major(&self.q)));
        let _ = writeln!(out, "c = {}", fmt(self.c.as_slice()));
        let _ = writeln!(out, "a = {}", fmt(&row_major(&self.a)));
        let _ = writeln!(out, "b = {}", fmt(self.b.as_slice()));
        if let Some((e, d)) = &self.eq {
            let _ = writeln!(out, "e = {}", fmt(&row_major(e)));
            let _ = writeln!(out, "d = {}", fmt(d.as_slice()));
        }
        out
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Dump {
            n: usize,
            k: usize,
            p: usize,
            q: Vec<f64>,
            c: Vec<f64>,
            a: Vec<f64>,
            b: Vec<f64>,
            e: Option<Vec<f64>>,
            d: Option<Vec<f64>>,
        }
        let dump: Dump = crate::error::read_toml(path)?;
        let check = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::InvalidProblem(format!("dump field {what} has {got} entries, expected {want}")))
            }
        };
        check("q", dump.q.len(), dump.n * dump.n)?;
        check("a", dump.a.len(), dump.k * dump.n)?;
        let eq = match (dump.e, dump.d) {
            (Some(e), Some(d)) if dump.p > 0 => {
                check("e", e.len(), dump.p * dump.n)?;
                Some((DMatrix::from_row_slice(dump.p, dump.n, &e), DVector::from_vec(d)))
            }
            _ => None,
        };
        Self::new(
            DMatrix::from_row_slice(dump.n, dump.n, &dump.q),
            DVector::from_vec(dump.c),
            DMatrix::from_row_slice(dump.k, dump.n, &dump.a),
            DVector::from_vec(dump.b),
            eq,
        )
    }
}

/// `max` of stationarity, primal feasibility, dual feasibility and
/// complementarity violations (infinity norms).
pub fn kkt_residual(p: &QpProblem, s: &QpSolution) -> f64 {
    let x = &s.x;
    let mut grad = &p.q * x + &p.c;
    if p.num_ineq() > 0 {
        grad += p.a.transpose() * &s.lambda;
    }
    if let Some((e, _)) = &p.eq {
        if s.mu.len() == e.nrows() {
            grad += e.transpose() * &s.mu;
        }
    }
    let mut res: f64 = grad.amax();
    if p.num_ineq() > 0 {
        let slack = &p.a * x - &p.b;
        res = res.max(slack.iter().fold(0.0f64, |m, &v| m.max(v)));
        res = res.max(s.lambda.iter().fold(0.0f64, |m, &v| m.max(-v)));
        res = res.max(slack.component_mul(&s.lambda).amax());
    }
    if let Some((e, d)) = &p.eq {
        res = res.max((e * x - d).amax());
    }
    res
}

/// Primal active-set solver.
///
/// Holds a scratch working set; one instance per control loop.
#[derive(Debug, Clone)]
pub struct ActiveSetSolver {
    pub max_iter: usize,
    working: Vec<usize>,
}

impl Default for ActiveSetSolver {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_ITER)
    }
}

/// Factored Hessian plus the stacked constraint rows used by the subproblems.
struct Factored<'a> {
    p: &'a QpProblem,
    chol: Cholesky<f64, Dyn>,
    /// `L^-1 c`
    lc: DVector<f64>,
}

enum Subproblem {
    Solved { x: DVector<f64>, nu: DVector<f64> },
    Dependent,
}

impl<'a> Factored<'a> {
    fn new(p: &'a QpProblem) -> Option<Self> {
        let n = p.n();
        let q = &p.q + DMatrix::identity(n, n) * HESSIAN_REGULARIZATION;
        let chol = Cholesky::new(q)?;
        let lc = chol.l_dirty().solve_lower_triangular(&p.c)?;
        Some(Self { p, chol, lc })
    }

    fn row(&self, idx: usize) -> (DVector<f64>, f64) {
        let k = self.p.num_ineq();
        if idx < k {
            (self.p.a.row(idx).transpose(), self.p.b[idx])
        } else {
            let (e, d) = self.p.eq.as_ref().expect("equality row index without equality block");
            (e.row(idx - k).transpose(), d[idx - k])
        }
    }

    /// `L^-1 g` for constraint row `idx`.
    fn whitened_row(&self, idx: usize) -> DVector<f64> {
        let (g, _) = self.row(idx);
        self.chol
            .l_dirty()
            .solve_lower_triangular(&g)
            .expect("cholesky factor is nonsingular")
    }

    /// Minimize the objective subject to the listed rows holding with equality.
    fn solve(&self, rows: &[usize]) -> Subproblem {
        let n = self.p.n();
        let l = self.chol.l_dirty();
        if rows.is_empty() {
            let x = -l.tr_solve_lower_triangular(&self.lc).expect("nonsingular");
            return Subproblem::Solved {
                x,
                nu: DVector::zeros(0),
            };
        }
        let w = rows.len();
        let mut y = DMatrix::zeros(n, w);
        let mut h = DVector::zeros(w);
        for (j, &r) in rows.iter().enumerate() {
            y.set_column(j, &self.whitened_row(r));
            h[j] = self.row(r).1;
        }
        let s = y.transpose() * &y;
        let rhs = -(h + y.transpose() * &self.lc);
        let Some(sc) = Cholesky::new(s) else {
            return Subproblem::Dependent;
        };
        let nu = sc.solve(&rhs);
        let x = -l
            .tr_solve_lower_triangular(&(&self.lc + &y * &nu))
            .expect("nonsingular");
        Subproblem::Solved { x, nu }
    }
}

impl ActiveSetSolver {
    pub fn new(max_iter: usize) -> Self {
        Self {
            max_iter,
            working: Vec::new(),
        }
    }

    pub fn solve(&mut self, p: &QpProblem, warm_start: Option<&DVector<f64>>) -> QpSolution {
        let start = Instant::now();
        let mut sol = self.solve_inner(p, warm_start);
        sol.solve_time = start.elapsed().as_secs_f64();
        sol
    }

    fn solve_inner(&mut self, p: &QpProblem, warm_start: Option<&DVector<f64>>) -> QpSolution {
        let n = p.n();
        let k = p.num_ineq();
        let neq = p.num_eq();
        let infeasible = |x: DVector<f64>, iterations, certificate| QpSolution {
            x,
            lambda: DVector::zeros(k),
            mu: DVector::zeros(neq),
            status: QpStatus::Infeasible,
            iterations,
            solve_time: 0.0,
            certificate,
        };

        let Some(f) = Factored::new(p) else {
            return infeasible(DVector::zeros(n), 0, None);
        };
        let eq_rows: Vec<usize> = (k..k + neq).collect();

        // Equality-constrained minimizer; if it already satisfies A x <= b we are done
        // after one multiplier check.
        let x_eq = match f.solve(&eq_rows) {
            Subproblem::Solved { x, .. } => x,
            Subproblem::Dependent => return infeasible(DVector::zeros(n), 0, None),
        };
        if p.max_violation(&x_eq) <= FEASIBILITY_TOL {
            let working = self.initial_working_set(&f, &x_eq, &eq_rows);
            return self.iterate(&f, x_eq, working, 0);
        }

        if let Some(w) = warm_start {
            if w.len() == n && p.max_violation(w) <= FEASIBILITY_TOL {
                let working = self.initial_working_set(&f, w, &eq_rows);
                return self.iterate(&f, w.clone(), working, 0);
            }
        }

        // Elastic feasibility phase: min 1/2|x - x_eq|^2 + 1/2 t^2 + M t
        // s.t. A x - t <= b, t >= 0, E x = d, started from a trivially feasible point.
        let phase_one = elastic_problem(p, &x_eq);
        let t0 = (&p.a * &x_eq - &p.b).iter().fold(0.0f64, |m, &v| m.max(v));
        let mut z0 = DVector::zeros(n + 1);
        z0.rows_mut(0, n).copy_from(&x_eq);
        z0[n] = t0;
        let mut inner = ActiveSetSolver::new(self.max_iter);
        let ph1 = inner.solve_inner(&phase_one, Some(&z0));
        let used = ph1.iterations;
        let t = ph1.x[n];
        match ph1.status {
            QpStatus::Infeasible => return infeasible(x_eq, used, None),
            QpStatus::MaxIter => {
                return QpSolution {
                    status: QpStatus::MaxIter,
                    ..infeasible(ph1.x.rows(0, n).into_owned(), used, None)
                }
            }
            QpStatus::Optimal => {}
        }
        if t > FEASIBILITY_TOL * (1.0 + p.b.amax()) {
            let y = ph1.lambda.rows(0, k).map(|v| v.max(0.0));
            let total = y.sum();
            let cert = (total > 0.0).then(|| y / total);
            return infeasible(ph1.x.rows(0, n).into_owned(), used, cert);
        }
        let x1 = ph1.x.rows(0, n).into_owned();
        let working = self.initial_working_set(&f, &x1, &eq_rows);
        self.iterate(&f, x1, working, used)
    }

    /// Equality rows plus every active inequality that is linearly independent
    /// of those already chosen (lowest index first).
    fn initial_working_set(&mut self, f: &Factored<'_>, x: &DVector<f64>, eq_rows: &[usize]) -> Vec<usize> {
        let p = f.p;
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut working = Vec::new();
        let mut try_add = |idx: usize, working: &mut Vec<usize>| {
            if basis.len() >= p.n() {
                return;
            }
            let y = f.whitened_row(idx);
            let scale = y.norm();
            if scale == 0.0 {
                return;
            }
            let mut r = y.clone();
            for b in &basis {
                let d = b.dot(&r);
                r.axpy(-d, b, 1.0);
            }
            let rn = r.norm();
            if rn > INDEPENDENCE_TOL * scale {
                basis.push(r / rn);
                working.push(idx);
            }
        };
        for &r in eq_rows {
            try_add(r, &mut working);
        }
        let slack = &p.b - &p.a * x;
        for i in 0..p.num_ineq() {
            if slack[i].abs() <= ACTIVE_TOL * (1.0 + p.b[i].abs()) {
                try_add(i, &mut working);
            }
        }
        self.working.clone_from(&working);
        working
    }

    fn iterate(&mut self, f: &Factored<'_>, mut x: DVector<f64>, mut working: Vec<usize>, used: usize) -> QpSolution {
        let p = f.p;
        let k = p.num_ineq();
        let neq = p.num_eq();
        let mut iterations = used;

        loop {
            if iterations >= self.max_iter {
                let (lambda, mu) = self.multipliers(f, &working, k, neq).unwrap_or_else(|| (DVector::zeros(k), DVector::zeros(neq)));
                self.working = working;
                return QpSolution {
                    x,
                    lambda,
                    mu,
                    status: QpStatus::MaxIter,
                    iterations,
                    solve_time: 0.0,
                    certificate: None,
                };
            }
            iterations += 1;

            let (target, nu) = match f.solve(&working) {
                Subproblem::Solved { x, nu } => (x, nu),
                Subproblem::Dependent => {
                    // Numerically dependent working set: drop the newest inequality.
                    match working.iter().rposition(|&r| r < k) {
                        Some(pos) => {
                            working.remove(pos);
                            continue;
                        }
                        None => {
                            return QpSolution {
                                x,
                                lambda: DVector::zeros(k),
                                mu: DVector::zeros(neq),
                                status: QpStatus::Infeasible,
                                iterations,
                                solve_time: 0.0,
                                certificate: None,
                            }
                        }
                    }
                }
            };
            let step = &target - &x;
            if step.amax() <= STEP_TOL * (1.0 + x.amax()) {
                x = target;
                // most negative inequality multiplier, lowest index on ties
                let mut drop: Option<(usize, f64)> = None;
                for (pos, (&r, &m)) in working.iter().zip(nu.iter()).enumerate() {
                    if r < k && m < -MULTIPLIER_TOL {
                        let better = match drop {
                            None => true,
                            Some((best_pos, best)) => m < best || (m == best && r < working[best_pos]),
                        };
                        if better {
                            drop = Some((pos, m));
                        }
                    }
                }
                match drop {
                    Some((pos, _)) => {
                        working.remove(pos);
                    }
                    None => {
                        let mut lambda = DVector::zeros(k);
                        let mut mu = DVector::zeros(neq);
                        for (&r, &m) in working.iter().zip(nu.iter()) {
                            if r < k {
                                lambda[r] = m.max(0.0);
                            } else {
                                mu[r - k] = m;
                            }
                        }
                        self.working = working;
                        return QpSolution {
                            x,
                            lambda,
                            mu,
                            status: QpStatus::Optimal,
                            iterations,
                            solve_time: 0.0,
                            certificate: None,
                        };
                    }
                }
                continue;
            }

            // ratio test, strict comparison keeps the lowest blocking index
            let mut alpha = 1.0;
            let mut blocking = None;
            let a_step = &p.a * &step;
            let a_x = &p.a * &x;
            for i in 0..k {
                if working.contains(&i) {
                    continue;
                }
                let ap = a_step[i];
                if ap <= 1e-14 * (1.0 + p.a.row(i).amax() * step.amax()) {
                    continue;
                }
                let room = (p.b[i] - a_x[i]).max(0.0);
                let t = room / ap;
                if t < alpha {
                    alpha = t;
                    blocking = Some(i);
                }
            }
            x.axpy(alpha, &step, 1.0);
            if let Some(i) = blocking {
                working.push(i);
            }
        }
    }

    fn multipliers(&self, f: &Factored<'_>, working: &[usize], k: usize, neq: usize) -> Option<(DVector<f64>, DVector<f64>)> {
        let Subproblem::Solved { nu, .. } = f.solve(working) else {
            return None;
        };
        let mut lambda = DVector::zeros(k);
        let mut mu = DVector::zeros(neq);
        for (&r, &m) in working.iter().zip(nu.iter()) {
            if r < k {
                lambda[r] = m.max(0.0);
            } else {
                mu[r - k] = m;
            }
        }
        Some((lambda, mu))
    }

    /// Working set at exit of the last solve.
    pub fn last_working_set(&self) -> &[usize] {
        &self.working
    }
}

fn elastic_problem(p: &QpProblem, x_ref: &DVector<f64>) -> QpProblem {
    let n = p.n();
    let k = p.num_ineq();
    let q = DMatrix::identity(n + 1, n + 1);
    let mut c = DVector::zeros(n + 1);
    c.rows_mut(0, n).copy_from(&(-x_ref));
    c[n] = PHASE_ONE_PENALTY;
    let mut a = DMatrix::zeros(k + 1, n + 1);
    a.view_mut((0, 0), (k, n)).copy_from(&p.a);
    for i in 0..k {
        a[(i, n)] = -1.0;
    }
    a[(k, n)] = -1.0;
    let mut b = DVector::zeros(k + 1);
    b.rows_mut(0, k).copy_from(&p.b);
    let eq = p.eq.as_ref().map(|(e, d)| {
        let mut e1 = DMatrix::zeros(e.nrows(), n + 1);
        e1.view_mut((0, 0), (e.nrows(), n)).copy_from(e);
        (e1, d.clone())
    });
    QpProblem { q, c, a, b, eq }
}

/// Solve with a fresh solver instance.
pub fn solve_qp(p: &QpProblem, warm_start: Option<&DVector<f64>>) -> QpSolution {
    ActiveSetSolver::default().solve(p, warm_start)
}

/// Task-space QP with explicit slack on the twist equality:
///
/// ```text
///     minimize    1/2 qd' Qqq qd + 1/2 s' Qss s + c_q' qd
///     subject to  J qd + s = twist,  A qd <= b
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SlackQpForm {
    pub q_qq: DMatrix<f64>,
    pub q_dd: Matrix6<f64>,
    pub c_q: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub twist: Vector6<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl SlackQpForm {
    pub fn new(
        q_qq: DMatrix<f64>,
        q_dd: Matrix6<f64>,
        c_q: DVector<f64>,
        jacobian: DMatrix<f64>,
        twist: Vector6<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self> {
        let n = c_q.len();
        if q_qq.shape() != (n, n) || jacobian.shape() != (6, n) || a.ncols() != n || a.nrows() != b.len() {
            return Err(Error::InvalidProblem("slack form blocks have inconsistent shapes".into()));
        }
        if !symmetric_within(&q_qq, SYMMETRY_TOL) || !is_spd(&q_qq, SPD_TOL) {
            return Err(Error::InvalidProblem("Q_qq must be symmetric positive definite".into()));
        }
        let qdd = DMatrix::from_column_slice(6, 6, q_dd.as_slice());
        if !symmetric_within(&qdd, SYMMETRY_TOL) || !is_spd(&qdd, SPD_TOL) {
            return Err(Error::InvalidProblem("Q_dd must be symmetric positive definite".into()));
        }
        Ok(Self {
            q_qq,
            q_dd,
            c_q,
            jacobian,
            twist,
            a,
            b,
        })
    }

    pub fn n(&self) -> usize {
        self.c_q.len()
    }

    /// Reduced Hessian `Q_qq + J' Q_dd J`.
    pub fn reduced_hessian(&self) -> DMatrix<f64> {
        let qdd = DMatrix::from_column_slice(6, 6, self.q_dd.as_slice());
        let jt_w = self.jacobian.transpose() * qdd;
        let h = &self.q_qq + &jt_w * &self.jacobian;
        // exact symmetry; both factors are symmetric so this only removes rounding
        (&h + h.transpose()) * 0.5
    }

    /// Reduced linear term `c_q - J' Q_dd twist`.
    pub fn reduced_linear(&self) -> DVector<f64> {
        let w_twist = self.q_dd * self.twist;
        &self.c_q - self.jacobian.transpose() * DVector::from_column_slice(w_twist.as_slice())
    }

    /// The `(n + 6)`-variable problem over `(qd; s)` with the twist equality.
    pub fn assemble_slack(&self) -> QpProblem {
        let n = self.n();
        let k = self.b.len();
        let mut q = DMatrix::zeros(n + 6, n + 6);
        q.view_mut((0, 0), (n, n)).copy_from(&self.q_qq);
        q.view_mut((n, n), (6, 6)).copy_from(&self.q_dd);
        let mut c = DVector::zeros(n + 6);
        c.rows_mut(0, n).copy_from(&self.c_q);
        let mut a = DMatrix::zeros(k, n + 6);
        a.view_mut((0, 0), (k, n)).copy_from(&self.a);
        let mut e = DMatrix::zeros(6, n + 6);
        e.view_mut((0, 0), (6, n)).copy_from(&self.jacobian);
        e.view_mut((0, n), (6, 6)).fill_with_identity();
        let d = DVector::from_column_slice(self.twist.as_slice());
        QpProblem {
            q,
            c,
            a,
            b: self.b.clone(),
            eq: Some((e, d)),
        }
    }
}

/// Eliminate the slack by substitution `s = twist - J qd`.
pub fn reduce_slack_qp(f: &SlackQpForm) -> QpProblem {
    QpProblem {
        q: f.reduced_hessian(),
        c: f.reduced_linear(),
        a: f.a.clone(),
        b: f.b.clone(),
        eq: None,
    }
}
