//! Reference computations that share no code with the library: a dual
//! projected-gradient QP solver, finite-difference Jacobians and an
//! eigenvalue-based inverse condition number.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use remqp_core::kinematics::{JointState, RobotModel};
use remqp_core::qp::QpProblem;
use remqp_core::se3::Pose;

/// Strictly convex QP with `k` inequalities and `m` equalities, feasible by
/// construction around a random point with positive inequality slack.
pub fn random_qp(rng: &mut impl Rng, n: usize, k: usize, m: usize) -> QpProblem {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
    let c = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let a = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
    let b = &a * &x0 + DVector::from_fn(k, |_, _| rng.random_range(0.0..1.0));
    let eq = (m > 0).then(|| {
        let e = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let d = &e * &x0;
        (e, d)
    });
    QpProblem::new(q, c, a, b, eq).expect("well-formed random QP")
}

fn stacked(p: &QpProblem) -> (DMatrix<f64>, DVector<f64>) {
    let (n, k) = (p.q.nrows(), p.a.nrows());
    let m = p.eq.as_ref().map_or(0, |(e, _)| e.nrows());
    let mut g = DMatrix::zeros(k + m, n);
    let mut h = DVector::zeros(k + m);
    g.rows_mut(0, k).copy_from(&p.a);
    h.rows_mut(0, k).copy_from(&p.b);
    if let Some((e, d)) = &p.eq {
        g.rows_mut(k, m).copy_from(e);
        h.rows_mut(k, m).copy_from(d);
    }
    (g, h)
}

/// KKT solve on the constraint rows with positive dual weight (plus all
/// equalities). Returns the primal point only if it is feasible and the
/// inequality multipliers are nonnegative, i.e. a verified optimum.
fn polish(p: &QpProblem, g: &DMatrix<f64>, h: &DVector<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let (n, k) = (p.q.nrows(), p.a.nrows());
    let rows: Vec<usize> = (0..g.nrows()).filter(|&i| i >= k || y[i] > 0.0).collect();
    let r = rows.len();
    let mut kkt = DMatrix::zeros(n + r, n + r);
    let mut rhs = DVector::zeros(n + r);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.q);
    rhs.rows_mut(0, n).copy_from(&(-&p.c));
    for (j, &i) in rows.iter().enumerate() {
        for col in 0..n {
            kkt[(n + j, col)] = g[(i, col)];
            kkt[(col, n + j)] = g[(i, col)];
        }
        rhs[n + j] = h[i];
    }
    let sol = kkt.svd(true, true).solve(&rhs, 1e-12).ok()?;
    let x = sol.rows(0, n).into_owned();
    let mult = sol.rows(n, r);
    let feasible = (&p.a * &x - &p.b).iter().all(|&v| v <= 1e-10)
        && p.eq.as_ref().is_none_or(|(e, d)| (e * &x - d).amax() <= 1e-10);
    let dual_ok = rows.iter().zip(mult.iter()).all(|(&i, &l)| i >= k || l >= -1e-10);
    let stationary = {
        let mut grad = &p.q * &x + &p.c;
        for (j, &i) in rows.iter().enumerate() {
            grad += g.row(i).transpose() * mult[j];
        }
        grad.amax() <= 1e-9
    };
    (feasible && dual_ok && stationary).then_some(x)
}

/// Minimizer of a strictly convex QP by accelerated projected gradient on
/// the dual (`lambda >= 0`, `mu` free), with periodic verified polishing
/// on the identified active set.
pub fn dual_projected_gradient(p: &QpProblem) -> DVector<f64> {
    let k = p.a.nrows();
    let chol = p.q.clone().cholesky().expect("strictly convex");
    let (g, h) = stacked(p);
    if g.nrows() == 0 {
        return -chol.solve(&p.c);
    }
    let qinv_gt = chol.solve(&g.transpose());
    let hess = &g * &qinv_gt;
    let lin = &g * chol.solve(&p.c) + &h;
    let lipschitz = hess.clone().symmetric_eigenvalues().max().max(1e-12);
    let project = |y: &mut DVector<f64>| y.rows_mut(0, k).apply(|v| *v = v.max(0.0));

    let mut y = DVector::zeros(g.nrows());
    let mut z = y.clone();
    let mut t = 1.0f64;
    for iter in 1..=2_000_000 {
        let grad = &hess * &z + &lin;
        let mut next = &z - &grad / lipschitz;
        project(&mut next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        if grad.dot(&(&next - &y)) > 0.0 {
            // adaptive restart
            t = 1.0;
            z = next.clone();
        } else {
            z = &next + (&next - &y) * ((t - 1.0) / t_next);
            t = t_next;
        }
        y = next;
        if iter % 50 == 0 {
            if let Some(x) = polish(p, &g, &h, &y) {
                return x;
            }
        }
    }
    panic!("dual projected gradient did not converge");
}

/// Central differences of position and of the relative rotation.
pub fn fd_jacobian(model: &RobotModel, q: &JointState, step: f64) -> DMatrix<f64> {
    let base = q.to_vector();
    let n = base.len();
    let fk = |v: &DVector<f64>| -> Pose { model.forward_kinematics(&JointState::from_vector(v)).unwrap() };
    let mut jac = DMatrix::zeros(6, n);
    for i in 0..n {
        let (mut plus, mut minus) = (base.clone(), base.clone());
        plus[i] += step;
        minus[i] -= step;
        let (a, b) = (fk(&plus), fk(&minus));
        let lin = (a.translation - b.translation) / (2.0 * step);
        // skew part of the relative rotation: sin(angle) * axis, exact to
        // third order for the tiny angles involved
        let r = (a.rotation * b.rotation.inverse()).into_inner();
        let rel = nalgebra::Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) / (4.0 * step);
        jac.view_mut((0, i), (3, 1)).copy_from(&lin);
        jac.view_mut((3, i), (3, 1)).copy_from(&rel);
    }
    jac
}

/// `sqrt(lambda_min / lambda_max)` of `J J'`.
pub fn icn_from_gram(jac: &DMatrix<f64>) -> f64 {
    let ev = (jac * jac.transpose()).symmetric_eigenvalues();
    let (lo, hi) = (ev.min().max(0.0), ev.max());
    if hi <= 0.0 {
        0.0
    } else {
        (lo / hi).sqrt()
    }
}

/// Random state with arm joints inside 90% of their range.
pub fn random_state(model: &RobotModel, rng: &mut impl Rng) -> JointState {
    let arm = DVector::from_iterator(
        model.arm_dof(),
        model.joints.iter().map(|j| {
            let mid = 0.5 * (j.lower + j.upper);
            let half = 0.45 * (j.upper - j.lower);
            rng.random_range(mid - half..mid + half)
        }),
    );
    JointState::new(
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        arm,
    )
}
