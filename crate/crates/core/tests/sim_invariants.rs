use nalgebra::{DVector, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remqp_core::control::{Controller, ControllerConfig, Variant};
use remqp_core::kinematics::{JointState, RobotModel};
use remqp_core::se3::Pose;
use remqp_core::sim::episode::{run_episode, run_episode_observed, TickObserver};
use remqp_core::sim::task::GoalCommand;
use remqp_core::sim::world::step_world;
use remqp_core::sim::{run_scripted, FixedGoal, GoalSource, Phase, Scene, SceneConfig, SimConfig, StepMode, WorldState};

fn random_qdot(model: &RobotModel, rng: &mut impl Rng) -> DVector<f64> {
    let lim = model.velocity_limits();
    DVector::from_fn(lim.len(), |i, _| rng.random_range(-lim[i]..=lim[i]))
}

/// Upper bound on the distance between any two frames of the chain.
fn reach(model: &RobotModel) -> f64 {
    model.mount.translation.norm() + model.joints.iter().map(|j| j.offset.translation.norm()).sum::<f64>() + model.ee_offset.translation.norm()
}

/// Largest end-effector displacement per unit time any admissible command
/// can produce: base translation plus every rotation (heading and arm
/// joints, L1) acting on a lever of at most `reach`.
fn speed_bound(model: &RobotModel) -> f64 {
    let lim = model.velocity_limits();
    lim[0].hypot(lim[1]) + reach(model) * lim.rows(2, lim.len() - 2).sum()
}

fn fixed_dt() -> SimConfig {
    SimConfig { mode: StepMode::FixedDt, ..SimConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attached_object_follows_the_end_effector(seed in any::<u64>()) {
        let model = RobotModel::surrogate_7dof();
        let scene = SceneConfig::default().instantiate(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = WorldState::initial(&model, &scene);
        let ee = model.forward_kinematics(&w.robot).unwrap();
        let offset = ee.inverse().compose(&w.object_pose);
        w.grasp_offset = Some(offset);
        for _ in 0..100 {
            w = step_world(&model, &w, &random_qdot(&model, &mut rng), 0.01, 0.01).unwrap();
            let expected = model.forward_kinematics(&w.robot).unwrap().compose(&offset);
            prop_assert!(w.object_pose.max_abs_diff(&expected) <= 1e-12);
        }
    }

    #[test]
    fn per_tick_displacement_is_bounded(seed in any::<u64>(), dt in 1e-3f64..0.05) {
        let model = RobotModel::surrogate_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = speed_bound(&model) * dt;
        let mut q = JointState::home(model.arm_dof());
        for _ in 0..50 {
            let next = q.integrate(&random_qdot(&model, &mut rng), dt);
            let a = model.forward_kinematics(&q).unwrap().translation;
            let b = model.forward_kinematics(&next).unwrap().translation;
            prop_assert!((b - a).norm() <= bound);
            q = next;
        }
    }
}

#[test]
fn dampers_keep_joints_inside_their_limits() {
    let model = RobotModel::surrogate_7dof();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dt = 0.01;
    for variant in [Variant::ElimSlacks, Variant::RemQp] {
        let mut ctrl = Controller::new(model.clone(), ControllerConfig::for_variant(variant)).unwrap();
        let mut q = JointState::home(model.arm_dof());
        let mut goal = Pose::identity();
        for step in 0..10_000 {
            if step % 100 == 0 {
                // often out of reach, which drives joints toward their limits
                let p = Vector3::new(q.x, q.y, 0.0)
                    + Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-0.5..2.0));
                let r = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                goal = Pose::new(nalgebra::Rotation3::new(r), p);
            }
            let cmd = ctrl.compute_control(&q, &goal).unwrap();
            q = q.integrate(&cmd.qdot, dt);
            for (j, &angle) in model.joints.iter().zip(q.arm.iter()) {
                assert!(angle >= j.lower && angle <= j.upper, "{variant} step {step}: {angle} outside [{}, {}]", j.lower, j.upper);
            }
        }
    }
}

/// Checks world-state invariants at every tick.
struct Invariants {
    last_time: f64,
    last_phase: Phase,
    ticks: usize,
}

impl TickObserver for Invariants {
    fn observe(&mut self, w: &WorldState, _: &GoalCommand, _: &dyn GoalSource, model: &RobotModel, _: &Scene) -> remqp_core::Result<()> {
        if let Some(offset) = &w.grasp_offset {
            let expected = model.forward_kinematics(&w.robot)?.compose(offset);
            assert!(w.object_pose.max_abs_diff(&expected) <= 1e-12);
        }
        assert!(w.time >= self.last_time);
        assert!(w.phase >= self.last_phase, "{:?} after {:?}", w.phase, self.last_phase);
        self.last_time = w.time;
        self.last_phase = w.phase;
        self.ticks += 1;
        Ok(())
    }
}

#[test]
fn scripted_episode_completes_with_invariants_on_every_tick() {
    let model = RobotModel::surrogate_7dof();
    let scene = SceneConfig::default().instantiate(1).unwrap();
    let sim = fixed_dt();
    let mut goals = remqp_core::sim::ScriptedGoals::new(sim.waypoints);
    let mut inv = Invariants { last_time: 0.0, last_phase: Phase::NavA, ticks: 0 };
    let ep = run_episode_observed(&model, &scene, &ControllerConfig::for_variant(Variant::RemQp), &mut goals, &sim, Some(&mut inv)).unwrap();
    assert!(ep.log.success());
    assert_eq!(ep.log.phase_sequence(), [Phase::NavA, Phase::DeskA, Phase::NavB, Phase::DeskB, Phase::Done]);
    assert!(ep.log.boundaries.windows(2).all(|b| b[0] < b[1]));
    assert_eq!(inv.ticks + 1, ep.log.records.len());

    // fixed-dt logs are uniformly spaced and respect the displacement bound
    let bound = speed_bound(&model) * sim.dt;
    for pair in ep.log.records.windows(2) {
        assert!((pair[1].t - pair[0].t - sim.dt).abs() <= 1e-9);
        let step = Vector3::from(pair[1].ee) - Vector3::from(pair[0].ee);
        assert!(step.norm() <= bound);
    }
    let m = ep.metrics().unwrap();
    assert!((m.phase_times.iter().sum::<f64>() - m.total_time).abs() <= 1e-9);
}

#[test]
fn latency_coupled_time_advances_by_the_modeled_solve_time() {
    let model = RobotModel::surrogate_7dof();
    let scene = SceneConfig::default().instantiate(0).unwrap();
    let sim = SimConfig { episode_cap: 1.0, ..SimConfig::default() };
    for (variant, vars, eq) in [(Variant::BaselineSlack, 16.0, 6.0), (Variant::ElimSlacks, 10.0, 0.0)] {
        let ep = run_scripted(&model, &scene, &ControllerConfig::for_variant(variant), &sim).unwrap();
        let period = sim.dt.max(sim.latency.scale * f64::powi(vars + eq, 3));
        for pair in ep.log.records.windows(2) {
            assert!((pair[1].t - pair[0].t - period).abs() <= 1e-12, "{variant}");
        }
    }
}

#[test]
fn goal_at_the_start_pose_times_out() {
    let model = RobotModel::surrogate_7dof();
    let scene = SceneConfig::default().instantiate(0).unwrap();
    let start = WorldState::initial(&model, &scene);
    let mut goal = FixedGoal(model.forward_kinematics(&start.robot).unwrap());
    let sim = SimConfig { episode_cap: 3.0, ..fixed_dt() };
    let ep = run_episode(&model, &scene, &ControllerConfig::for_variant(Variant::RemQp), &mut goal, &sim).unwrap();
    assert!(ep.log.timed_out);
    assert!(!ep.log.success());
    assert_eq!(ep.log.phase_sequence(), [Phase::NavA]);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let model = RobotModel::surrogate_7dof();
    let scene = SceneConfig::easy().instantiate(4).unwrap();
    for variant in Variant::ALL {
        let cfg = ControllerConfig::for_variant(variant);
        let a = run_scripted(&model, &scene, &cfg, &SimConfig::default()).unwrap();
        let b = run_scripted(&model, &scene, &cfg, &SimConfig::default()).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv(), "{variant}");
    }
}
