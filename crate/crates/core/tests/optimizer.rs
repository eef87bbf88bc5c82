use bdris::experiments::{run_trial, ExperimentPlan};
use bdris::gradient::GradientMode;
use bdris::manifold::{random_unitary_symmetric, TangentDirection};
use bdris::model::{uniform_power_beamformer, Architecture};
use bdris::optimizer::{
    armijo_search, optimize, polak_ribiere_beta, SolverConfig, Termination, TRACE_HEADER,
};
use bdris::{BlockDiagonal, CMatrix, ChannelSet, ScatteringMatrix, SystemDims, C64};

fn small_plan() -> ExperimentPlan {
    let mut plan = ExperimentPlan::default();
    plan.set("users", "3").unwrap();
    plan.set("antennas", "3").unwrap();
    plan.set("elements", "8").unwrap();
    plan.solver.max_iters = 300;
    plan
}

fn scalar(z: C64) -> BlockDiagonal {
    BlockDiagonal::from_blocks(&[CMatrix::from_element(1, 1, z)]).unwrap()
}

#[test]
fn zero_channels_stop_at_once() {
    let ch = ChannelSet::new(CMatrix::zeros(4, 2), CMatrix::zeros(2, 4), 1e-3).unwrap();
    let bf = uniform_power_beamformer(&ch.dims(2).unwrap(), 1.0).unwrap();
    let (theta, trace) = optimize(&ch, &bf, 2, &SolverConfig::default()).unwrap();
    assert!(trace.iterations() <= 2);
    assert_eq!(trace.termination, Termination::Tolerance);
    assert!(theta.is_feasible());
    assert_eq!(trace.final_sum_rate, 0.0);
}

#[test]
fn traces_ascend_and_satisfy_armijo() {
    let plan = small_plan();
    for arch in [Architecture::SingleConnected, Architecture::GroupConnected { group_size: 2 }, Architecture::FullyConnected] {
        for trial in 0..3 {
            let (theta, trace) = run_trial(&plan, arch, 8, 20.0, trial).unwrap();
            assert!(theta.is_feasible());
            let mut prev = trace.initial_objective;
            for rec in &trace.records {
                assert!(rec.slope > 0.0, "{arch} trial {trial}: slope {}", rec.slope);
                assert_eq!(rec.objective_before, prev);
                assert!(
                    rec.objective >= rec.objective_before + plan.solver.armijo_sigma * rec.alpha * rec.slope,
                    "{arch} trial {trial} iteration {}",
                    rec.iteration
                );
                assert!(rec.armijo_steps <= plan.solver.max_armijo);
                prev = rec.objective;
            }
        }
    }
}

#[test]
fn single_connected_output_is_phase_only() {
    let (theta, _) = run_trial(&small_plan(), Architecture::SingleConnected, 8, 10.0, 1).unwrap();
    for b in theta.blocks().blocks() {
        assert!((b[(0, 0)].norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn runs_are_deterministic() {
    let plan = small_plan();
    let (a, ta) = run_trial(&plan, Architecture::GroupConnected { group_size: 4 }, 8, 15.0, 2).unwrap();
    let (b, tb) = run_trial(&plan, Architecture::GroupConnected { group_size: 4 }, 8, 15.0, 2).unwrap();
    assert_eq!(a.blocks(), b.blocks());
    assert_eq!(ta.records, tb.records);
}

#[test]
fn identity_start_never_loses_rate_on_single_connected() {
    let mut plan = small_plan();
    plan.set("init", "identity").unwrap();
    for trial in 0..3 {
        let (_, trace) = run_trial(&plan, Architecture::SingleConnected, 8, 20.0, trial).unwrap();
        assert!(trace.final_sum_rate >= trace.initial_sum_rate - 1e-9);
    }
}

#[test]
fn groupwise_mode_runs_and_stays_feasible() {
    let mut plan = small_plan();
    plan.solver.gradient_mode = GradientMode::Groupwise;
    let (theta, trace) = run_trial(&plan, Architecture::GroupConnected { group_size: 2 }, 8, 20.0, 0).unwrap();
    assert!(theta.is_feasible());
    assert_eq!(trace.gradient_mode, GradientMode::Groupwise);
}

#[test]
fn zero_direction_takes_the_initial_step() {
    let dims = SystemDims::new(1, 1, 4, 2).unwrap();
    let theta = random_unitary_symmetric(&dims, 3);
    let zero = TangentDirection::zeros_like(&theta);
    let config = SolverConfig::default();
    let out = armijo_search(|_| 1.0, &theta, &zero, &zero, &config).unwrap();
    assert!(out.accepted);
    assert_eq!(out.alpha, config.alpha_init);
    assert_eq!(out.steps, 1);
}

#[test]
fn scalar_backtracking_matches_hand_sequence() {
    // theta = 1, xi = i: R(theta, a xi) = (1 + i a)/sqrt(1 + a^2), f = Im, slope = 1.
    // With sigma = 0.9 the test is 1/sqrt(1 + a^2) >= 0.9, so a = 1, 0.5 fail and 0.25 passes.
    let theta = ScatteringMatrix::new(scalar(C64::new(1.0, 0.0)));
    let xi = TangentDirection::new(scalar(C64::new(0.0, 1.0)));
    let config = SolverConfig { armijo_sigma: 0.9, alpha_init: 1.0, alpha_shrink: 0.5, ..SolverConfig::default() };
    let out = armijo_search(|t| t.block(0)[(0, 0)].im, &theta, &xi, &xi, &config).unwrap();
    assert_eq!(out.alpha, 0.25);
    assert_eq!(out.steps, 3);
    assert!((out.objective - 0.25 / 1.0625f64.sqrt()).abs() < 1e-15);
    let z = out.theta.blocks().block(0)[(0, 0)];
    assert!((z - C64::new(1.0, 0.25) / 1.0625f64.sqrt()).norm() < 1e-15);
}

#[test]
fn failed_search_keeps_the_point() {
    let theta = ScatteringMatrix::new(scalar(C64::new(1.0, 0.0)));
    let xi = TangentDirection::new(scalar(C64::new(0.0, 1.0)));
    let config = SolverConfig { max_armijo: 5, ..SolverConfig::default() };
    let out = armijo_search(|t| -t.block(0)[(0, 0)].im, &theta, &xi, &xi, &config).unwrap();
    assert!(!out.accepted);
    assert_eq!(out.alpha, 0.0);
    assert_eq!(out.steps, 5);
    assert_eq!(out.theta.blocks(), theta.blocks());
}

#[test]
fn polak_ribiere_examples() {
    let t = |z: f64| TangentDirection::new(scalar(C64::new(0.0, z)));
    // <r_new, r_new - r_old> / <r_old, xi_old> = 2 (2 - 1) / 1
    assert_eq!(polak_ribiere_beta(&t(2.0), &t(1.0), &t(1.0)).unwrap(), 2.0);
    // negative numerator is clamped
    assert_eq!(polak_ribiere_beta(&t(0.5), &t(1.0), &t(1.0)).unwrap(), 0.0);
    // vanishing denominator
    assert_eq!(polak_ribiere_beta(&t(2.0), &t(0.0), &t(1.0)).unwrap(), 0.0);
}

#[test]
fn trace_csv_has_expected_header() {
    let (_, trace) = run_trial(&small_plan(), Architecture::FullyConnected, 8, 5.0, 0).unwrap();
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), TRACE_HEADER.join(","));
    assert_eq!(lines.count(), trace.iterations());
}

#[test]
fn invalid_configs_are_rejected() {
    let ch = ChannelSet::new(CMatrix::zeros(2, 1), CMatrix::zeros(1, 2), 1.0).unwrap();
    let bf = uniform_power_beamformer(&ch.dims(1).unwrap(), 1.0).unwrap();
    for config in [
        SolverConfig { alpha_shrink: 1.0, ..SolverConfig::default() },
        SolverConfig { armijo_sigma: 1.0, ..SolverConfig::default() },
        SolverConfig { nu: -1.0, ..SolverConfig::default() },
        SolverConfig { max_armijo: 0, ..SolverConfig::default() },
    ] {
        assert!(optimize(&ch, &bf, 1, &config).is_err(), "{config:?}");
    }
}
