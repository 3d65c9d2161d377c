mod common;

use ccsgd::apps::fishing::{fishing_problem, sample_fishing, FishingDistribution, FishingParams};
use ccsgd::solver::{run_stage, BatchState, SolverRng};
use ccsgd::{
    batch_gradient, batch_step, mean_objective, naive_quantile, penalty_value, quantile_gap_audit, run_continuation,
    run_penalized, sgd_step, AuditPolicy, ChanceProblem, ContinuationOptions, ContinuationSchedule, IterateState,
    PenaltyFunction, SolverConfig, StepSchedule,
};
use common::{central_diff, random_toy, rel_err, three_scenarios};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const HINGE: PenaltyFunction = PenaltyFunction::QuadraticHinge;

fn penalized(problem: &common::Toy, lambda: f64, x: &[f64]) -> f64 {
    let g: Vec<f64> = (0..problem.scenario_count()).map(|i| problem.constraint(x, i)).collect();
    let (q, _) = naive_quantile(&g, problem.epsilon()).unwrap();
    mean_objective(x, problem) + lambda * penalty_value(q).unwrap()
}

#[test]
fn hand_tracked_minibatch_steps() {
    let p = three_scenarios(-10.0, 10.0);
    let mut state = IterateState::init(&p, &[0.0]).unwrap();
    // z = (−0.5, 1, −0.2); the median is −0.2.
    assert_eq!(state.quantile(), -0.2);
    let mut ties = ChaCha8Rng::seed_from_u64(0);
    let r1 = sgd_step(&mut state, &p, 2.0, 0.5, 0..1, HINGE, &mut ties, false).unwrap();
    assert_eq!((r1.quantile, r1.quantile_scenario), (-0.2, 2));
    assert_eq!(state.x(), &[0.5]);
    let r2 = sgd_step(&mut state, &p, 2.0, 0.5, 1..2, HINGE, &mut ties, false).unwrap();
    assert_eq!(r2.quantile, -0.2);
    assert_eq!(state.x(), &[1.25]);
    assert_eq!(state.delayed_values_by_scenario(), vec![-0.5, 1.5, -0.2]);
    // z = (−0.5, 1.5, 1.05): median 1.05 at scenario 2; estimate −1.75 + 2·1.05.
    let r3 = sgd_step(&mut state, &p, 2.0, 0.5, 2..3, HINGE, &mut ties, false).unwrap();
    assert!((r3.quantile - 1.05).abs() < 1e-15);
    assert_eq!(r3.quantile_scenario, 2);
    assert!((state.x()[0] - 1.075).abs() < 1e-15);
    assert_eq!(state.g_eval_count(), 3 + 3 * 2);
}

#[test]
fn zero_step_keeps_x_but_refreshes_block() {
    let p = three_scenarios(-10.0, 10.0);
    let mut state = IterateState::init(&p, &[0.7]).unwrap();
    assert_eq!(quantile_gap_audit(&mut state, &p).unwrap(), 0.0);
    let mut ties = ChaCha8Rng::seed_from_u64(0);
    sgd_step(&mut state, &p, 1.0, 0.0, 1..2, HINGE, &mut ties, false).unwrap();
    assert_eq!(state.x(), &[0.7]);
    assert_eq!(quantile_gap_audit(&mut state, &p).unwrap(), 0.0);
    assert_eq!(state.audit_eval_count(), 6);
    assert_eq!(state.g_eval_count(), 3 + 2);
}

#[test]
fn batch_gradient_cases() {
    let p = three_scenarios(-10.0, 10.0);
    let g0 = batch_gradient(&[0.0], &p, 0.0, HINGE).unwrap();
    assert_eq!(g0.gradient, vec![-2.0]);
    // At x = 0 the median constraint value is −0.2 < 0, so λ does not matter.
    assert_eq!(batch_gradient(&[0.0], &p, 5.0, HINGE).unwrap().gradient, vec![-2.0]);
    // At x = 1.5 values are (1, 2.5, 1.3): median 1.3 at scenario 2.
    let g = batch_gradient(&[1.5], &p, 2.0, HINGE).unwrap();
    assert_eq!(g.quantile_scenario, 2);
    let fd = central_diff(|x| penalized(&p, 2.0, x), &[1.5], 1e-6);
    assert!(rel_err(&g.gradient, &fd, 1e-12) < 1e-6);
}

#[test]
fn batch_step_cases() {
    let p = three_scenarios(-10.0, 10.0);
    let mut s = BatchState::new(&p, &[1.5]).unwrap();
    batch_step(&mut s, &p, 2.0, 0.0, HINGE, false).unwrap();
    assert_eq!(s.x, vec![1.5]);
    // Gradient at 1.5 is (1.5 − 2) + 2·1.3 = 2.1; one step of 0.1.
    batch_step(&mut s, &p, 2.0, 0.1, HINGE, false).unwrap();
    assert!((s.x[0] - (1.5 - 0.21)).abs() < 1e-15);
    assert_eq!(s.g_eval_count, 6);
    let boxed = three_scenarios(0.0, 1.0);
    let mut s = BatchState::new(&boxed, &[0.0]).unwrap();
    batch_step(&mut s, &boxed, 0.0, 10.0, HINGE, false).unwrap();
    assert_eq!(s.x, vec![1.0]);
}

#[test]
fn full_minibatch_reproduces_batch_iterates() {
    let p = random_toy(4, 40, 9, 0.2);
    let cfg = SolverConfig::new(40, 60, StepSchedule::Constant { alpha: 0.05 }, 3.0, 1);
    let mut sgd = IterateState::init(&p, &[0.0; 4]).unwrap();
    let mut rng = SolverRng::from_seed(1);
    let mut batch = BatchState::new(&p, &[0.0; 4]).unwrap();
    for _ in 0..cfg.n_epoch {
        let mut one = cfg.clone();
        one.n_epoch = 1;
        run_stage(&mut sgd, &p, &one, 3.0, &mut rng).unwrap();
        batch_step(&mut batch, &p, 3.0, 0.05, HINGE, false).unwrap();
        assert!(rel_err(sgd.x(), &batch.x, 1.0) < 1e-12);
    }
}

#[test]
fn update_and_evaluation_counts() {
    let p = random_toy(2, 10, 1, 0.2);
    let cfg = SolverConfig::new(10, 3, StepSchedule::Constant { alpha: 0.01 }, 1.0, 4);
    let run = run_penalized(&[0.0; 2], &p, &cfg).unwrap();
    assert_eq!(run.trace.records.len(), 3);
    assert_eq!(run.state.g_eval_count(), 10 + 3 * 11);
    assert_eq!(run.state.epoch_count(), 4);

    let cfg = SolverConfig::new(3, 2, StepSchedule::Constant { alpha: 0.01 }, 1.0, 4);
    let run = run_penalized(&[0.0; 2], &p, &cfg).unwrap();
    assert_eq!(run.trace.records.len(), 6);
    assert_eq!(run.trace.summary.g_eval_count, 2 * (9 + 3));
    assert_eq!(run.state.f_eval_count(), 18);
}

#[test]
fn iterates_stay_in_box_and_state_is_consistent() {
    let mut p = random_toy(3, 50, 2, 0.1);
    p = ccsgd::ProblemInstance::new(
        common::QuadLinear { dim: 3 },
        p.scenarios().clone(),
        ccsgd::BoxSet::uniform(3, 0.0, 0.3).unwrap(),
        0.1,
    )
    .unwrap();
    let cfg = SolverConfig::new(5, 4, StepSchedule::Constant { alpha: 0.5 }, 10.0, 3);
    let run = run_penalized(&[1.0; 3], &p, &cfg).unwrap();
    run.state.check_invariants(&p).unwrap();
    assert!(run.x.iter().all(|&v| (0.0..=0.3).contains(&v)));
    // Delayed values by scenario are constraint values at some past iterate, so the tracker
    // must agree with its own reconstruction.
    let z = run.state.delayed_values_by_scenario();
    let (q, _) = naive_quantile(&z, 0.1).unwrap();
    assert_eq!(q, run.state.quantile());
}

#[test]
fn parallel_evaluation_is_bit_identical() {
    let p = random_toy(6, 400, 5, 0.15);
    let mut cfg = SolverConfig::new(50, 3, StepSchedule::InverseSqrt { alpha: 0.2 }, 5.0, 8);
    let seq = run_penalized(&[0.0; 6], &p, &cfg).unwrap();
    cfg.parallel = true;
    let par = run_penalized(&[0.0; 6], &p, &cfg).unwrap();
    assert_eq!(seq.x, par.x);
    assert_eq!(seq.trace.records, par.trace.records);
}

#[test]
fn same_seed_same_run_different_seed_different_run() {
    let p = random_toy(3, 100, 6, 0.2);
    let cfg = SolverConfig::new(10, 2, StepSchedule::Constant { alpha: 0.1 }, 5.0, 21);
    let a = run_penalized(&[0.0; 3], &p, &cfg).unwrap();
    let b = run_penalized(&[0.0; 3], &p, &cfg).unwrap();
    assert_eq!(a.x, b.x);
    let mut other = cfg.clone();
    other.seed = 22;
    assert_ne!(run_penalized(&[0.0; 3], &p, &other).unwrap().x, a.x);
}

#[test]
fn single_stage_continuation_equals_penalized_run() {
    let p = random_toy(3, 60, 7, 0.2);
    let cfg = SolverConfig::new(6, 3, StepSchedule::Constant { alpha: 0.1 }, 4.0, 2);
    let single = run_penalized(&[0.0; 3], &p, &cfg).unwrap();
    let sched = ContinuationSchedule::new(vec![4.0]).unwrap();
    let cont = run_continuation(&[0.0; 3], &p, &cfg, &sched, ContinuationOptions::default()).unwrap();
    assert_eq!(cont.x, single.x);
    assert_eq!(cont.stages[0].records, single.trace.records);
}

#[test]
fn repeating_a_stage_does_not_degrade_convex_objective() {
    let p = random_toy(3, 200, 8, 0.2);
    let cfg = SolverConfig::new(20, 10, StepSchedule::InverseSqrt { alpha: 0.2 }, 2.0, 5);
    let mut state = IterateState::init(&p, &[0.0; 3]).unwrap();
    let mut rng = SolverRng::from_seed(5);
    run_stage(&mut state, &p, &cfg, 2.0, &mut rng).unwrap();
    let first = penalized(&p, 2.0, state.x());
    run_stage(&mut state, &p, &cfg, 2.0, &mut rng).unwrap();
    let second = penalized(&p, 2.0, state.x());
    assert!(second <= first + 1e-3, "{second} > {first}");
}

#[test]
fn continuation_reinit_costs_one_epoch_per_extra_stage() {
    let p = random_toy(2, 30, 3, 0.2);
    let cfg = SolverConfig::new(10, 2, StepSchedule::Constant { alpha: 0.05 }, 1.0, 1);
    let sched = ContinuationSchedule::geometric(1.0, 10.0, 3).unwrap();
    let keep = run_continuation(&[0.0; 2], &p, &cfg, &sched, ContinuationOptions::default()).unwrap();
    let reinit = ContinuationOptions { reinit_delayed_values: true };
    let fresh = run_continuation(&[0.0; 2], &p, &cfg, &sched, reinit).unwrap();
    assert_eq!(fresh.state.g_eval_count(), keep.state.g_eval_count() + 2 * 30);
    assert_eq!(keep.stages.len(), 3);
    assert!(keep.stages.iter().all(|s| s.records.len() == 6));
}

#[test]
fn audits_are_recorded_where_requested() {
    let p = random_toy(2, 40, 4, 0.2);
    let mut cfg = SolverConfig::new(10, 3, StepSchedule::Constant { alpha: 0.05 }, 1.0, 1);
    cfg.audit = AuditPolicy::EveryEpoch;
    let run = run_penalized(&[0.0; 2], &p, &cfg).unwrap();
    let audited: Vec<usize> = run.trace.records.iter().filter(|r| r.gap.is_some()).map(|r| r.k).collect();
    assert_eq!(audited, vec![4, 8, 12]);
    assert_eq!(run.state.audit_eval_count(), 3 * 40);
    assert_eq!(run.state.g_eval_count(), 40 + 12 * 11);
}

#[test]
fn minibatch_objective_gradient_is_unbiased() {
    let params = FishingParams::new(8);
    let set = sample_fishing(&params, &FishingDistribution::default(), 60, 3).unwrap();
    let p = fishing_problem(params, set, 0.2).unwrap();
    let x = vec![0.3; 8];
    let s = p.scenario_count();
    let rows: Vec<Vec<f64>> = (0..s)
        .map(|i| {
            let mut g = vec![0.0; 8];
            p.objective_grad(&x, i, &mut g);
            g
        })
        .collect();
    let full: Vec<f64> = (0..8).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / s as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 10_000;
    let size = 6;
    let mut sum = [0.0; 8];
    let mut sq = [0.0; 8];
    for _ in 0..draws {
        let idx = sample(&mut rng, s, size);
        for c in 0..8 {
            let m = idx.iter().map(|i| rows[i][c]).sum::<f64>() / size as f64;
            sum[c] += m;
            sq[c] += m * m;
        }
    }
    for c in 0..8 {
        let mean = sum[c] / draws as f64;
        let var = sq[c] / draws as f64 - mean * mean;
        let se = (var / draws as f64).sqrt();
        assert!((mean - full[c]).abs() < 3.0 * se + 1e-15, "coordinate {c}");
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let p = random_toy(2, 10, 1, 0.2);
    let step = StepSchedule::Constant { alpha: 0.1 };
    assert!(run_penalized(&[0.0; 2], &p, &SolverConfig::new(0, 1, step, 1.0, 0)).is_err());
    assert!(run_penalized(&[0.0; 2], &p, &SolverConfig::new(11, 1, step, 1.0, 0)).is_err());
    assert!(run_penalized(&[0.0; 2], &p, &SolverConfig::new(5, 0, step, 1.0, 0)).is_err());
    assert!(run_penalized(&[0.0; 2], &p, &SolverConfig::new(5, 1, step, f64::NAN, 0)).is_err());
    let neg = StepSchedule::Constant { alpha: -1.0 };
    assert!(run_penalized(&[0.0; 2], &p, &SolverConfig::new(5, 1, neg, 1.0, 0)).is_err());
}
