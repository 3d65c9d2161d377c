mod common;

use ccsgd::adjoint::{forward_sweep, grad_stage_sum, ControlledSystem, Controls, StageCost, StepEvent};
use ccsgd::apps::fishing::{self, sample_fishing, FishingDistribution, FishingParams, FishingSystem};
use ccsgd::apps::gas::{build_synthetic_network, ActiveTerm, GasDecision, GasModel, GasNetwork, SyntheticGasSpec};
use ccsgd::apps::separator::{
    constraint_and_gradient, evaluate_pair, sample_separator, ParticleSystem, SeparatorDistribution, SeparatorParams,
};
use ccsgd::ScenarioModel;
use common::{central_diff, rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn fishing_gradients_match_finite_differences() {
    let params = FishingParams::new(20);
    let set = sample_fishing(&params, &FishingDistribution::default(), 10, 101).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in set.iter() {
        let u: Vec<f64> = (0..20).map(|_| rng.random_range(0.05..0.95)).collect();
        let g = fishing::gradients(&params, s, &u);
        let fd_f = central_diff(|v| fishing::objective(&params, s, v), &u, 1e-6);
        let fd_g = central_diff(|v| fishing::constraint(&params, s, v), &u, 1e-6);
        assert!(rel_err(&g.objective_grad, &fd_f, 1e-8) < 1e-6);
        assert!(rel_err(&g.constraint_grad, &fd_g, 1e-8) < 1e-6);
    }
}

#[test]
fn fishing_closed_form_equals_adjoint_engine_bitwise() {
    for steps in [1, 2, 20, 100] {
        let params = FishingParams::new(steps);
        let set = sample_fishing(&params, &FishingDistribution::default(), 10, steps as u64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in set.iter() {
            let u: Vec<f64> = (0..steps).map(|_| rng.random_range(0.0..1.0)).collect();
            let closed = fishing::gradients(&params, s, &u);
            let engine = fishing::adjoint_gradients(&params, s, &u).unwrap();
            assert!(closed.objective_grad == engine.objective_grad, "objective gradient, T = {steps}");
            assert!(closed.constraint_grad == engine.constraint_grad, "constraint gradient, T = {steps}");
            assert_eq!(closed.constraint, engine.constraint);
        }
    }
}

#[test]
fn fishing_closed_form_by_hand_at_fixed_point() {
    // x_0 = K keeps x_t = K when u ≡ 0; with d = 0 the profit derivative is Δt(p K − c) at
    // the last step and picks up a_t Δt K from the future stock earlier on.
    let params = FishingParams { steps: 2, horizon_time: 1.0, u_max: 1.0, x_des: 1.5 };
    let s = fishing::FishingScenario::constant_prices(1.0, 2.0, 2.0, [2.0, 0.0, 1.5], 2);
    let g = fishing::gradients(&params, &s, &[0.0, 0.0]);
    let dt = 0.5;
    // a_0 = Δt p u_1 = 0, so both steps give −Δt (p K − c).
    assert_eq!(g.objective_grad, vec![-(dt * (2.0 * 2.0 - 1.5)); 2]);
    // b_1 = 1, b_0 = J_1 = 1 + Δt (r − 2 r x/K) = 0.5.
    assert_eq!(g.constraint_grad, vec![0.5 * (dt * 2.0), dt * 2.0]);
}

#[test]
fn engine_transition_products_match_finite_differences() {
    let params = FishingParams::new(10);
    let set = sample_fishing(&params, &FishingDistribution::default(), 3, 1).unwrap();
    let sys = FishingSystem { params: &params, scenario: set.get(0) };
    let (u, x) = (0.4, 1.3);
    let mut out = [0.0];
    sys.vjp_state(0, &[u], &[x], StepEvent::Smooth, &[1.0], &mut out);
    let step = |u: f64, x: f64| {
        let mut n = [0.0];
        sys.transition(0, &[u], &[x], &mut n);
        n[0]
    };
    assert!((out[0] - (step(u, x + 1e-6) - step(u, x - 1e-6)) / 2e-6).abs() < 1e-6);
    sys.vjp_control(0, &[u], &[x], StepEvent::Smooth, &[1.0], &mut out);
    assert!((out[0] - (step(u + 1e-6, x) - step(u - 1e-6, x)) / 2e-6).abs() < 1e-6);

    let sp = SeparatorParams::<f64>::default();
    let pair = sample_separator::<f64>(&SeparatorDistribution::default(), 1, 2).unwrap();
    let psys = ParticleSystem { params: &sp, particle: &pair.get(0).positive };
    let ctrl = [2.0, -0.15, 0.2];
    let state = [0.01, 0.3, 0.4, 2.5];
    let next = |c: &[f64], s: &[f64]| {
        let mut n = [0.0; 4];
        psys.transition(0, c, s, &mut n);
        n
    };
    for row in 0..4 {
        let mut seed = [0.0; 4];
        seed[row] = 1.0;
        let mut vs = [0.0; 4];
        let mut vc = [0.0; 3];
        psys.vjp_state(0, &ctrl, &state, StepEvent::Smooth, &seed, &mut vs);
        psys.vjp_control(0, &ctrl, &state, StepEvent::Smooth, &seed, &mut vc);
        let fd_s = central_diff(|s| next(&ctrl, s)[row], &state, 1e-7);
        let fd_c = central_diff(|c| next(c, &state)[row], &ctrl, 1e-7);
        assert!(rel_err(&vs, &fd_s, 1.0) < 1e-6, "state row {row}");
        assert!(rel_err(&vc, &fd_c, 1.0) < 1e-6, "control row {row}");
    }
}

/// `α f¹ + β f²` from two fishing scenarios sharing the dynamics of the first.
struct Mix<'a> {
    a: FishingSystem<'a, f64>,
    b: FishingSystem<'a, f64>,
    alpha: f64,
    beta: f64,
}

impl StageCost<f64> for Mix<'_> {
    fn value(&self, t: usize, u: &[f64], x: &[f64]) -> f64 {
        self.alpha * self.a.value(t, u, x) + self.beta * self.b.value(t, u, x)
    }
    fn grad(&self, t: usize, u: &[f64], x: &[f64], gx: &mut [f64], gu: &mut [f64]) {
        let (mut ax, mut au, mut bx, mut bu) = ([0.0], [0.0], [0.0], [0.0]);
        self.a.grad(t, u, x, &mut ax, &mut au);
        self.b.grad(t, u, x, &mut bx, &mut bu);
        gx[0] = self.alpha * ax[0] + self.beta * bx[0];
        gu[0] = self.alpha * au[0] + self.beta * bu[0];
    }
}

#[test]
fn adjoint_is_linear_in_the_stage_cost_and_counts_one_sweep() {
    let params = FishingParams::new(30);
    let set = sample_fishing(&params, &FishingDistribution::default(), 2, 8).unwrap();
    let sa = FishingSystem { params: &params, scenario: set.get(0) };
    // Same dynamics as the first scenario, prices of the second.
    let mut other = set.get(0).clone();
    other.price = set.get(1).price.clone();
    other.quad_cost = set.get(1).quad_cost.clone();
    other.linear_cost = set.get(1).linear_cost.clone();
    let sb = FishingSystem { params: &params, scenario: &other };
    let u: Vec<f64> = (0..30).map(|t| 0.5 + 0.4 * ((t as f64) * 0.7).sin()).collect();
    let c = Controls::PerStep(&u);
    let traj = forward_sweep(&sa, c).unwrap();
    assert_eq!(traj.transition_count(), 30);
    let ga = grad_stage_sum(&sa, &sa, c, &traj).unwrap();
    let gb = grad_stage_sum(&sa, &sb, c, &traj).unwrap();
    assert_eq!(ga.jacobian_applications, 30);
    let mix = Mix { a: FishingSystem { params: &params, scenario: set.get(0) }, b: sb, alpha: 2.5, beta: -0.75 };
    let gm = grad_stage_sum(&sa, &mix, c, &traj).unwrap();
    let combo: Vec<f64> = ga.gradient.iter().zip(&gb.gradient).map(|(a, b)| 2.5 * a - 0.75 * b).collect();
    assert!(rel_err(&gm.gradient, &combo, 1e-12) < 1e-13);
}

fn bounce_free(params: &SeparatorParams<f64>, s: &ccsgd::apps::separator::SeparatorScenario<f64>, x: &[f64], h: f64) -> bool {
    let base = match evaluate_pair(params, s, x) {
        Ok(r) => r,
        Err(_) => return false,
    };
    if base.2.bounces + base.3.bounces > 0 {
        return false;
    }
    for i in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut y = x.to_vec();
            y[i] += sign * h;
            match evaluate_pair(params, s, &y) {
                Ok(r) if r.1 == base.1 && r.2.steps == base.2.steps && r.3.steps == base.3.steps => {
                    if r.2.bounces + r.3.bounces > 0 {
                        return false;
                    }
                }
                _ => return false,
            }
        }
    }
    true
}

#[test]
fn separator_gradients_match_finite_differences_away_from_events() {
    let params = SeparatorParams::<f64>::default();
    let set = sample_separator::<f64>(&SeparatorDistribution::default(), 200, 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut checked = 0;
    let h = 1e-6;
    for s in set.iter() {
        if checked == 10 {
            break;
        }
        let x = [rng.random_range(0.5..4.0), rng.random_range(-0.3..-0.1), rng.random_range(0.1..0.3)];
        if !bounce_free(&params, s, &x, h) {
            continue;
        }
        let (_, grad) = constraint_and_gradient(&params, s, &x).unwrap();
        let fd = central_diff(|y| evaluate_pair(&params, s, y).unwrap().0, &x, h);
        assert!(rel_err(&grad, &fd, 1e-8) < 1e-4, "{grad:?} vs {fd:?}");
        checked += 1;
    }
    assert_eq!(checked, 10);
}

#[test]
fn separator_bounce_rule_matches_small_differences() {
    // A particle that bounces once: the sign-flip adjoint is checked against a difference
    // quotient small enough not to move the bounce to another step.
    let params = SeparatorParams::<f64>::default();
    let p = ccsgd::apps::separator::Particle { mass: 6e-6, charge: 8e-11, sx: 0.04, sy: 0.0, vx: 0.0, vy: 0.0 };
    let s = ccsgd::apps::separator::SeparatorScenario { positive: p, negative: ccsgd::apps::separator::Particle { charge: -8e-11, ..p } };
    let x = [6.0, -0.3, 0.07];
    let (_, _, pos, _) = evaluate_pair(&params, &s, &x).unwrap();
    assert!(pos.bounces > 0);
    let land = ccsgd::apps::separator::landing_gradient(&params, &s.positive, &x, &pos).unwrap();
    let h = 1e-9;
    let sx = |y: &[f64]| ccsgd::apps::separator::simulate_particle(&params, &s.positive, y).unwrap().sx;
    let fd = central_diff(sx, &x, h);
    assert!(rel_err(&land, &fd, 1e-6) < 1e-3, "{land:?} vs {fd:?}");
}

/// All serviceability terms by direct enumeration.
fn enumerate_terms(net: &GasNetwork<f64>, p: &[f64], p0_max: f64, h: &[f64]) -> (f64, ActiveTerm) {
    let n = h.len();
    let mut best = (f64::NEG_INFINITY, ActiveTerm::EntryMin { i: 0 });
    for i in 0..n {
        let v = net.p0_min * net.p0_min - p[i] * p[i] - h[i];
        if v > best.0 {
            best = (v, ActiveTerm::EntryMin { i });
        }
    }
    for i in 0..n {
        let v = net.p_min[i] * net.p_min[i] + h[i] - p0_max * p0_max;
        if v > best.0 {
            best = (v, ActiveTerm::EntryMax { i });
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = net.p_min[j] * net.p_min[j] + h[j] - p[i] * p[i] - h[i];
            if v > best.0 {
                best = (v, ActiveTerm::Pair { i, j });
            }
        }
    }
    best
}

/// `h_i` by walking each node's path and summing every descendant's demand per edge.
fn naive_potentials(net: &GasNetwork<f64>, demand: &[f64]) -> Vec<f64> {
    let n = net.exits();
    let below = |e: usize, j: usize| {
        let mut v = j;
        loop {
            if v == e {
                return true;
            }
            if v == 0 {
                return false;
            }
            v = net.parent_of(v);
        }
    };
    (1..=n)
        .map(|i| {
            let mut h = 0.0;
            let mut v = i;
            while v != 0 {
                let load: f64 = (1..=n).filter(|&j| below(v, j)).map(|j| demand[j - 1]).sum();
                h += net.phi[v - 1] * load * load;
                v = net.parent_of(v);
            }
            h
        })
        .collect()
}

#[test]
fn gas_potentials_equal_path_recomputation_on_random_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..40 {
        let exits = rng.random_range(1..50);
        let spec = SyntheticGasSpec { exits, topology_seed: trial, ..Default::default() };
        let (net, _) = build_synthetic_network::<f64>(&spec).unwrap();
        // Integer data keeps every sum exact regardless of order.
        let phi: Vec<f64> = (0..exits).map(|_| f64::from(rng.random_range(1..5))).collect();
        let net = GasNetwork::new(net.parent.clone(), phi, net.p_min.clone(), 1.0, 10.0).unwrap();
        let demand: Vec<f64> = (0..exits).map(|_| f64::from(rng.random_range(0..6))).collect();
        assert_eq!(net.potentials(&demand), naive_potentials(&net, &demand));
    }
}

#[test]
fn gas_constraint_equals_enumerated_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..200 {
        let exits = rng.random_range(1..15);
        let spec = SyntheticGasSpec { exits, topology_seed: trial, ..Default::default() };
        let (net, law) = build_synthetic_network::<f64>(&spec).unwrap();
        let demand = law.sample::<f64>(1, trial).unwrap().get(0).clone();
        let mut x: Vec<f64> = (0..=exits).map(|_| rng.random_range(1.0..2.0)).collect();
        if trial % 3 == 0 {
            // Coarse values to provoke ties.
            x.iter_mut().for_each(|v| *v = (*v * 2.0).round() / 2.0);
        }
        let model = GasModel { network: net.clone(), layout: GasDecision::ExitsAndEntry };
        let h = net.potentials(&demand);
        let got = model.evaluate(&x, &demand);
        let want = enumerate_terms(&net, &x[..exits], x[exits], &h);
        assert_eq!(got, want, "trial {trial}");
    }
}

#[test]
fn gas_subgradients_match_finite_differences_off_ties() {
    let (net, law) = build_synthetic_network::<f64>(&SyntheticGasSpec::default()).unwrap();
    let model = GasModel { network: net.clone(), layout: GasDecision::ExitsAndEntry };
    let demands = law.sample::<f64>(200, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for d in demands.iter() {
        if checked == 10 {
            break;
        }
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(1.0..1.6)).collect();
        // Skip points where the runner-up term is within reach of the perturbation.
        let h = net.potentials(d);
        let (top, _) = model.evaluate(&x, d);
        let mut values = Vec::new();
        for i in 0..11 {
            values.push(1.0 - x[i] * x[i] - h[i]);
            values.push(1.0 + h[i] - x[11] * x[11]);
            for j in 0..11 {
                if i != j {
                    values.push(1.0 + h[j] - x[i] * x[i] - h[i]);
                }
            }
        }
        values.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(values[0], top);
        if values[0] - values[1] < 1e-4 {
            continue;
        }
        let mut grad = vec![0.0; 12];
        model.constraint_grad(&x, d, &mut grad);
        let fd = central_diff(|y| model.constraint(y, d), &x, 1e-6);
        assert!(rel_err(&grad, &fd, 1e-8) < 1e-5);
        checked += 1;
    }
    assert_eq!(checked, 10);
}
