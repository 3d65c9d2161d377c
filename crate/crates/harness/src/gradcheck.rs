//! Central-difference audit of the analytic scenario gradients at random feasible points.

use ccsgd::apps::fishing::{adjoint_gradients, gradients};
use ccsgd::apps::separator::evaluate_pair;
use ccsgd::ChanceProblem;
use rand::Rng;

use crate::experiment::{stream_rng, Instance, RunError};

pub const GRADCHECK_STREAM: u64 = 3;

/// Relative tolerance for each application. The particle simulation is a long explicit
/// integration, so its differences carry more rounding.
pub fn default_tolerance(instance: &Instance) -> f64 {
    match instance {
        Instance::Separator { .. } => 1e-4,
        _ => 1e-5,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Function {
    Objective,
    Constraint,
}

impl Function {
    pub fn name(self) -> &'static str {
        match self {
            Function::Objective => "objective",
            Function::Constraint => "constraint",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub point: usize,
    pub scenario: usize,
    pub function: Function,
    /// `None` when the point sits near a kink (active-term switch, bounce, or a change in the
    /// landing step) and differences are meaningless.
    pub rel_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CheckSummary {
    pub rows: Vec<CheckRow>,
    pub tolerance: f64,
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Scenarios where the hand-derived fishing gradients differ from the adjoint engine in
    /// any bit.
    pub engine_mismatches: usize,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst <= self.tolerance && self.engine_mismatches == 0
    }
}

/// `max |a − b| / max(max |b|, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|v| v.abs()).fold(floor, f64::max);
    num / den
}

pub fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = fd_step(x[j]);
            y[j] = x[j] + h;
            let up = f(&y);
            y[j] = x[j] - h;
            let down = f(&y);
            y[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Whether every perturbation used by [`central_difference`] stays on the same smooth piece.
pub fn smooth_neighborhood(instance: &Instance, x: &[f64], i: usize) -> bool {
    let perturbed = |f: &dyn Fn(&[f64]) -> Option<String>| {
        let base = f(x);
        base.is_some()
            && (0..x.len()).all(|j| {
                [1.0, -1.0].iter().all(|sgn| {
                    let mut y = x.to_vec();
                    y[j] += sgn * fd_step(x[j]);
                    f(&y) == base
                })
            })
    };
    match instance {
        Instance::Fishing { .. } => true,
        Instance::Gas { problem, .. } => {
            let s = problem.scenarios().get(i);
            perturbed(&|y| Some(format!("{:?}", problem.model().evaluate(y, s).1)))
        }
        Instance::Separator { problem, .. } => {
            let s = problem.scenarios().get(i);
            let params = &problem.model().params;
            perturbed(&|y| {
                let (_, active, pos, neg) = evaluate_pair(params, s, y).ok()?;
                (pos.bounces == 0 && neg.bounces == 0)
                    .then(|| format!("{active:?} {} {}", pos.steps, neg.steps))
            })
        }
    }
}

/// Uniform point in the feasible box; unbounded coordinates are drawn within `span` of the
/// lower bound.
pub fn random_point<R: Rng>(problem: &dyn ChanceProblem<f64>, span: f64, rng: &mut R) -> Vec<f64> {
    let b = problem.feasible_set();
    b.lower()
        .iter()
        .zip(b.upper())
        .map(|(&lo, &hi)| {
            let (lo, hi) = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => (lo, hi),
                (true, false) => (lo, lo + span),
                (false, true) => (hi - span, hi),
                (false, false) => (-span, span),
            };
            rng.random_range(lo..=hi)
        })
        .collect()
}

pub fn gradcheck(
    instance: &Instance,
    points: usize,
    per_point: usize,
    seed: u64,
    tolerance: f64,
) -> Result<CheckSummary, RunError> {
    let problem = instance.problem();
    let n = problem.dim();
    let s = problem.scenario_count();
    let mut rng = stream_rng(seed, GRADCHECK_STREAM);
    let mut rows = Vec::new();
    let mut engine_mismatches = 0;
    for point in 0..points {
        let x = random_point(problem, 2.0, &mut rng);
        for _ in 0..per_point {
            let i = rng.random_range(0..s);
            if let Instance::Fishing { problem, .. } = instance {
                let params = &problem.model().params;
                let sc = problem.scenarios().get(i);
                let closed = gradients(params, sc, &x);
                let engine = adjoint_gradients(params, sc, &x).map_err(RunError::Solver)?;
                if closed != engine {
                    engine_mismatches += 1;
                }
            }
            let smooth = smooth_neighborhood(instance, &x, i);
            for function in [Function::Objective, Function::Constraint] {
                let rel_error = smooth.then(|| {
                    let mut g = vec![0.0; n];
                    let fd = match function {
                        Function::Objective => {
                            problem.objective_grad(&x, i, &mut g);
                            central_difference(|y| problem.objective(y, i), &x)
                        }
                        Function::Constraint => {
                            problem.constraint_grad(&x, i, &mut g);
                            central_difference(|y| problem.constraint(y, i), &x)
                        }
                    };
                    relative_error(&g, &fd, 1e-8)
                });
                rows.push(CheckRow { point, scenario: i, function, rel_error });
            }
        }
    }
    let checked = rows.iter().filter(|r| r.rel_error.is_some()).count();
    let worst = rows.iter().filter_map(|r| r.rel_error).fold(0.0, f64::max);
    Ok(CheckSummary {
        skipped: rows.len() - checked,
        rows,
        tolerance,
        worst,
        checked,
        engine_mismatches,
    })
}
