//! Chance-constrained problems over a finite scenario set.
//!
//! A problem is `minimize (1/S) Σ f(x, ξ_i)` subject to `x ∈ X` and the requirement that
//! `g(x, ξ_i) ≤ 0` holds for at least a `1 − ε` fraction of the scenarios. The solver works
//! on the penalized form `(1/S) Σ f(x, ξ_i) + λ φ(q(x))` where `q(x)` is the empirical
//! `(1 − ε)`-quantile of the constraint values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Penalty applied to the constraint quantile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyFunction {
    /// `φ(z) = ½ max{z, 0}²`.
    #[default]
    QuadraticHinge,
}

impl PenaltyFunction {
    pub fn value<T: Scalar>(self, z: T) -> Result<T> {
        check_finite(z, "penalty argument")?;
        Ok(self.value_unchecked(z))
    }

    /// Derivative `φ′(z) = max{z, 0}`. At the kink `z = 0` the subgradient element 0 is used.
    pub fn derivative<T: Scalar>(self, z: T) -> Result<T> {
        check_finite(z, "penalty argument")?;
        Ok(self.derivative_unchecked(z))
    }

    #[inline]
    pub(crate) fn value_unchecked<T: Scalar>(self, z: T) -> T {
        match self {
            PenaltyFunction::QuadraticHinge => {
                let p = z.max(T::zero());
                T::lit(0.5) * p * p
            }
        }
    }

    #[inline]
    pub(crate) fn derivative_unchecked<T: Scalar>(self, z: T) -> T {
        match self {
            PenaltyFunction::QuadraticHinge => z.max(T::zero()),
        }
    }
}

/// `φ(z) = ½ max{z,0}²`.
pub fn penalty_value<T: Scalar>(z: T) -> Result<T> {
    PenaltyFunction::QuadraticHinge.value(z)
}

/// `φ′(z) = max{z,0}`, with `φ′(0) = 0`.
pub fn penalty_derivative<T: Scalar>(z: T) -> Result<T> {
    PenaltyFunction::QuadraticHinge.derivative(z)
}

fn check_finite<T: Scalar>(z: T, what: &str) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be finite, got {z}")))
    }
}

/// Axis-aligned box `{x : lower ≤ x ≤ upper}`. Infinite bounds mean "no bound".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet<T> {
    lower: Vec<T>,
    upper: Vec<T>,
}

impl<T: Scalar> BoxSet<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Contract(format!(
                "box bounds have different dimensions ({} vs {})",
                lower.len(),
                upper.len()
            )));
        }
        for (j, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::Contract(format!(
                    "invalid bounds at coordinate {j}: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The same interval `[lo, hi]` on every coordinate.
    pub fn uniform(dim: usize, lo: T, hi: T) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![T::neg_infinity(); dim],
            upper: vec![T::infinity(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn contains(&self, x: &[T]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Euclidean projection onto the box (coordinate-wise clamp).
    pub fn project(&self, y: &[T]) -> Result<Vec<T>> {
        let mut out = y.to_vec();
        self.project_in_place(&mut out)?;
        Ok(out)
    }

    pub fn project_in_place(&self, y: &mut [T]) -> Result<()> {
        if y.len() != self.dim() {
            return Err(Error::Contract(format!(
                "projection of a {}-vector onto a {}-dimensional box",
                y.len(),
                self.dim()
            )));
        }
        for (v, (lo, hi)) in y.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = hi.min(lo.max(*v));
        }
        Ok(())
    }
}

/// Free-function form of [`BoxSet::project`].
pub fn project_box<T: Scalar>(y: &[T], feasible: &BoxSet<T>) -> Result<Vec<T>> {
    feasible.project(y)
}

/// Anything with a fixed length when viewed as a random vector `ξ`.
pub trait ScenarioDim {
    fn scenario_dim(&self) -> usize;
}

impl<T> ScenarioDim for Vec<T> {
    fn scenario_dim(&self) -> usize {
        self.len()
    }
}

/// The finite sample `{ξ_1, …, ξ_S}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet<S> {
    scenarios: Vec<S>,
}

impl<S: ScenarioDim> ScenarioSet<S> {
    pub fn new(scenarios: Vec<S>) -> Result<Self> {
        let Some(first) = scenarios.first() else {
            return Err(Error::Contract("scenario set must not be empty".into()));
        };
        let dim = first.scenario_dim();
        if let Some(i) = scenarios.iter().position(|s| s.scenario_dim() != dim) {
            return Err(Error::Contract(format!(
                "scenario {i} has dimension {} but scenario 0 has {dim}",
                scenarios[i].scenario_dim()
            )));
        }
        Ok(Self { scenarios })
    }

    pub fn scenario_dim(&self) -> usize {
        self.scenarios[0].scenario_dim()
    }
}

impl<S> ScenarioSet<S> {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn get(&self, i: usize) -> &S {
        &self.scenarios[i]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.scenarios
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.scenarios.iter()
    }

    pub fn into_inner(self) -> Vec<S> {
        self.scenarios
    }

    /// Renames scenarios so that the new scenario `i` is the old scenario `theta[i]`.
    pub fn relabel(&mut self, theta: &[usize]) -> Result<()>
    where
        S: Clone,
    {
        check_permutation(theta, self.len())?;
        let old = self.scenarios.clone();
        for (slot, &src) in self.scenarios.iter_mut().zip(theta) {
            *slot = old[src].clone();
        }
        Ok(())
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Contract(format!(
            "permutation has length {} but {n} was expected",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Contract(format!(
                "not a permutation of 0..{n}: entry {p} out of range or repeated"
            )));
        }
    }
    Ok(())
}

/// Index-based view of a chance-constrained problem, as consumed by the solvers.
///
/// Evaluators must be pure functions of `(x, i)`: the solver may call them for different
/// scenarios concurrently.
pub trait ChanceProblem<T: Scalar>: Sync {
    fn dim(&self) -> usize;
    fn scenario_count(&self) -> usize;
    fn feasible_set(&self) -> &BoxSet<T>;
    /// Failure tolerance ε.
    fn epsilon(&self) -> f64;

    fn objective(&self, x: &[T], i: usize) -> T;
    /// Writes `∇ₓ f(x, ξ_i)` into `grad` and returns `f(x, ξ_i)`.
    fn objective_grad(&self, x: &[T], i: usize, grad: &mut [T]) -> T;
    fn constraint(&self, x: &[T], i: usize) -> T;
    /// Writes a (sub)gradient `∇ₓ g(x, ξ_i)` into `grad` and returns `g(x, ξ_i)`.
    fn constraint_grad(&self, x: &[T], i: usize, grad: &mut [T]) -> T;
}

/// Per-scenario model: how `f` and `g` depend on one scenario.
pub trait ScenarioModel<T: Scalar>: Sync {
    type Scenario: Sync;

    fn dim(&self) -> usize;
    fn objective(&self, x: &[T], s: &Self::Scenario) -> T;
    fn objective_grad(&self, x: &[T], s: &Self::Scenario, grad: &mut [T]) -> T;
    fn constraint(&self, x: &[T], s: &Self::Scenario) -> T;
    fn constraint_grad(&self, x: &[T], s: &Self::Scenario, grad: &mut [T]) -> T;
}

/// A [`ScenarioModel`] bound to a scenario set, a box and a tolerance.
#[derive(Debug, Clone)]
pub struct ProblemInstance<T: Scalar, M: ScenarioModel<T>> {
    model: M,
    scenarios: ScenarioSet<M::Scenario>,
    feasible_set: BoxSet<T>,
    epsilon: f64,
}

impl<T: Scalar, M: ScenarioModel<T>> ProblemInstance<T, M> {
    pub fn new(
        model: M,
        scenarios: ScenarioSet<M::Scenario>,
        feasible_set: BoxSet<T>,
        epsilon: f64,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Domain(format!("ε must lie in (0, 1), got {epsilon}")));
        }
        if feasible_set.dim() != model.dim() {
            return Err(Error::Contract(format!(
                "feasible set has dimension {} but the model has {}",
                feasible_set.dim(),
                model.dim()
            )));
        }
        Ok(Self {
            model,
            scenarios,
            feasible_set,
            epsilon,
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn scenarios(&self) -> &ScenarioSet<M::Scenario> {
        &self.scenarios
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Domain(format!("ε must lie in (0, 1), got {epsilon}")));
        }
        self.epsilon = epsilon;
        Ok(self)
    }
}

impl<T: Scalar, M: ScenarioModel<T>> ChanceProblem<T> for ProblemInstance<T, M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn scenario_count(&self) -> usize {
        self.scenarios.len()
    }

    fn feasible_set(&self) -> &BoxSet<T> {
        &self.feasible_set
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn objective(&self, x: &[T], i: usize) -> T {
        self.model.objective(x, self.scenarios.get(i))
    }

    fn objective_grad(&self, x: &[T], i: usize, grad: &mut [T]) -> T {
        self.model.objective_grad(x, self.scenarios.get(i), grad)
    }

    fn constraint(&self, x: &[T], i: usize) -> T {
        self.model.constraint(x, self.scenarios.get(i))
    }

    fn constraint_grad(&self, x: &[T], i: usize, grad: &mut [T]) -> T {
        self.model.constraint_grad(x, self.scenarios.get(i), grad)
    }
}

/// Fraction of scenarios with `g(x, ξ_i) > 0`.
pub fn empirical_failure_level<T: Scalar, P: ChanceProblem<T> + ?Sized>(x: &[T], problem: &P) -> f64 {
    let s = problem.scenario_count();
    let violated = (0..s).filter(|&i| problem.constraint(x, i) > T::zero()).count();
    violated as f64 / s as f64
}

/// `(1/S) Σ f(x, ξ_i)`.
pub fn mean_objective<T: Scalar, P: ChanceProblem<T> + ?Sized>(x: &[T], problem: &P) -> T {
    let values: Vec<T> = (0..problem.scenario_count())
        .map(|i| problem.objective(x, i))
        .collect();
    crate::scalar::pairwise_sum(&values) / T::from_usize_lossy(values.len())
}
