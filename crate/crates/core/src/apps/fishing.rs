//! Harvest control of a logistic fish population with random growth, capacity, initial
//! stock and random-walk prices.
//!
//! Stock dynamics (forward Euler on `[0, horizon_time]` with `steps` steps):
//! `x_{t+1} = x_t + Δt (r x_t − (r/K) x_t² − u_t x_t)`. The library minimizes the negated
//! profit `−Δt Σ_t (p_t u_t x_t − d_t u_t² x_t² − c_t u_t)` subject to `x_des − x_T ≤ 0` holding
//! with probability `1 − ε`, over fishing rates `u_t ∈ [0, u_max]`.

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::adjoint::{self, ControlledSystem, Controls, StageCost, StepEvent};
use crate::apps::ScenarioRecord;
use crate::error::{Error, Result};
use crate::problem::{BoxSet, ProblemInstance, ScenarioDim, ScenarioModel, ScenarioSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(serialize = "", deserialize = ""))]
pub struct FishingParams<T: Scalar> {
    /// Number of Euler steps, equal to the number of controls.
    pub steps: usize,
    pub horizon_time: T,
    pub u_max: T,
    /// Required terminal stock.
    pub x_des: T,
}

impl<T: Scalar> Default for FishingParams<T> {
    fn default() -> Self {
        Self::new(100)
    }
}

impl<T: Scalar> FishingParams<T> {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            horizon_time: T::lit(10.0),
            u_max: T::one(),
            x_des: T::lit(1.5),
        }
    }

    pub fn dt(&self) -> T {
        self.horizon_time / T::from_usize_lossy(self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Domain("fishing needs at least one step".into()));
        }
        if !(self.horizon_time > T::zero() && self.u_max > T::zero()) || !self.x_des.is_finite() {
            return Err(Error::Domain("fishing horizon and u_max must be positive".into()));
        }
        Ok(())
    }

    pub fn feasible_set(&self) -> Result<BoxSet<T>> {
        BoxSet::uniform(self.steps, T::zero(), self.u_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "", deserialize = ""))]
pub struct FishingScenario<T: Scalar> {
    pub growth_rate: T,
    pub capacity: T,
    pub initial_stock: T,
    /// Selling price `p_t`, one per step.
    pub price: Vec<T>,
    /// Quadratic cost coefficient `d_t`.
    pub quad_cost: Vec<T>,
    /// Linear cost `c_t`.
    pub linear_cost: Vec<T>,
}

impl<T: Scalar> FishingScenario<T> {
    /// Scenario with constant prices over `steps` steps.
    pub fn constant_prices(r: T, k: T, x0: T, pdc: [T; 3], steps: usize) -> Self {
        Self {
            growth_rate: r,
            capacity: k,
            initial_stock: x0,
            price: vec![pdc[0]; steps],
            quad_cost: vec![pdc[1]; steps],
            linear_cost: vec![pdc[2]; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.price.len()
    }

    /// Copy with the price paths replaced by constant paths at `pdc`.
    pub fn with_constant_prices(&self, pdc: [T; 3]) -> Self {
        Self::constant_prices(self.growth_rate, self.capacity, self.initial_stock, pdc, self.steps())
    }
}

impl<T: Scalar> ScenarioDim for FishingScenario<T> {
    fn scenario_dim(&self) -> usize {
        3 + 3 * self.steps()
    }
}

impl<T: Scalar> ScenarioRecord for FishingScenario<T> {
    fn field_names(&self) -> Vec<String> {
        let mut names = vec!["r".to_string(), "K".to_string(), "x0".to_string()];
        for prefix in ["p", "d", "c"] {
            names.extend((0..self.steps()).map(|t| format!("{prefix}{t}")));
        }
        names
    }

    fn to_row(&self) -> Vec<f64> {
        let mut row = vec![self.growth_rate.as_f64(), self.capacity.as_f64(), self.initial_stock.as_f64()];
        for path in [&self.price, &self.quad_cost, &self.linear_cost] {
            row.extend(path.iter().map(|v| v.as_f64()));
        }
        row
    }
}

/// `x + Δt (r x − (r/K) x² − u x)`.
#[inline]
pub fn stock_step<T: Scalar>(dt: T, r: T, k: T, u: T, x: T) -> T {
    x + dt * (r * x - r / k * x * x - u * x)
}

/// `∂x_{t+1}/∂x_t = 1 + Δt (r − 2 (r/K) x − u)`.
#[inline]
pub fn stock_jacobian<T: Scalar>(dt: T, r: T, k: T, u: T, x: T) -> T {
    T::one() + dt * (r - T::lit(2.0) * (r / k) * x - u)
}

/// `∂x_{t+1}/∂u_t = −Δt x`.
#[inline]
pub fn control_jacobian<T: Scalar>(dt: T, x: T) -> T {
    -(dt * x)
}

/// Profit rate `p u x − d u² x² − c u`.
#[inline]
pub fn profit_rate<T: Scalar>(p: T, d: T, c: T, u: T, x: T) -> T {
    p * u * x - d * u * u * x * x - c * u
}

/// `∂/∂u` of the profit rate: `p x − 2 d u x² − c`.
#[inline]
pub fn profit_rate_du<T: Scalar>(p: T, d: T, c: T, u: T, x: T) -> T {
    p * x - T::lit(2.0) * d * u * x * x - c
}

/// `∂/∂x` of the profit rate: `p u − 2 d u² x`.
#[inline]
pub fn profit_rate_dx<T: Scalar>(p: T, d: T, u: T, x: T) -> T {
    p * u - T::lit(2.0) * d * u * u * x
}

/// Stock trajectory `x_0 … x_T`. Negative stock is allowed to evolve.
pub fn simulate<T: Scalar>(params: &FishingParams<T>, s: &FishingScenario<T>, u: &[T]) -> Vec<T> {
    let dt = params.dt();
    let mut x = Vec::with_capacity(u.len() + 1);
    x.push(s.initial_stock);
    for (t, &ut) in u.iter().enumerate() {
        x.push(stock_step(dt, s.growth_rate, s.capacity, ut, x[t]));
    }
    x
}

/// Negated profit along a given trajectory.
fn objective_on<T: Scalar>(dt: T, s: &FishingScenario<T>, u: &[T], x: &[T]) -> T {
    let mut total = T::zero();
    for t in 0..u.len() {
        total += -(dt * profit_rate(s.price[t], s.quad_cost[t], s.linear_cost[t], u[t], x[t]));
    }
    total
}

/// `−Δt Σ (p u x − d u² x² − c u)`.
pub fn objective<T: Scalar>(params: &FishingParams<T>, s: &FishingScenario<T>, u: &[T]) -> T {
    let x = simulate(params, s, u);
    objective_on(params.dt(), s, u, &x)
}

/// `x_des − x_T`.
pub fn constraint<T: Scalar>(params: &FishingParams<T>, s: &FishingScenario<T>, u: &[T]) -> T {
    let x = simulate(params, s, u);
    params.x_des - x[u.len()]
}

/// Values and control gradients of the objective and the constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct FishingGradients<T> {
    pub objective: T,
    pub objective_grad: Vec<T>,
    pub constraint: T,
    pub constraint_grad: Vec<T>,
}

/// Hand-derived backward recurrences for this model.
///
/// Profit: `∂/∂u_t = Δt (p_t x_t − 2 d_t u_t x_t² − c_t) − a_t Δt x_t` with `a_{T−1} = 0` and
/// `a_t = a_{t+1} J_{t+1} + Δt (p_{t+1} u_{t+1} − 2 d_{t+1} u_{t+1}² x_{t+1})`, where `J_t` is
/// the stock Jacobian. Terminal stock: `∂x_T/∂u_t = −b_t Δt x_t` with `b_{T−1} = 1`,
/// `b_t = b_{t+1} J_{t+1}`. Signs are then flipped to the library's minimization form.
pub fn gradients<T: Scalar>(params: &FishingParams<T>, s: &FishingScenario<T>, u: &[T]) -> FishingGradients<T> {
    let dt = params.dt();
    let n = u.len();
    let x = simulate(params, s, u);
    let (r, k) = (s.growth_rate, s.capacity);
    let mut objective_grad = vec![T::zero(); n];
    let mut constraint_grad = vec![T::zero(); n];
    let mut a = T::zero();
    let mut b = T::one();
    for t in (0..n).rev() {
        if t + 1 < n {
            let jac = stock_jacobian(dt, r, k, u[t + 1], x[t + 1]);
            a = a * jac + dt * profit_rate_dx(s.price[t + 1], s.quad_cost[t + 1], u[t + 1], x[t + 1]);
            b *= jac;
        }
        let du = dt * profit_rate_du(s.price[t], s.quad_cost[t], s.linear_cost[t], u[t], x[t]);
        objective_grad[t] = -(du - a * (dt * x[t]));
        constraint_grad[t] = b * (dt * x[t]);
    }
    FishingGradients {
        objective: objective_on(dt, s, u, &x),
        objective_grad,
        constraint: params.x_des - x[n],
        constraint_grad,
    }
}

/// The stock dynamics of one scenario as a [`ControlledSystem`]; its [`StageCost`] is the
/// negated profit.
pub struct FishingSystem<'a, T: Scalar> {
    pub params: &'a FishingParams<T>,
    pub scenario: &'a FishingScenario<T>,
}

impl<T: Scalar> ControlledSystem<T> for FishingSystem<'_, T> {
    fn horizon(&self) -> usize {
        self.params.steps
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn initial_state(&self, x0: &mut [T]) {
        x0[0] = self.scenario.initial_stock;
    }
    fn transition(&self, _t: usize, u: &[T], x: &[T], next: &mut [T]) -> StepEvent {
        let s = self.scenario;
        next[0] = stock_step(self.params.dt(), s.growth_rate, s.capacity, u[0], x[0]);
        StepEvent::Smooth
    }
    fn vjp_state(&self, _t: usize, u: &[T], x: &[T], _e: StepEvent, lambda: &[T], out: &mut [T]) {
        let s = self.scenario;
        out[0] = lambda[0] * stock_jacobian(self.params.dt(), s.growth_rate, s.capacity, u[0], x[0]);
    }
    fn vjp_control(&self, _t: usize, _u: &[T], x: &[T], _e: StepEvent, lambda: &[T], out: &mut [T]) {
        out[0] = lambda[0] * control_jacobian(self.params.dt(), x[0]);
    }
}

impl<T: Scalar> StageCost<T> for FishingSystem<'_, T> {
    fn value(&self, t: usize, u: &[T], x: &[T]) -> T {
        let s = self.scenario;
        -(self.params.dt() * profit_rate(s.price[t], s.quad_cost[t], s.linear_cost[t], u[0], x[0]))
    }
    fn grad(&self, t: usize, u: &[T], x: &[T], grad_x: &mut [T], grad_u: &mut [T]) {
        let s = self.scenario;
        let dt = self.params.dt();
        grad_x[0] = -(dt * profit_rate_dx(s.price[t], s.quad_cost[t], u[0], x[0]));
        grad_u[0] = -(dt * profit_rate_du(s.price[t], s.quad_cost[t], s.linear_cost[t], u[0], x[0]));
    }
}

/// Same quantities as [`gradients`], computed by the generic adjoint engine.
pub fn adjoint_gradients<T: Scalar>(
    params: &FishingParams<T>,
    s: &FishingScenario<T>,
    u: &[T],
) -> Result<FishingGradients<T>> {
    let sys = FishingSystem { params, scenario: s };
    let controls = Controls::PerStep(u);
    let traj = adjoint::forward_sweep(&sys, controls)?;
    let f = adjoint::grad_stage_sum(&sys, &sys, controls, &traj)?;
    let g = adjoint::grad_terminal(&sys, controls, &traj, &[-T::one()])?;
    Ok(FishingGradients {
        objective: adjoint::stage_sum(&sys, controls, 1, &traj),
        objective_grad: f.gradient,
        constraint: params.x_des - traj.final_state()[0],
        constraint_grad: g.gradient,
    })
}

/// Scenario model; gradients come from the hand-derived recurrences.
#[derive(Debug, Clone, PartialEq)]
pub struct FishingModel<T: Scalar> {
    pub params: FishingParams<T>,
}

impl<T: Scalar> ScenarioModel<T> for FishingModel<T> {
    type Scenario = FishingScenario<T>;

    fn dim(&self) -> usize {
        self.params.steps
    }
    fn objective(&self, x: &[T], s: &FishingScenario<T>) -> T {
        objective(&self.params, s, x)
    }
    fn objective_grad(&self, x: &[T], s: &FishingScenario<T>, grad: &mut [T]) -> T {
        let sim = simulate(&self.params, s, x);
        let dt = self.params.dt();
        let n = x.len();
        let mut a = T::zero();
        for t in (0..n).rev() {
            if t + 1 < n {
                let jac = stock_jacobian(dt, s.growth_rate, s.capacity, x[t + 1], sim[t + 1]);
                a = a * jac + dt * profit_rate_dx(s.price[t + 1], s.quad_cost[t + 1], x[t + 1], sim[t + 1]);
            }
            let du = dt * profit_rate_du(s.price[t], s.quad_cost[t], s.linear_cost[t], x[t], sim[t]);
            grad[t] = -(du - a * (dt * sim[t]));
        }
        objective_on(dt, s, x, &sim)
    }
    fn constraint(&self, x: &[T], s: &FishingScenario<T>) -> T {
        constraint(&self.params, s, x)
    }
    fn constraint_grad(&self, x: &[T], s: &FishingScenario<T>, grad: &mut [T]) -> T {
        let sim = simulate(&self.params, s, x);
        let dt = self.params.dt();
        let n = x.len();
        let mut b = T::one();
        for t in (0..n).rev() {
            if t + 1 < n {
                b *= stock_jacobian(dt, s.growth_rate, s.capacity, x[t + 1], sim[t + 1]);
            }
            grad[t] = b * (dt * sim[t]);
        }
        self.params.x_des - sim[n]
    }
}

pub type FishingProblem<T> = ProblemInstance<T, FishingModel<T>>;

/// Binds parameters and scenarios into a problem over the box `[0, u_max]^T`.
pub fn fishing_problem<T: Scalar>(
    params: FishingParams<T>,
    scenarios: ScenarioSet<FishingScenario<T>>,
    epsilon: f64,
) -> Result<FishingProblem<T>> {
    params.validate()?;
    if scenarios.scenario_dim() != 3 + 3 * params.steps {
        return Err(Error::Contract(format!(
            "scenarios have {} price steps, params have {}",
            (scenarios.scenario_dim() - 3) / 3,
            params.steps
        )));
    }
    let feasible = params.feasible_set()?;
    ProblemInstance::new(FishingModel { params }, scenarios, feasible, epsilon)
}

/// Distribution of fishing scenarios. Normal laws are given by mean and variance and are
/// truncated by clamping at the stated minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FishingDistribution {
    pub growth_mean: f64,
    pub growth_variance: f64,
    pub growth_min: f64,
    pub capacity_mean: f64,
    pub capacity_variance: f64,
    pub capacity_min: f64,
    /// Initial `(p, d, c)`.
    pub price_start: [f64; 3],
    /// Increment covariance is `price_cov_scale / steps · price_cov`.
    pub price_cov_scale: f64,
    pub price_cov: [[f64; 3]; 3],
}

impl Default for FishingDistribution {
    fn default() -> Self {
        Self {
            growth_mean: 1.0,
            growth_variance: 0.01,
            growth_min: 0.01,
            capacity_mean: 2.0,
            capacity_variance: 0.25,
            capacity_min: 1.0,
            price_start: [2.0, 0.1, 1.5],
            price_cov_scale: 0.01,
            price_cov: [[1.0, 0.025, 0.5], [0.025, 0.05, 0.025], [0.5, 0.025, 1.0]],
        }
    }
}

impl FishingDistribution {
    /// Lower Cholesky factor of the per-step increment covariance.
    pub fn increment_factor(&self, steps: usize) -> Result<Matrix3<f64>> {
        if self.price_cov_scale < 0.0 || steps == 0 {
            return Err(Error::Domain("price covariance scale must be nonnegative".into()));
        }
        let c = &self.price_cov;
        let m = Matrix3::new(c[0][0], c[0][1], c[0][2], c[1][0], c[1][1], c[1][2], c[2][0], c[2][1], c[2][2]);
        if m != m.transpose() {
            return Err(Error::Domain("price covariance must be symmetric".into()));
        }
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::Domain("price covariance must be positive definite".into()))?;
        Ok(chol.l() * (self.price_cov_scale / steps as f64).sqrt())
    }

    /// `E[(p_t, d_t, c_t)]`: the walk has zero-mean increments, so this is the start point.
    pub fn expected_prices(&self) -> [f64; 3] {
        self.price_start
    }
}

/// Draws `count` scenarios from one seeded ChaCha stream, scenario after scenario.
pub fn sample_fishing<T: Scalar>(
    params: &FishingParams<T>,
    dist: &FishingDistribution,
    count: usize,
    seed: u64,
) -> Result<ScenarioSet<FishingScenario<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_fishing_from(params, dist, count, &mut rng)
}

pub fn sample_fishing_from<T: Scalar, R: rand::Rng + ?Sized>(
    params: &FishingParams<T>,
    dist: &FishingDistribution,
    count: usize,
    rng: &mut R,
) -> Result<ScenarioSet<FishingScenario<T>>> {
    if count == 0 {
        return Err(Error::Domain("scenario count must be positive".into()));
    }
    params.validate()?;
    let steps = params.steps;
    let growth = Normal::new(dist.growth_mean, dist.growth_variance.sqrt())
        .map_err(|e| Error::Domain(format!("growth rate law: {e}")))?;
    let capacity = Normal::new(dist.capacity_mean, dist.capacity_variance.sqrt())
        .map_err(|e| Error::Domain(format!("capacity law: {e}")))?;
    let factor = dist.increment_factor(steps)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let r = growth.sample(rng).max(dist.growth_min);
        let k = capacity.sample(rng).max(dist.capacity_min);
        let x0 = Uniform::new_inclusive(k / 4.0, k)
            .map_err(|e| Error::Domain(format!("initial stock law: {e}")))?
            .sample(rng);
        let mut level = nalgebra::Vector3::from(dist.price_start);
        let mut price = Vec::with_capacity(steps);
        let mut quad = Vec::with_capacity(steps);
        let mut lin = Vec::with_capacity(steps);
        for t in 0..steps {
            if t > 0 {
                let z = nalgebra::Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                level += factor * z;
            }
            price.push(T::lit(level[0]));
            quad.push(T::lit(level[1]));
            lin.push(T::lit(level[2]));
        }
        out.push(FishingScenario {
            growth_rate: T::lit(r),
            capacity: T::lit(k),
            initial_stock: T::lit(x0),
            price,
            quad_cost: quad,
            linear_cost: lin,
        });
    }
    ScenarioSet::new(out)
}
