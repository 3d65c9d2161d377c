//! Free-fall electrostatic separator with two parallel electrodes.
//!
//! A particle of mass `m` and charge `Q` starts at `(s_x, s_y)` (`y` pointing down) and falls
//! under gravity, the Coulomb force `QU/(d_r − d_l)` and quadratic air drag:
//!
//! ```text
//! v̇_x = QU/(m(d_r − d_l)) − k v_x |v|,   v̇_y = g − k v_y |v|,   k = C A ρ / (2m)
//! ```
//!
//! integrated by forward Euler until `s_y` reaches the fall height. A step that ends beyond an
//! electrode puts the particle on the electrode and reverses `v_x`.
//!
//! The decision is `(U / voltage_scale, d_l, d_r)`. One scenario is a pair of particles, one
//! positively and one negatively charged, and the constraint requires both to land outside
//! the middle bin: `max(x_des − s_x,pos, s_x,neg + x_des) ≤ 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::adjoint::{self, ControlledSystem, Controls, StepEvent, Trajectory};
use crate::apps::ScenarioRecord;
use crate::error::{Error, Result};
use crate::problem::{BoxSet, ProblemInstance, ScenarioDim, ScenarioModel, ScenarioSet};
use crate::scalar::Scalar;

const SX: usize = 0;
const SY: usize = 1;
const VX: usize = 2;
const VY: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(serialize = "", deserialize = ""))]
pub struct SeparatorParams<T: Scalar> {
    pub drag_coefficient: T,
    /// Particle cross-section (m²).
    pub cross_section: T,
    pub air_density: T,
    pub gravity: T,
    pub fall_height: T,
    pub dt: T,
    pub max_steps: usize,
    /// Half-width of the middle bin (m).
    pub x_des: T,
    /// Volts per unit of the voltage decision variable.
    pub voltage_scale: T,
    /// Bounds on the scaled voltage.
    pub u_min: T,
    pub u_max: T,
    /// Electrode offsets: `d_l ∈ [−d_max, −d_min]`, `d_r ∈ [d_min, d_max]`.
    pub d_min: T,
    pub d_max: T,
}

impl<T: Scalar> Default for SeparatorParams<T> {
    fn default() -> Self {
        Self {
            drag_coefficient: T::lit(0.47),
            cross_section: T::lit(4e-6),
            air_density: T::lit(1.2),
            gravity: T::lit(9.81),
            fall_height: T::one(),
            dt: T::lit(1e-3),
            max_steps: 10_000,
            x_des: T::lit(0.025),
            voltage_scale: T::lit(1e4),
            u_min: T::zero(),
            u_max: T::lit(10.0),
            d_min: T::lit(0.06),
            d_max: T::lit(0.3),
        }
    }
}

impl<T: Scalar> SeparatorParams<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.fall_height,
            self.dt,
            self.voltage_scale,
            self.d_min,
            self.gravity,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > T::zero())) || self.max_steps == 0 {
            return Err(Error::Domain("separator step, height, scale and d_min must be positive".into()));
        }
        if !(self.d_min < self.d_max && self.u_min <= self.u_max) {
            return Err(Error::Domain("separator bounds are inverted".into()));
        }
        if self.drag_coefficient < T::zero() || self.cross_section < T::zero() || self.air_density < T::zero() {
            return Err(Error::Domain("drag parameters must be nonnegative".into()));
        }
        Ok(())
    }

    /// Box over `(U_scaled, d_l, d_r)`.
    pub fn feasible_set(&self) -> Result<BoxSet<T>> {
        BoxSet::new(
            vec![self.u_min, -self.d_max, self.d_min],
            vec![self.u_max, -self.d_min, self.d_max],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "", deserialize = ""))]
pub struct Particle<T: Scalar> {
    pub mass: T,
    pub charge: T,
    pub sx: T,
    pub sy: T,
    pub vx: T,
    pub vy: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "", deserialize = ""))]
pub struct SeparatorScenario<T: Scalar> {
    pub positive: Particle<T>,
    pub negative: Particle<T>,
}

impl<T: Scalar> ScenarioDim for SeparatorScenario<T> {
    fn scenario_dim(&self) -> usize {
        12
    }
}

impl<T: Scalar> ScenarioRecord for SeparatorScenario<T> {
    fn field_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(12);
        for p in ["pos", "neg"] {
            for f in ["mass", "charge", "sx", "sy", "vx", "vy"] {
                names.push(format!("{p}_{f}"));
            }
        }
        names
    }

    fn to_row(&self) -> Vec<f64> {
        [self.positive, self.negative]
            .iter()
            .flat_map(|p| [p.mass, p.charge, p.sx, p.sy, p.vx, p.vy])
            .map(|v| v.as_f64())
            .collect()
    }
}

/// One particle in a fixed design, as a [`ControlledSystem`] with constant controls
/// `(U_scaled, d_l, d_r)` and state `(s_x, s_y, v_x, v_y)`.
pub struct ParticleSystem<'a, T: Scalar> {
    pub params: &'a SeparatorParams<T>,
    pub particle: &'a Particle<T>,
}

impl<T: Scalar> ParticleSystem<'_, T> {
    fn drag_factor(&self) -> T {
        let p = self.params;
        p.drag_coefficient * p.cross_section * p.air_density / (T::lit(2.0) * self.particle.mass)
    }

    /// Horizontal Coulomb acceleration per unit of `U_scaled / (d_r − d_l)`.
    fn charge_ratio(&self) -> T {
        self.particle.charge * self.params.voltage_scale / self.particle.mass
    }
}

impl<T: Scalar> ControlledSystem<T> for ParticleSystem<'_, T> {
    fn horizon(&self) -> usize {
        self.params.max_steps
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        3
    }
    fn initial_state(&self, x0: &mut [T]) {
        let p = self.particle;
        x0.copy_from_slice(&[p.sx, p.sy, p.vx, p.vy]);
    }

    fn transition(&self, _t: usize, u: &[T], x: &[T], next: &mut [T]) -> StepEvent {
        let dt = self.params.dt;
        let k = self.drag_factor();
        let (vx, vy) = (x[VX], x[VY]);
        let speed = (vx * vx + vy * vy).sqrt();
        let width = u[2] - u[1];
        next[SX] = x[SX] + dt * vx;
        next[SY] = x[SY] + dt * vy;
        next[VX] = vx + dt * (self.charge_ratio() * u[0] / width - k * vx * speed);
        next[VY] = vy + dt * (self.params.gravity - k * vy * speed);
        if next[SX] > u[2] {
            next[SX] = u[2];
            next[VX] = -next[VX];
            StepEvent::BounceUpper
        } else if next[SX] < u[1] {
            next[SX] = u[1];
            next[VX] = -next[VX];
            StepEvent::BounceLower
        } else {
            StepEvent::Smooth
        }
    }

    fn vjp_state(&self, _t: usize, _u: &[T], x: &[T], event: StepEvent, lambda: &[T], out: &mut [T]) {
        let dt = self.params.dt;
        let k = self.drag_factor();
        let (vx, vy) = (x[VX], x[VY]);
        let speed = (vx * vx + vy * vy).sqrt();
        // Partials of v|v| components; both vanish at v = 0.
        let (dxx, dxy, dyy) = if speed > T::zero() {
            (speed + vx * vx / speed, vx * vy / speed, speed + vy * vy / speed)
        } else {
            (T::zero(), T::zero(), T::zero())
        };
        let (l_sx, l_vx) = match event {
            StepEvent::Smooth => (lambda[SX], lambda[VX]),
            _ => (T::zero(), -lambda[VX]),
        };
        let (l_sy, l_vy) = (lambda[SY], lambda[VY]);
        out[SX] = l_sx;
        out[SY] = l_sy;
        out[VX] = l_sx * dt + l_vx * (T::one() - dt * k * dxx) - l_vy * (dt * k * dxy);
        out[VY] = l_sy * dt - l_vx * (dt * k * dxy) + l_vy * (T::one() - dt * k * dyy);
    }

    fn vjp_control(&self, _t: usize, u: &[T], _x: &[T], event: StepEvent, lambda: &[T], out: &mut [T]) {
        let dt = self.params.dt;
        let width = u[2] - u[1];
        let c = self.charge_ratio();
        let l_vx = if event.is_bounce() { -lambda[VX] } else { lambda[VX] };
        let force_u = dt * c / width;
        let force_w = dt * c * u[0] / (width * width);
        out[0] = l_vx * force_u;
        out[1] = l_vx * force_w;
        out[2] = -(l_vx * force_w);
        match event {
            StepEvent::BounceLower => out[1] += lambda[SX],
            StepEvent::BounceUpper => out[2] += lambda[SX],
            StepEvent::Smooth => {}
        }
    }

    fn is_terminal(&self, _t: usize, x: &[T]) -> bool {
        x[SY] >= self.params.fall_height
    }
}

/// Where and how a particle landed.
#[derive(Debug, Clone, PartialEq)]
pub struct Landing<T> {
    pub sx: T,
    pub sy: T,
    pub steps: usize,
    pub bounces: usize,
    pub trajectory: Trajectory<T>,
}

/// Integrates one particle until it reaches the fall height.
pub fn simulate_particle<T: Scalar>(
    params: &SeparatorParams<T>,
    particle: &Particle<T>,
    decision: &[T],
) -> Result<Landing<T>> {
    let sys = ParticleSystem { params, particle };
    let trajectory = adjoint::forward_sweep(&sys, Controls::Constant(decision))?;
    let end = trajectory.final_state();
    if end[SY] < params.fall_height {
        return Err(Error::Simulation {
            step: trajectory.steps(),
            reason: format!(
                "particle still at height {} after the step cap ({} bounces)",
                end[SY],
                trajectory.bounce_count()
            ),
        });
    }
    Ok(Landing {
        sx: end[SX],
        sy: end[SY],
        steps: trajectory.steps(),
        bounces: trajectory.bounce_count(),
        trajectory,
    })
}

/// `∂s_x(T)/∂(U_scaled, d_l, d_r)` along a stored landing.
pub fn landing_gradient<T: Scalar>(
    params: &SeparatorParams<T>,
    particle: &Particle<T>,
    decision: &[T],
    landing: &Landing<T>,
) -> Result<Vec<T>> {
    let sys = ParticleSystem { params, particle };
    let seed = [T::one(), T::zero(), T::zero(), T::zero()];
    Ok(adjoint::grad_terminal(&sys, Controls::Constant(decision), &landing.trajectory, &seed)?.gradient)
}

/// Which separation condition is the binding one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveParticle {
    Positive,
    Negative,
}

/// `(g, active branch, positive landing, negative landing)`. On a tie the positive branch is
/// reported so that the evaluator stays a pure function.
pub fn evaluate_pair<T: Scalar>(
    params: &SeparatorParams<T>,
    scenario: &SeparatorScenario<T>,
    decision: &[T],
) -> Result<(T, ActiveParticle, Landing<T>, Landing<T>)> {
    let pos = simulate_particle(params, &scenario.positive, decision)?;
    let neg = simulate_particle(params, &scenario.negative, decision)?;
    let a = params.x_des - pos.sx;
    let b = neg.sx + params.x_des;
    let (g, active) = if b > a {
        (b, ActiveParticle::Negative)
    } else {
        (a, ActiveParticle::Positive)
    };
    Ok((g, active, pos, neg))
}

/// `max(x_des − s_x,pos(T), s_x,neg(T) + x_des)` and its gradient along the active branch.
pub fn constraint_and_gradient<T: Scalar>(
    params: &SeparatorParams<T>,
    scenario: &SeparatorScenario<T>,
    decision: &[T],
) -> Result<(T, Vec<T>)> {
    let (g, active, pos, neg) = evaluate_pair(params, scenario, decision)?;
    let grad = match active {
        ActiveParticle::Positive => landing_gradient(params, &scenario.positive, decision, &pos)?
            .into_iter()
            .map(|v| -v)
            .collect(),
        ActiveParticle::Negative => landing_gradient(params, &scenario.negative, decision, &neg)?,
    };
    Ok((g, grad))
}

/// Scenario model; objective is the scaled voltage. A failed simulation (step cap) turns into
/// a NaN constraint value, which the solver reports as a numeric failure.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorModel<T: Scalar> {
    pub params: SeparatorParams<T>,
}

impl<T: Scalar> ScenarioModel<T> for SeparatorModel<T> {
    type Scenario = SeparatorScenario<T>;

    fn dim(&self) -> usize {
        3
    }
    fn objective(&self, x: &[T], _s: &SeparatorScenario<T>) -> T {
        x[0]
    }
    fn objective_grad(&self, x: &[T], _s: &SeparatorScenario<T>, grad: &mut [T]) -> T {
        grad.copy_from_slice(&[T::one(), T::zero(), T::zero()]);
        x[0]
    }
    fn constraint(&self, x: &[T], s: &SeparatorScenario<T>) -> T {
        evaluate_pair(&self.params, s, x).map_or(T::nan(), |r| r.0)
    }
    fn constraint_grad(&self, x: &[T], s: &SeparatorScenario<T>, grad: &mut [T]) -> T {
        match constraint_and_gradient(&self.params, s, x) {
            Ok((g, gr)) => {
                grad.copy_from_slice(&gr);
                g
            }
            Err(_) => {
                grad.fill(T::nan());
                T::nan()
            }
        }
    }
}

pub type SeparatorProblem<T> = ProblemInstance<T, SeparatorModel<T>>;

pub fn separator_problem<T: Scalar>(
    params: SeparatorParams<T>,
    scenarios: ScenarioSet<SeparatorScenario<T>>,
    epsilon: f64,
) -> Result<SeparatorProblem<T>> {
    params.validate()?;
    let feasible = params.feasible_set()?;
    ProblemInstance::new(SeparatorModel { params }, scenarios, feasible, epsilon)
}

/// Normal laws by mean and standard deviation. Masses are clamped at `mass_min`; charges are
/// not truncated. Particles start at rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparatorDistribution {
    pub positive_mass: (f64, f64),
    pub positive_charge: (f64, f64),
    pub negative_mass: (f64, f64),
    pub negative_charge: (f64, f64),
    pub mass_min: f64,
    pub sx_range: (f64, f64),
    pub sy_range: (f64, f64),
}

impl Default for SeparatorDistribution {
    fn default() -> Self {
        Self {
            positive_mass: (6e-6, 2e-6),
            positive_charge: (5.5e-11, 2.2e-11),
            negative_mass: (8e-6, 1.5e-6),
            negative_charge: (-5e-11, 2e-11),
            mass_min: 1e-7,
            sx_range: (-0.05, 0.05),
            sy_range: (0.0, 0.05),
        }
    }
}

pub fn sample_separator<T: Scalar>(
    dist: &SeparatorDistribution,
    count: usize,
    seed: u64,
) -> Result<ScenarioSet<SeparatorScenario<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_separator_from(dist, count, &mut rng)
}

pub fn sample_separator_from<T: Scalar, R: rand::Rng + ?Sized>(
    dist: &SeparatorDistribution,
    count: usize,
    rng: &mut R,
) -> Result<ScenarioSet<SeparatorScenario<T>>> {
    if count == 0 {
        return Err(Error::Domain("scenario count must be positive".into()));
    }
    let normal = |(mean, sd): (f64, f64)| {
        Normal::new(mean, sd).map_err(|e| Error::Domain(format!("separator law: {e}")))
    };
    let uniform = |(lo, hi): (f64, f64)| {
        Uniform::new_inclusive(lo, hi).map_err(|e| Error::Domain(format!("separator law: {e}")))
    };
    let laws = [
        (normal(dist.positive_mass)?, normal(dist.positive_charge)?),
        (normal(dist.negative_mass)?, normal(dist.negative_charge)?),
    ];
    let (sx, sy) = (uniform(dist.sx_range)?, uniform(dist.sy_range)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut draw = |(m, q): &(Normal<f64>, Normal<f64>)| Particle {
            mass: T::lit(m.sample(rng).max(dist.mass_min)),
            charge: T::lit(q.sample(rng)),
            sx: T::lit(sx.sample(rng)),
            sy: T::lit(sy.sample(rng)),
            vx: T::zero(),
            vy: T::zero(),
        };
        let positive = draw(&laws[0]);
        let negative = draw(&laws[1]);
        out.push(SeparatorScenario { positive, negative });
    }
    ScenarioSet::new(out)
}
