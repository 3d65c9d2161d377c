//! Reverse-mode gradients of controlled forward-Euler systems.
//!
//! A system evolves as `x_{t+1} = h_t(u_t, x_t)` from a fixed `x_0`. Given a stage-sum
//! functional `F(u) = Σ_t f_t(u_t, x_t)` or a terminal functional `G(x_T)`, one forward sweep
//! stores the trajectory and one backward sweep produces the gradient with respect to every
//! control. With the adjoint `λ_t` of the state `x_t`:
//!
//! ```text
//! λ_T = ∇G(x_T)            (0 for a pure stage sum)
//! λ_t = ∇ₓf_t + λ_{t+1} ∇ₓh_t
//! ∂/∂u_t = ∇_u f_t + λ_{t+1} ∇_u h_t
//! ```
//!
//! Steps are 0-based: `t = 0…T−1` are transitions, `x_T` is the final state. Jacobians are
//! never formed; systems supply row-vector products `λ ∇ₓh_t` and `λ ∇_u h_t` instead.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of one transition, recorded in the forward sweep and handed back to the
/// vector-Jacobian products so nonsmooth steps can use the right branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepEvent {
    #[default]
    Smooth,
    /// The step hit an obstacle at the lower end of a coordinate range (e.g. the left wall).
    BounceLower,
    BounceUpper,
}

impl StepEvent {
    pub fn is_bounce(self) -> bool {
        self != StepEvent::Smooth
    }
}

/// A discrete-time controlled system `x_{t+1} = h_t(u_t, x_t)`.
pub trait ControlledSystem<T: Scalar> {
    /// Maximum number of transitions `T`.
    fn horizon(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn initial_state(&self, x0: &mut [T]);

    /// Writes `h_t(u_t, x_t)` into `next`.
    fn transition(&self, t: usize, u: &[T], x: &[T], next: &mut [T]) -> StepEvent;

    /// Writes `λ ∇ₓh_t(u_t, x_t)` into `out`.
    fn vjp_state(&self, t: usize, u: &[T], x: &[T], event: StepEvent, lambda: &[T], out: &mut [T]);

    /// Writes `λ ∇_u h_t(u_t, x_t)` into `out`.
    fn vjp_control(&self, t: usize, u: &[T], x: &[T], event: StepEvent, lambda: &[T], out: &mut [T]);

    /// Stop the forward sweep once `x_t` satisfies this (for event-terminated horizons).
    /// The final state is then `x_t` and the trajectory has `t` transitions.
    fn is_terminal(&self, _t: usize, _x: &[T]) -> bool {
        false
    }
}

/// Stage costs `f_t(u_t, x_t)` of a stage-sum functional.
pub trait StageCost<T: Scalar> {
    fn value(&self, t: usize, u: &[T], x: &[T]) -> T;
    /// Writes `∇ₓf_t` and `∇_u f_t`.
    fn grad(&self, t: usize, u: &[T], x: &[T], grad_x: &mut [T], grad_u: &mut [T]);
}

/// How the control vector maps onto steps.
#[derive(Debug, Clone, Copy)]
pub enum Controls<'a, T> {
    /// `u` holds `T · control_dim` entries, one block per step.
    PerStep(&'a [T]),
    /// One control block shared by all steps; its gradient is the sum over steps.
    Constant(&'a [T]),
}

impl<'a, T> Controls<'a, T> {
    fn at(&self, t: usize, cdim: usize) -> &'a [T] {
        match *self {
            Controls::PerStep(u) => &u[t * cdim..(t + 1) * cdim],
            Controls::Constant(u) => u,
        }
    }

    fn check(&self, horizon: usize, cdim: usize) -> Result<()> {
        let (got, want) = match *self {
            Controls::PerStep(u) => (u.len(), horizon * cdim),
            Controls::Constant(u) => (u.len(), cdim),
        };
        if got == want {
            Ok(())
        } else {
            Err(Error::Contract(format!("expected {want} control entries, got {got}")))
        }
    }

    fn gradient_len(&self) -> usize {
        match *self {
            Controls::PerStep(u) | Controls::Constant(u) => u.len(),
        }
    }
}

/// States `x_0 … x_n` and step events of one forward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    state_dim: usize,
    states: Vec<T>,
    events: Vec<StepEvent>,
}

impl<T: Scalar> Trajectory<T> {
    /// Number of transitions performed.
    pub fn steps(&self) -> usize {
        self.events.len()
    }

    pub fn state(&self, t: usize) -> &[T] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn final_state(&self) -> &[T] {
        self.state(self.steps())
    }

    pub fn events(&self) -> &[StepEvent] {
        &self.events
    }

    pub fn bounce_count(&self) -> usize {
        self.events.iter().filter(|e| e.is_bounce()).count()
    }

    /// Transition evaluations spent, one per step.
    pub fn transition_count(&self) -> usize {
        self.events.len()
    }
}

/// Control gradient and the number of backward Jacobian applications it took.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointGradient<T> {
    pub gradient: Vec<T>,
    pub jacobian_applications: usize,
}

/// Runs `x_{t+1} = h_t(u_t, x_t)` until the horizon or until [`ControlledSystem::is_terminal`].
pub fn forward_sweep<T: Scalar, Sys: ControlledSystem<T> + ?Sized>(
    system: &Sys,
    controls: Controls<'_, T>,
) -> Result<Trajectory<T>> {
    let n = system.horizon();
    let sdim = system.state_dim();
    let cdim = system.control_dim();
    controls.check(n, cdim)?;
    let mut states = vec![T::zero(); sdim];
    system.initial_state(&mut states);
    check_state(&states, 0)?;
    let mut events = Vec::new();
    for t in 0..n {
        if system.is_terminal(t, &states[t * sdim..]) {
            break;
        }
        states.resize((t + 2) * sdim, T::zero());
        let (done, next) = states.split_at_mut((t + 1) * sdim);
        let event = system.transition(t, controls.at(t, cdim), &done[t * sdim..], next);
        check_state(next, t + 1)?;
        events.push(event);
    }
    Ok(Trajectory {
        state_dim: sdim,
        states,
        events,
    })
}

/// Gradient of `Σ_t f_t(u_t, x_t)` over the trajectory's steps.
pub fn grad_stage_sum<T, Sys, C>(
    system: &Sys,
    cost: &C,
    controls: Controls<'_, T>,
    trajectory: &Trajectory<T>,
) -> Result<AdjointGradient<T>>
where
    T: Scalar,
    Sys: ControlledSystem<T> + ?Sized,
    C: StageCost<T> + ?Sized,
{
    backward(system, Some(cost), None, controls, trajectory)
}

/// Gradient of a terminal functional `G(x_T)` given `terminal_grad = ∇G(x_T)`.
pub fn grad_terminal<T, Sys>(
    system: &Sys,
    controls: Controls<'_, T>,
    trajectory: &Trajectory<T>,
    terminal_grad: &[T],
) -> Result<AdjointGradient<T>>
where
    T: Scalar,
    Sys: ControlledSystem<T> + ?Sized,
{
    backward::<T, Sys, dyn StageCost<T>>(system, None, Some(terminal_grad), controls, trajectory)
}

/// `Σ_t f_t(u_t, x_t)` along a stored trajectory.
pub fn stage_sum<T, C>(cost: &C, controls: Controls<'_, T>, cdim: usize, trajectory: &Trajectory<T>) -> T
where
    T: Scalar,
    C: StageCost<T> + ?Sized,
{
    let mut total = T::zero();
    for t in 0..trajectory.steps() {
        total += cost.value(t, controls.at(t, cdim), trajectory.state(t));
    }
    total
}

fn backward<T, Sys, C>(
    system: &Sys,
    cost: Option<&C>,
    terminal_grad: Option<&[T]>,
    controls: Controls<'_, T>,
    trajectory: &Trajectory<T>,
) -> Result<AdjointGradient<T>>
where
    T: Scalar,
    Sys: ControlledSystem<T> + ?Sized,
    C: StageCost<T> + ?Sized,
{
    let sdim = system.state_dim();
    let cdim = system.control_dim();
    controls.check(system.horizon(), cdim)?;
    if trajectory.state_dim != sdim {
        return Err(Error::Contract("trajectory does not belong to this system".into()));
    }
    let mut lambda = vec![T::zero(); sdim];
    if let Some(seed) = terminal_grad {
        if seed.len() != sdim {
            return Err(Error::Contract(format!(
                "terminal gradient has {} entries, state has {sdim}",
                seed.len()
            )));
        }
        lambda.copy_from_slice(seed);
    }
    let mut gradient = vec![T::zero(); controls.gradient_len()];
    let mut lambda_prev = vec![T::zero(); sdim];
    let mut gu_step = vec![T::zero(); cdim];
    let mut fx = vec![T::zero(); sdim];
    let mut fu = vec![T::zero(); cdim];
    let mut applications = 0;

    for t in (0..trajectory.steps()).rev() {
        let u = controls.at(t, cdim);
        let x = trajectory.state(t);
        let event = trajectory.events[t];
        system.vjp_control(t, u, x, event, &lambda, &mut gu_step);
        if t > 0 || cost.is_some() {
            system.vjp_state(t, u, x, event, &lambda, &mut lambda_prev);
        }
        applications += 1;
        if let Some(cost) = cost {
            cost.grad(t, u, x, &mut fx, &mut fu);
            for (g, f) in gu_step.iter_mut().zip(&fu) {
                *g = *f + *g;
            }
            for (l, f) in lambda_prev.iter_mut().zip(&fx) {
                *l = *f + *l;
            }
        }
        match controls {
            Controls::PerStep(_) => gradient[t * cdim..(t + 1) * cdim].copy_from_slice(&gu_step),
            Controls::Constant(_) => {
                for (g, s) in gradient.iter_mut().zip(&gu_step) {
                    *g += *s;
                }
            }
        }
        std::mem::swap(&mut lambda, &mut lambda_prev);
    }
    Ok(AdjointGradient {
        gradient,
        jacobian_applications: applications,
    })
}

fn check_state<T: Scalar>(x: &[T], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Simulation {
            step,
            reason: "non-finite state".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar `x_{t+1} = a x_t + b u_t`.
    struct Linear {
        a: f64,
        b: f64,
        x0: f64,
        n: usize,
    }

    impl ControlledSystem<f64> for Linear {
        fn horizon(&self) -> usize {
            self.n
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn initial_state(&self, x0: &mut [f64]) {
            x0[0] = self.x0;
        }
        fn transition(&self, _t: usize, u: &[f64], x: &[f64], next: &mut [f64]) -> StepEvent {
            next[0] = self.a * x[0] + self.b * u[0];
            StepEvent::Smooth
        }
        fn vjp_state(&self, _: usize, _: &[f64], _: &[f64], _: StepEvent, l: &[f64], out: &mut [f64]) {
            out[0] = l[0] * self.a;
        }
        fn vjp_control(&self, _: usize, _: &[f64], _: &[f64], _: StepEvent, l: &[f64], out: &mut [f64]) {
            out[0] = l[0] * self.b;
        }
    }

    struct SquaredControl;

    impl StageCost<f64> for SquaredControl {
        fn value(&self, _: usize, u: &[f64], _: &[f64]) -> f64 {
            u[0] * u[0]
        }
        fn grad(&self, _: usize, u: &[f64], _: &[f64], gx: &mut [f64], gu: &mut [f64]) {
            gx[0] = 0.0;
            gu[0] = 2.0 * u[0];
        }
    }

    #[test]
    fn empty_horizon_keeps_initial_state() {
        let sys = Linear { a: 2.0, b: 1.0, x0: 3.0, n: 0 };
        let traj = forward_sweep(&sys, Controls::PerStep(&[])).unwrap();
        assert_eq!(traj.steps(), 0);
        assert_eq!(traj.final_state(), &[3.0]);
    }

    #[test]
    fn identity_transition_gives_constant_trajectory() {
        let sys = Linear { a: 1.0, b: 0.0, x0: 0.7, n: 4 };
        let traj = forward_sweep(&sys, Controls::PerStep(&[1.0, -2.0, 3.0, 4.0])).unwrap();
        for t in 0..=4 {
            assert_eq!(traj.state(t), &[0.7]);
        }
    }

    #[test]
    fn single_step_control_cost() {
        let sys = Linear { a: 1.0, b: 1.0, x0: 0.0, n: 1 };
        let u = [0.3];
        let traj = forward_sweep(&sys, Controls::PerStep(&u)).unwrap();
        let g = grad_stage_sum(&sys, &SquaredControl, Controls::PerStep(&u), &traj).unwrap();
        assert_eq!(g.gradient, vec![0.6]);
        assert_eq!(g.jacobian_applications, 1);
    }

    #[test]
    fn terminal_gradient_of_two_step_linear_system() {
        // x_2 = a(a x0 + b u0) + b u1, so ∂x_2/∂u0 = a b and ∂x_2/∂u1 = b.
        let sys = Linear { a: 3.0, b: 0.5, x0: 1.0, n: 2 };
        let u = [0.2, -0.4];
        let traj = forward_sweep(&sys, Controls::PerStep(&u)).unwrap();
        let g = grad_terminal(&sys, Controls::PerStep(&u), &traj, &[1.0]).unwrap();
        assert_eq!(g.gradient, vec![1.5, 0.5]);
        let zero = grad_terminal(&sys, Controls::PerStep(&u), &traj, &[0.0]).unwrap();
        assert_eq!(zero.gradient, vec![0.0, 0.0]);
    }

    #[test]
    fn constant_controls_sum_step_gradients() {
        let sys = Linear { a: 3.0, b: 0.5, x0: 1.0, n: 2 };
        let u = [0.2];
        let traj = forward_sweep(&sys, Controls::Constant(&u)).unwrap();
        let g = grad_terminal(&sys, Controls::Constant(&u), &traj, &[1.0]).unwrap();
        assert_eq!(g.gradient, vec![2.0]);
    }

    #[test]
    fn wrong_control_length_is_rejected() {
        let sys = Linear { a: 1.0, b: 1.0, x0: 0.0, n: 3 };
        assert!(forward_sweep(&sys, Controls::PerStep(&[1.0])).is_err());
    }

    #[test]
    fn blow_up_is_a_simulation_error() {
        let sys = Linear { a: 1e300, b: 0.0, x0: 1e300, n: 3 };
        match forward_sweep(&sys, Controls::PerStep(&[0.0; 3])) {
            Err(Error::Simulation { step, .. }) => assert_eq!(step, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
