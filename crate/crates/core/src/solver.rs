//! Batch and minibatch projected gradient methods for the penalized problem, plus penalty
//! continuation.
//!
//! The minibatch method keeps a delayed value `z_i` per scenario. Each update evaluates the
//! constraint only on the current block, refreshes those `z_i`, takes the quantile `q^k` of
//! all `z` and moves along
//!
//! ```text
//! (1/|I|) Σ_{i∈I} ∇f(x, ξ_i) + λ φ′(q^k) ∇g(x, ξ_{i^k})
//! ```
//!
//! where `i^k` is the scenario whose delayed value realizes `q^k`. Blocks are contiguous slot
//! ranges; randomness comes from relabeling the slots once per epoch.
//!
//! Accounting: the initial fill costs `S` constraint evaluations, every update costs
//! `size_minibatch` block evaluations plus one gradient evaluation at `i^k`.

use std::ops::Range;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{ChanceProblem, PenaltyFunction};
use crate::quantile::{naive_quantile, MinibatchBlock, SortedQuantileState};
use crate::scalar::{pairwise_row_sum, pairwise_sum, Scalar};

/// Step size `α^k` as a function of the 1-based update counter within a stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule<T> {
    Constant { alpha: T },
    /// `α / √k`.
    InverseSqrt { alpha: T },
}

impl<T: Scalar> StepSchedule<T> {
    pub fn step(&self, k: usize) -> T {
        match *self {
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::InverseSqrt { alpha } => alpha / T::from_usize_lossy(k.max(1)).sqrt(),
        }
    }

    pub fn base(&self) -> T {
        match *self {
            StepSchedule::Constant { alpha } | StepSchedule::InverseSqrt { alpha } => alpha,
        }
    }

    fn validate(&self) -> Result<()> {
        let a = self.base();
        if a.is_finite() && a >= T::zero() {
            Ok(())
        } else {
            Err(Error::Domain(format!("step size must be finite and nonnegative, got {a}")))
        }
    }
}

/// When to recompute `|q(x) − q^k|` with a full pass over all scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditPolicy {
    #[default]
    Never,
    EveryEpoch,
    EveryUpdates(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig<T> {
    pub size_minibatch: usize,
    pub n_epoch: usize,
    pub step: StepSchedule<T>,
    pub lambda: T,
    pub seed: u64,
    #[serde(default)]
    pub penalty: PenaltyFunction,
    #[serde(default)]
    pub audit: AuditPolicy,
    /// Evaluate the block's scenarios on the rayon pool. Results do not depend on this.
    #[serde(default)]
    pub parallel: bool,
}

impl<T: Scalar> SolverConfig<T> {
    pub fn new(size_minibatch: usize, n_epoch: usize, step: StepSchedule<T>, lambda: T, seed: u64) -> Self {
        Self {
            size_minibatch,
            n_epoch,
            step,
            lambda,
            seed,
            penalty: PenaltyFunction::QuadraticHinge,
            audit: AuditPolicy::Never,
            parallel: false,
        }
    }

    /// `⌊S / size_minibatch⌋`.
    pub fn n_minibatch(&self, scenario_count: usize) -> usize {
        scenario_count / self.size_minibatch.max(1)
    }

    /// Updates per stage, `n_minibatch · n_epoch` (equal to `S · n_epoch / size_minibatch`
    /// whenever the minibatch size divides `S`).
    pub fn n_update(&self, scenario_count: usize) -> usize {
        self.n_minibatch(scenario_count) * self.n_epoch
    }

    pub fn validate(&self, scenario_count: usize) -> Result<()> {
        if self.size_minibatch == 0 || self.size_minibatch > scenario_count {
            return Err(Error::Contract(format!(
                "minibatch size {} must lie in 1..={scenario_count}",
                self.size_minibatch
            )));
        }
        if self.n_epoch == 0 {
            return Err(Error::Contract("n_epoch must be positive".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= T::zero()) {
            return Err(Error::Domain(format!("λ must be finite and nonnegative, got {}", self.lambda)));
        }
        if let AuditPolicy::EveryUpdates(0) = self.audit {
            return Err(Error::Contract("audit interval must be positive".into()));
        }
        self.step.validate()
    }
}

/// Strictly increasing penalty parameters `λ¹ < … < λ^L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<T>", into = "Vec<T>", bound(serialize = "", deserialize = ""))]
pub struct ContinuationSchedule<T: Scalar> {
    lambdas: Vec<T>,
}

impl<T: Scalar> ContinuationSchedule<T> {
    pub fn new(lambdas: Vec<T>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::Contract("continuation schedule must not be empty".into()));
        }
        if lambdas.iter().any(|l| !(l.is_finite() && *l > T::zero())) {
            return Err(Error::Domain("all λ must be finite and positive".into()));
        }
        if lambdas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Contract("λ schedule must be strictly increasing".into()));
        }
        Ok(Self { lambdas })
    }

    /// `initial · factor^l` for `l = 0 … stages − 1`.
    pub fn geometric(initial: T, factor: T, stages: usize) -> Result<Self> {
        let mut lambdas = Vec::with_capacity(stages);
        let mut l = initial;
        for _ in 0..stages {
            lambdas.push(l);
            l *= factor;
        }
        Self::new(lambdas)
    }

    pub fn lambdas(&self) -> &[T] {
        &self.lambdas
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

impl<T: Scalar> TryFrom<Vec<T>> for ContinuationSchedule<T> {
    type Error = Error;
    fn try_from(v: Vec<T>) -> Result<Self> {
        Self::new(v)
    }
}

impl<T: Scalar> From<ContinuationSchedule<T>> for Vec<T> {
    fn from(s: ContinuationSchedule<T>) -> Self {
        s.lambdas
    }
}

/// Accumulated wall time per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub objective: Duration,
    pub constraint: Duration,
    pub quantile: Duration,
}

impl PhaseTimes {
    pub fn total(&self) -> Duration {
        self.objective + self.constraint + self.quantile
    }
}

/// Independent random streams of one solver run: one for the per-epoch relabeling, one for
/// breaking ties at the quantile. Both derive from the run seed by ChaCha stream id.
#[derive(Debug, Clone)]
pub struct SolverRng {
    pub shuffle: ChaCha8Rng,
    pub ties: ChaCha8Rng,
}

impl SolverRng {
    pub fn from_seed(seed: u64) -> Self {
        let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
        shuffle.set_stream(0);
        let mut ties = ChaCha8Rng::seed_from_u64(seed);
        ties.set_stream(1);
        Self { shuffle, ties }
    }
}

/// Iterate of the minibatch method: decision vector, delayed values and counters.
#[derive(Debug, Clone)]
pub struct IterateState<T: Scalar> {
    x: Vec<T>,
    tracker: SortedQuantileState<T>,
    /// `slots[s]` is the scenario currently labeled `s`.
    slots: Vec<usize>,
    k: usize,
    g_eval_count: u64,
    f_eval_count: u64,
    audit_eval_count: u64,
    times: PhaseTimes,
}

impl<T: Scalar> IterateState<T> {
    /// Projects `x0` onto the box and fills the delayed values with `g(x0, ξ_i)`.
    pub fn init<P: ChanceProblem<T> + ?Sized>(problem: &P, x0: &[T]) -> Result<Self> {
        let x = problem.feasible_set().project(x0)?;
        check_finite_vec(&x, "initial point")?;
        let s = problem.scenario_count();
        let start = Instant::now();
        let values = evaluate_constraints(problem, &x, &(0..s).collect::<Vec<_>>(), false);
        let constraint = start.elapsed();
        check_finite_vec(&values, "initial constraint values")?;
        let start = Instant::now();
        let tracker = SortedQuantileState::init_from_values(&values, problem.epsilon())?;
        Ok(Self {
            x,
            tracker,
            slots: (0..s).collect(),
            k: 0,
            g_eval_count: s as u64,
            f_eval_count: 0,
            audit_eval_count: 0,
            times: PhaseTimes {
                constraint,
                quantile: start.elapsed(),
                ..PhaseTimes::default()
            },
        })
    }

    /// Refills all delayed values at the current iterate (costs `S` evaluations).
    pub fn refresh_delayed_values<P: ChanceProblem<T> + ?Sized>(&mut self, problem: &P) -> Result<()> {
        let start = Instant::now();
        let values = evaluate_constraints(problem, &self.x, &self.slots, false);
        self.times.constraint += start.elapsed();
        check_finite_vec(&values, "constraint values")?;
        self.g_eval_count += values.len() as u64;
        let start = Instant::now();
        self.tracker = SortedQuantileState::init_from_values(&values, problem.epsilon())?;
        self.times.quantile += start.elapsed();
        Ok(())
    }

    pub fn x(&self) -> &[T] {
        &self.x
    }

    pub fn tracker(&self) -> &SortedQuantileState<T> {
        &self.tracker
    }

    /// Scenario held by each slot.
    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    /// Delayed values indexed by scenario (not by slot).
    pub fn delayed_values_by_scenario(&self) -> Vec<T> {
        let by_slot = self.tracker.delayed_values();
        let mut out = by_slot.clone();
        for (slot, &scenario) in self.slots.iter().enumerate() {
            out[scenario] = by_slot[slot];
        }
        out
    }

    /// Current approximate quantile `q^k`.
    pub fn quantile(&self) -> T {
        self.tracker.quantile()
    }

    /// Updates performed so far.
    pub fn updates(&self) -> usize {
        self.k
    }

    pub fn g_eval_count(&self) -> u64 {
        self.g_eval_count
    }

    pub fn f_eval_count(&self) -> u64 {
        self.f_eval_count
    }

    /// Constraint evaluations spent on gap audits, kept apart from the algorithm's own count.
    pub fn audit_eval_count(&self) -> u64 {
        self.audit_eval_count
    }

    /// Completed epochs: `⌊g_eval_count / S⌋`.
    pub fn epoch_count(&self) -> u64 {
        self.g_eval_count / self.slots.len() as u64
    }

    pub fn times(&self) -> PhaseTimes {
        self.times
    }

    /// Renames slot `i` to hold what slot `theta[i]` held, keeping delayed values attached to
    /// their scenarios.
    pub fn relabel(&mut self, theta: &[usize]) -> Result<()> {
        self.tracker.shuffle_relabel(theta)?;
        let old = self.slots.clone();
        for (slot, &src) in self.slots.iter_mut().zip(theta) {
            *slot = old[src];
        }
        Ok(())
    }

    pub fn check_invariants<P: ChanceProblem<T> + ?Sized>(&self, problem: &P) -> Result<()> {
        if !problem.feasible_set().contains(&self.x) {
            return Err(Error::Invariant("iterate left the feasible box".into()));
        }
        self.tracker.check_invariants()
    }
}

/// What one minibatch update did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord<T> {
    /// 1-based update counter within the state.
    pub k: usize,
    pub quantile: T,
    /// Scenario `i^k` realizing the quantile.
    pub quantile_scenario: usize,
    /// `(1/|I|) Σ_{i∈I} f(x^k, ξ_i) + λ φ(q^k)`.
    pub objective_estimate: T,
    pub step: T,
    pub pass_count: usize,
}

/// One update of the minibatch method on the slots in `block`.
#[allow(clippy::too_many_arguments)]
pub fn sgd_step<T: Scalar, P: ChanceProblem<T> + ?Sized, R: Rng + ?Sized>(
    state: &mut IterateState<T>,
    problem: &P,
    lambda: T,
    alpha: T,
    block: Range<usize>,
    penalty: PenaltyFunction,
    tie_rng: &mut R,
    parallel: bool,
) -> Result<StepRecord<T>> {
    let s = state.slots.len();
    if block.is_empty() || block.end > s {
        return Err(Error::Contract(format!("block {block:?} is not a nonempty range in 0..{s}")));
    }
    let dim = problem.dim();
    let m = block.len();
    let scenarios = &state.slots[block.clone()];

    let start = Instant::now();
    let mut grads = vec![T::zero(); m * dim];
    let mut fvals = vec![T::zero(); m];
    evaluate_objective_rows(problem, &state.x, scenarios, &mut grads, &mut fvals, parallel);
    state.times.objective += start.elapsed();
    state.f_eval_count += m as u64;

    let start = Instant::now();
    let gvals = evaluate_constraints(problem, &state.x, scenarios, parallel);
    state.times.constraint += start.elapsed();
    check_finite_vec(&gvals, "constraint values")?;

    let start = Instant::now();
    let merged = state.tracker.merge_update(&MinibatchBlock::new(block.start, &gvals)?)?;
    let pos = state.tracker.quantile_index() - 1;
    let ties = state.tracker.tied_positions(pos);
    let chosen = if ties.len() > 1 { tie_rng.random_range(ties) } else { pos };
    let quantile_slot = state.tracker.sort_permutation()[chosen];
    state.times.quantile += start.elapsed();
    let q = merged.quantile;
    let quantile_scenario = state.slots[quantile_slot];

    let start = Instant::now();
    let mut grad_g = vec![T::zero(); dim];
    problem.constraint_grad(&state.x, quantile_scenario, &mut grad_g);
    state.times.constraint += start.elapsed();
    state.g_eval_count += m as u64 + 1;

    let mut direction = vec![T::zero(); dim];
    pairwise_row_sum(&grads, dim, &mut direction);
    let inv_m = T::one() / T::from_usize_lossy(m);
    let weight = lambda * penalty.derivative_unchecked(q);
    for (d, gg) in direction.iter_mut().zip(&grad_g) {
        *d = *d * inv_m + weight * *gg;
    }
    check_finite_vec(&direction, "gradient estimate")?;

    for (xi, d) in state.x.iter_mut().zip(&direction) {
        *xi -= alpha * *d;
    }
    problem.feasible_set().project_in_place(&mut state.x)?;
    check_finite_vec(&state.x, "iterate")?;
    state.k += 1;

    let objective_estimate = pairwise_sum(&fvals) * inv_m + lambda * penalty.value_unchecked(q);
    Ok(StepRecord {
        k: state.k,
        quantile: q,
        quantile_scenario,
        objective_estimate,
        step: alpha,
        pass_count: merged.pass_count,
    })
}

/// `|q(x) − q^k|` for the current iterate, recomputing `q(x)` from fresh evaluations.
pub fn quantile_gap_audit<T: Scalar, P: ChanceProblem<T> + ?Sized>(
    state: &mut IterateState<T>,
    problem: &P,
) -> Result<T> {
    let s = problem.scenario_count();
    let fresh = evaluate_constraints(problem, &state.x, &(0..s).collect::<Vec<_>>(), false);
    state.audit_eval_count += s as u64;
    check_finite_vec(&fresh, "audited constraint values")?;
    let (q, _) = naive_quantile(&fresh, problem.epsilon())?;
    Ok((q - state.tracker.quantile()).abs())
}

/// Exact penalized gradient at `x` and the quantities it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient<T> {
    pub gradient: Vec<T>,
    pub quantile: T,
    pub quantile_scenario: usize,
    pub mean_objective: T,
}

/// `(1/S) Σ ∇f(x, ξ_i) + λ φ′(q(x)) ∇g(x, ξ_{i(x)})` with a fresh quantile over all scenarios.
pub fn batch_gradient<T: Scalar, P: ChanceProblem<T> + ?Sized>(
    x: &[T],
    problem: &P,
    lambda: T,
    penalty: PenaltyFunction,
) -> Result<BatchGradient<T>> {
    let (g, _) = batch_gradient_timed(x, problem, lambda, penalty, false)?;
    Ok(g)
}

fn batch_gradient_timed<T: Scalar, P: ChanceProblem<T> + ?Sized>(
    x: &[T],
    problem: &P,
    lambda: T,
    penalty: PenaltyFunction,
    parallel: bool,
) -> Result<(BatchGradient<T>, PhaseTimes)> {
    let s = problem.scenario_count();
    let dim = problem.dim();
    let all: Vec<usize> = (0..s).collect();
    let mut times = PhaseTimes::default();

    let start = Instant::now();
    let mut grads = vec![T::zero(); s * dim];
    let mut fvals = vec![T::zero(); s];
    evaluate_objective_rows(problem, x, &all, &mut grads, &mut fvals, parallel);
    times.objective += start.elapsed();

    let start = Instant::now();
    let gvals = evaluate_constraints(problem, x, &all, parallel);
    times.constraint += start.elapsed();
    check_finite_vec(&gvals, "constraint values")?;

    let start = Instant::now();
    let (q, i_q) = naive_quantile(&gvals, problem.epsilon())?;
    times.quantile += start.elapsed();

    let start = Instant::now();
    let mut grad_g = vec![T::zero(); dim];
    problem.constraint_grad(x, i_q, &mut grad_g);
    times.constraint += start.elapsed();

    let mut gradient = vec![T::zero(); dim];
    pairwise_row_sum(&grads, dim, &mut gradient);
    let inv_s = T::one() / T::from_usize_lossy(s);
    let weight = lambda * penalty.derivative_unchecked(q);
    for (d, gg) in gradient.iter_mut().zip(&grad_g) {
        *d = *d * inv_s + weight * *gg;
    }
    check_finite_vec(&gradient, "batch gradient")?;
    Ok((
        BatchGradient {
            gradient,
            quantile: q,
            quantile_scenario: i_q,
            mean_objective: pairwise_sum(&fvals) * inv_s,
        },
        times,
    ))
}

/// Iterate of the batch method.
#[derive(Debug, Clone)]
pub struct BatchState<T> {
    pub x: Vec<T>,
    pub k: usize,
    pub g_eval_count: u64,
    pub times: PhaseTimes,
}

impl<T: Scalar> BatchState<T> {
    pub fn new<P: ChanceProblem<T> + ?Sized>(problem: &P, x0: &[T]) -> Result<Self> {
        let x = problem.feasible_set().project(x0)?;
        check_finite_vec(&x, "initial point")?;
        Ok(Self {
            x,
            k: 0,
            g_eval_count: 0,
            times: PhaseTimes::default(),
        })
    }
}

/// `x ← P_X(x − α ∇F(x))`; returns the quantile `q(x)` used.
pub fn batch_step<T: Scalar, P: ChanceProblem<T> + ?Sized>(
    state: &mut BatchState<T>,
    problem: &P,
    lambda: T,
    alpha: T,
    penalty: PenaltyFunction,
    parallel: bool,
) -> Result<T> {
    let (g, times) = batch_gradient_timed(&state.x, problem, lambda, penalty, parallel)?;
    state.times.objective += times.objective;
    state.times.constraint += times.constraint;
    state.times.quantile += times.quantile;
    for (xi, d) in state.x.iter_mut().zip(&g.gradient) {
        *xi -= alpha * *d;
    }
    problem.feasible_set().project_in_place(&mut state.x)?;
    check_finite_vec(&state.x, "iterate")?;
    state.k += 1;
    state.g_eval_count += problem.scenario_count() as u64;
    Ok(g.quantile)
}

/// Runs `updates` batch steps with the given schedule.
pub fn run_batch<T: Scalar, P: ChanceProblem<T> + ?Sized>(
    x0: &[T],
    problem: &P,
    lambda: T,
    step: StepSchedule<T>,
    updates: usize,
    penalty: PenaltyFunction,
) -> Result<BatchState<T>> {
    let mut state = BatchState::new(problem, x0)?;
    for k in 1..=updates {
        batch_step(&mut state, problem, lambda, step.step(k), penalty, false)?;
    }
    Ok(state)
}

/// One row of the per-update trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRecord<T> {
    /// 1-based update counter within the stage.
    pub k: usize,
    /// 0-based epoch within the stage.
    pub epoch: usize,
    pub quantile: T,
    pub step: T,
    pub objective_estimate: T,
    pub gap: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary<T> {
    pub lambda: T,
    pub x: Vec<T>,
    pub final_quantile: T,
    pub updates: usize,
    pub g_eval_count: u64,
    pub epochs: u64,
}

/// Trace of one fixed-λ stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace<T> {
    pub lambda: T,
    pub records: Vec<UpdateRecord<T>>,
    pub summary: StageSummary<T>,
}

/// Runs one fixed-λ stage on an existing state: `n_epoch` epochs, each relabeling the slots
/// with a fresh uniform permutation and sweeping the contiguous blocks.
pub fn run_stage<T: Scalar, P: ChanceProblem<T> + ?Sized>(
    state: &mut IterateState<T>,
    problem: &P,
    config: &SolverConfig<T>,
    lambda: T,
    rng: &mut SolverRng,
) -> Result<StageTrace<T>> {
    let s = problem.scenario_count();
    let mut cfg = config.clone();
    cfg.lambda = lambda;
    cfg.validate(s)?;
    let n_minibatch = cfg.n_minibatch(s);
    let size = cfg.size_minibatch;
    let mut records = Vec::with_capacity(cfg.n_update(s));
    let mut theta: Vec<usize> = (0..s).collect();
    let g_before = state.g_eval_count;
    let mut k = 0usize;

    for epoch in 0..cfg.n_epoch {
        theta.iter_mut().enumerate().for_each(|(i, t)| *t = i);
        theta.shuffle(&mut rng.shuffle);
        state.relabel(&theta)?;
        for j in 0..n_minibatch {
            k += 1;
            let alpha = cfg.step.step(k);
            let rec = sgd_step(
                state,
                problem,
                lambda,
                alpha,
                j * size..(j + 1) * size,
                cfg.penalty,
                &mut rng.ties,
                cfg.parallel,
            )?;
            let audit_now = match cfg.audit {
                AuditPolicy::Never => false,
                AuditPolicy::EveryEpoch => j + 1 == n_minibatch,
                AuditPolicy::EveryUpdates(n) => k.is_multiple_of(n),
            };
            let gap = if audit_now {
                Some(quantile_gap_audit(state, problem)?)
            } else {
                None
            };
            records.push(UpdateRecord {
                k,
                epoch,
                quantile: rec.quantile,
                step: rec.step,
                objective_estimate: rec.objective_estimate,
                gap,
            });
        }
    }
    debug_assert!(problem.feasible_set().contains(&state.x));

    let g_eval_count = state.g_eval_count - g_before;
    Ok(StageTrace {
        lambda,
        summary: StageSummary {
            lambda,
            x: state.x.clone(),
            final_quantile: state.quantile(),
            updates: records.len(),
            g_eval_count,
            epochs: g_eval_count / s as u64,
        },
        records,
    })
}

/// Result of a single-λ run.
#[derive(Debug, Clone)]
pub struct PenalizedRun<T: Scalar> {
    pub x: Vec<T>,
    pub trace: StageTrace<T>,
    pub state: IterateState<T>,
}

/// Minibatch method at the fixed `config.lambda`, starting from `x0`.
pub fn run_penalized<T: Scalar, P: ChanceProblem<T> + ?Sized>(
    x0: &[T],
    problem: &P,
    config: &SolverConfig<T>,
) -> Result<PenalizedRun<T>> {
    config.validate(problem.scenario_count())?;
    let mut state = IterateState::init(problem, x0)?;
    let mut rng = SolverRng::from_seed(config.seed);
    let trace = run_stage(&mut state, problem, config, config.lambda, &mut rng)?;
    Ok(PenalizedRun {
        x: state.x.clone(),
        trace,
        state,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContinuationOptions {
    /// Re-evaluate every delayed value at the warm start of each new λ (one extra epoch per
    /// stage). Off by default: delayed values carry over.
    #[serde(default)]
    pub reinit_delayed_values: bool,
}

#[derive(Debug, Clone)]
pub struct ContinuationRun<T: Scalar> {
    pub stages: Vec<StageTrace<T>>,
    pub x: Vec<T>,
    pub state: IterateState<T>,
}

/// Penalty continuation: one minibatch stage per λ, each warm-started from the previous one.
/// `config.lambda` is ignored in favor of the schedule.
pub fn run_continuation<T: Scalar, P: ChanceProblem<T> + ?Sized>(
    x0: &[T],
    problem: &P,
    config: &SolverConfig<T>,
    schedule: &ContinuationSchedule<T>,
    options: ContinuationOptions,
) -> Result<ContinuationRun<T>> {
    let mut stage_hook = |_: &StageTrace<T>, _: &mut IterateState<T>| Ok(());
    run_continuation_with(x0, problem, config, schedule, options, &mut stage_hook)
}

/// [`run_continuation`] with a callback after every stage (used for per-stage reporting).
pub fn run_continuation_with<T, P, F>(
    x0: &[T],
    problem: &P,
    config: &SolverConfig<T>,
    schedule: &ContinuationSchedule<T>,
    options: ContinuationOptions,
    after_stage: &mut F,
) -> Result<ContinuationRun<T>>
where
    T: Scalar,
    P: ChanceProblem<T> + ?Sized,
    F: FnMut(&StageTrace<T>, &mut IterateState<T>) -> Result<()>,
{
    let mut cfg = config.clone();
    cfg.lambda = schedule.lambdas()[0];
    cfg.validate(problem.scenario_count())?;
    let mut state = IterateState::init(problem, x0)?;
    let mut rng = SolverRng::from_seed(config.seed);
    let mut stages = Vec::with_capacity(schedule.len());
    for (l, &lambda) in schedule.lambdas().iter().enumerate() {
        if l > 0 && options.reinit_delayed_values {
            state.refresh_delayed_values(problem)?;
        }
        let trace = run_stage(&mut state, problem, &cfg, lambda, &mut rng)?;
        after_stage(&trace, &mut state)?;
        stages.push(trace);
    }
    Ok(ContinuationRun {
        x: state.x.clone(),
        stages,
        state,
    })
}

fn check_finite_vec<T: Scalar>(v: &[T], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}: entry {i} is {}", v[i]))),
        None => Ok(()),
    }
}

// Work per call below which the rayon pool is not worth waking up.
const PARALLEL_MIN_ROWS: usize = 16;

fn evaluate_objective_rows<T: Scalar, P: ChanceProblem<T> + ?Sized>(
    problem: &P,
    x: &[T],
    scenarios: &[usize],
    grads: &mut [T],
    values: &mut [T],
    parallel: bool,
) {
    let dim = problem.dim();
    if dim == 0 {
        for (v, &i) in values.iter_mut().zip(scenarios) {
            *v = problem.objective_grad(x, i, &mut []);
        }
        return;
    }
    if parallel && scenarios.len() >= PARALLEL_MIN_ROWS {
        grads
            .par_chunks_mut(dim)
            .zip(values.par_iter_mut())
            .zip(scenarios.par_iter())
            .for_each(|((row, v), &i)| *v = problem.objective_grad(x, i, row));
    } else {
        for ((row, v), &i) in grads.chunks_mut(dim).zip(values.iter_mut()).zip(scenarios) {
            *v = problem.objective_grad(x, i, row);
        }
    }
}

fn evaluate_constraints<T: Scalar, P: ChanceProblem<T> + ?Sized>(
    problem: &P,
    x: &[T],
    scenarios: &[usize],
    parallel: bool,
) -> Vec<T> {
    if parallel && scenarios.len() >= PARALLEL_MIN_ROWS {
        scenarios.par_iter().map(|&i| problem.constraint(x, i)).collect()
    } else {
        scenarios.iter().map(|&i| problem.constraint(x, i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedules() {
        let c = StepSchedule::Constant { alpha: 0.5 };
        assert_eq!(c.step(1), 0.5);
        assert_eq!(c.step(100), 0.5);
        let d = StepSchedule::InverseSqrt { alpha: 1.0f64 };
        assert_eq!(d.step(1), 1.0);
        assert_eq!(d.step(4), 0.5);
        assert!(d.step(10_000) < 0.011);
    }

    #[test]
    fn continuation_schedule_validation() {
        assert!(ContinuationSchedule::<f64>::new(vec![]).is_err());
        assert!(ContinuationSchedule::new(vec![1.0, 1.0]).is_err());
        assert!(ContinuationSchedule::new(vec![2.0, 1.0]).is_err());
        assert!(ContinuationSchedule::new(vec![0.0, 1.0]).is_err());
        let g = ContinuationSchedule::<f64>::geometric(1e-3, 10.0, 7).unwrap();
        assert_eq!(g.len(), 7);
        assert!((g.lambdas()[6] - 1e3).abs() < 1e-9);
    }

    #[test]
    fn minibatch_counts_follow_floor_rule() {
        let cfg = SolverConfig::new(1000, 10, StepSchedule::Constant { alpha: 1e-2 }, 10.0, 0);
        assert_eq!(cfg.n_minibatch(100_000), 100);
        assert_eq!(cfg.n_update(100_000), 1000);
        let cfg = SolverConfig::new(100, 1, StepSchedule::Constant { alpha: 1e-2 }, 10.0, 0);
        assert_eq!(cfg.n_update(100_000), 1000);
        let cfg = SolverConfig::new(3, 2, StepSchedule::Constant { alpha: 1e-2 }, 10.0, 0);
        assert_eq!(cfg.n_minibatch(10), 3);
        assert!(cfg.validate(2).is_err());
    }

    #[test]
    fn rng_streams_are_distinct_and_reproducible() {
        let mut a = SolverRng::from_seed(7);
        let mut b = SolverRng::from_seed(7);
        let x: u64 = a.shuffle.random();
        assert_eq!(x, b.shuffle.random::<u64>());
        assert_ne!(a.ties.random::<u64>(), SolverRng::from_seed(7).shuffle.random::<u64>());
    }
}
