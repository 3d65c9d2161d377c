//! Builds the configured problem, runs every grid cell through the λ continuation, and
//! evaluates each stage on the training set and on held-out scenarios.

use std::time::{Duration, Instant};

use ccsgd::apps::fishing::{self, fishing_problem, sample_fishing_from, FishingDistribution};
use ccsgd::apps::gas::{build_synthetic_network, gas_problem, GasDemandLaw, GasNetwork};
use ccsgd::apps::separator::{sample_separator_from, separator_problem, SeparatorDistribution};
use ccsgd::solver::{run_continuation_with, BatchState, PhaseTimes, StageTrace};
use ccsgd::{
    batch_step, naive_quantile, ChanceProblem, ContinuationOptions, ContinuationSchedule, Error, FishingProblem,
    GasProblem, PenaltyFunction, ScenarioModel, SeparatorProblem, SolverConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Application, ConfigError, ExperimentConfig};

/// ChaCha stream carrying the training scenarios; solver streams 0 and 1 share the seed.
pub const TRAIN_STREAM: u64 = 2;
/// Held-out chunk `j` is drawn from stream `TEST_STREAM_BASE + j`.
pub const TEST_STREAM_BASE: u64 = 1 << 32;
pub const TEST_CHUNK: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("problem setup: {0}")]
    Setup(Error),
    #[error("solver: {0}")]
    Solver(Error),
    #[error("{0}")]
    Output(String),
    #[error("gradient check failed: {0}")]
    CheckFailed(String),
}

impl RunError {
    /// Process exit code: 2 for bad input, 3 for numerical failure or a failed gradient
    /// check, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Setup(_) => 2,
            RunError::Solver(Error::NonFinite(_) | Error::Simulation { .. }) | RunError::CheckFailed(_) => 3,
            _ => 1,
        }
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Network and demand law for the gas application.
pub fn gas_network(cfg: &ExperimentConfig) -> Result<(GasNetwork<f64>, GasDemandLaw), RunError> {
    let setup = &cfg.gas;
    match &setup.network {
        None => build_synthetic_network(&setup.synthetic).map_err(RunError::Setup),
        Some(path) => {
            let file: GasNetworkFile = serde_json::from_str(
                &std::fs::read_to_string(path)
                    .map_err(|e| RunError::Config(ConfigError::Invalid(format!("gas network {path}: {e}"))))?,
            )
            .map_err(|e| RunError::Config(ConfigError::Invalid(format!("gas network {path}: {e}"))))?;
            let mut network = file.network;
            network.finalize().map_err(RunError::Setup)?;
            if file.demand.mean.len() != network.exits() {
                return Err(RunError::Config(ConfigError::Invalid(
                    "demand law length differs from the number of exits".into(),
                )));
            }
            Ok((network, file.demand))
        }
    }
}

/// On-disk form of a gas instance: the tree plus its demand law.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GasNetworkFile {
    pub network: GasNetwork<f64>,
    pub demand: GasDemandLaw,
}

/// A built training instance plus what is needed to draw fresh scenarios.
pub enum Instance {
    Fishing { problem: FishingProblem, distribution: FishingDistribution },
    Separator { problem: SeparatorProblem, distribution: SeparatorDistribution },
    Gas { problem: GasProblem, law: GasDemandLaw },
}

impl Instance {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, RunError> {
        let mut rng = stream_rng(cfg.seed, TRAIN_STREAM);
        let s = cfg.scenarios;
        let eps = cfg.epsilon;
        let setup = RunError::Setup;
        Ok(match cfg.application {
            Application::Fishing => {
                let f = &cfg.fishing;
                let set = sample_fishing_from(&f.params, &f.distribution, s, &mut rng).map_err(setup)?;
                Instance::Fishing {
                    problem: fishing_problem(f.params.clone(), set, eps).map_err(setup)?,
                    distribution: f.distribution.clone(),
                }
            }
            Application::Separator => {
                let p = &cfg.separator;
                let set = sample_separator_from(&p.distribution, s, &mut rng).map_err(setup)?;
                Instance::Separator {
                    problem: separator_problem(p.params.clone(), set, eps).map_err(setup)?,
                    distribution: p.distribution.clone(),
                }
            }
            Application::Gas => {
                let (network, law) = gas_network(cfg)?;
                let set = law.sample_from(s, &mut rng).map_err(setup)?;
                Instance::Gas { problem: gas_problem(network, cfg.gas.layout, set, eps).map_err(setup)?, law }
            }
        })
    }

    pub fn problem(&self) -> &(dyn ChanceProblem<f64> + 'static) {
        match self {
            Instance::Fishing { problem, .. } => problem,
            Instance::Separator { problem, .. } => problem,
            Instance::Gas { problem, .. } => problem,
        }
    }

    /// Constraint values on held-out chunk `chunk` of `len` scenarios.
    fn held_out_values(&self, x: &[f64], seed: u64, chunk: usize, len: usize) -> Result<Vec<f64>, Error> {
        let mut rng = stream_rng(seed, TEST_STREAM_BASE + chunk as u64);
        Ok(match self {
            Instance::Fishing { problem, distribution } => {
                let set = sample_fishing_from(&problem.model().params, distribution, len, &mut rng)?;
                set.iter().map(|s| problem.model().constraint(x, s)).collect()
            }
            Instance::Separator { problem, distribution } => {
                let set = sample_separator_from(distribution, len, &mut rng)?;
                set.iter().map(|s| problem.model().constraint(x, s)).collect()
            }
            Instance::Gas { problem, law } => {
                let set = law.sample_from::<f64, _>(len, &mut rng)?;
                set.iter().map(|s| problem.model().constraint(x, s)).collect()
            }
        })
    }

    /// Fraction of `count` held-out scenarios with `g > 0` (a failed evaluation counts as a
    /// violation).
    pub fn held_out_failure(&self, x: &[f64], seed: u64, count: usize) -> Result<f64, Error> {
        let chunks = count.div_ceil(TEST_CHUNK);
        let violated = (0..chunks)
            .into_par_iter()
            .map(|j| {
                let len = TEST_CHUNK.min(count - j * TEST_CHUNK);
                let g = self.held_out_values(x, seed, j, len)?;
                Ok(g.iter().filter(|&&v| !(v <= 0.0)).count())
            })
            .collect::<Result<Vec<usize>, Error>>()?;
        Ok(violated.iter().sum::<usize>() as f64 / count as f64)
    }
}

/// Full-pass evaluation of an iterate on the training scenarios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub objective: f64,
    pub quantile: f64,
    pub eps_data: f64,
    pub eps_true: Option<f64>,
}

pub fn training_metrics(problem: &dyn ChanceProblem<f64>, x: &[f64]) -> Result<Metrics, Error> {
    let s = problem.scenario_count();
    let (f, g): (Vec<f64>, Vec<f64>) = (0..s)
        .into_par_iter()
        .map(|i| (problem.objective(x, i), problem.constraint(x, i)))
        .unzip();
    if let Some(i) = g.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("constraint value of scenario {i} is NaN")));
    }
    let (quantile, _) = naive_quantile(&g, problem.epsilon())?;
    let objective = ccsgd::scalar::pairwise_sum(&f) / s as f64;
    let eps_data = g.iter().filter(|&&v| v > 0.0).count() as f64 / s as f64;
    Ok(Metrics { objective, quantile, eps_data, eps_true: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Minibatch,
    Batch,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Minibatch => "minibatch",
            Method::Batch => "batch",
        }
    }
}

/// One row of the report: the iterate at the end of a λ stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: usize,
    pub lambda: f64,
    pub metrics: Metrics,
    pub n_update: usize,
    pub stage_g_evals: u64,
    pub total_g_evals: u64,
    pub wall: Duration,
    pub times: PhaseTimes,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: usize,
    pub method: Method,
    pub size_minibatch: usize,
    pub n_epoch: usize,
    pub stages: Vec<StageReport>,
    pub traces: Vec<StageTrace<f64>>,
    pub x: Vec<f64>,
}

impl CellResult {
    pub fn label(&self) -> String {
        match self.method {
            Method::Minibatch => format!("c{:02}_b{}_e{}", self.cell, self.size_minibatch, self.n_epoch),
            Method::Batch => format!("c{:02}_batch_e{}", self.cell, self.n_epoch),
        }
    }
}

pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub instance: Instance,
    pub cells: Vec<CellResult>,
}

fn diff(a: PhaseTimes, b: PhaseTimes) -> PhaseTimes {
    PhaseTimes {
        objective: a.objective.saturating_sub(b.objective),
        constraint: a.constraint.saturating_sub(b.constraint),
        quantile: a.quantile.saturating_sub(b.quantile),
    }
}

fn finish_metrics(
    cfg: &ExperimentConfig,
    instance: &Instance,
    x: &[f64],
) -> Result<Metrics, Error> {
    let mut m = training_metrics(instance.problem(), x)?;
    let count = cfg.test_count();
    if count > 0 {
        m.eps_true = Some(instance.held_out_failure(x, cfg.seed, count)?);
    }
    Ok(m)
}

pub fn solver_config(cfg: &ExperimentConfig, size: usize, n_epoch: usize) -> SolverConfig<f64> {
    let mut sc = SolverConfig::new(size, n_epoch, cfg.step, cfg.lambda.initial, cfg.seed);
    sc.audit = cfg.audit;
    sc.parallel = cfg.parallel;
    sc
}

pub fn run_cell(
    cfg: &ExperimentConfig,
    instance: &Instance,
    cell: usize,
    size: usize,
    n_epoch: usize,
) -> Result<CellResult, RunError> {
    let problem = instance.problem();
    let x0 = cfg.initial.resolve(problem.dim())?;
    let sc = solver_config(cfg, size, n_epoch);
    let schedule = ContinuationSchedule::new(cfg.lambdas()).map_err(RunError::Setup)?;
    let options = ContinuationOptions { reinit_delayed_values: cfg.reinit_delayed_values };
    let mut stages = Vec::new();
    let mut last_times = PhaseTimes::default();
    let mut clock = Instant::now();
    let mut hook = |trace: &StageTrace<f64>, state: &mut ccsgd::Iterate| -> ccsgd::Result<()> {
        let wall = clock.elapsed();
        let times = diff(state.times(), last_times);
        last_times = state.times();
        let metrics = finish_metrics(cfg, instance, state.x())?;
        stages.push(StageReport {
            stage: stages.len(),
            lambda: trace.lambda,
            metrics,
            n_update: trace.summary.updates,
            stage_g_evals: trace.summary.g_eval_count,
            total_g_evals: state.g_eval_count(),
            wall,
            times,
        });
        clock = Instant::now();
        Ok(())
    };
    let run = run_continuation_with(&x0, problem, &sc, &schedule, options, &mut hook).map_err(RunError::Solver)?;
    Ok(CellResult {
        cell,
        method: Method::Minibatch,
        size_minibatch: size,
        n_epoch,
        stages,
        traces: run.stages,
        x: run.x,
    })
}

/// Full-gradient comparison: one step per epoch of the matching minibatch cell.
pub fn run_batch_cell(
    cfg: &ExperimentConfig,
    instance: &Instance,
    cell: usize,
    n_epoch: usize,
) -> Result<CellResult, RunError> {
    let problem = instance.problem();
    let x0 = cfg.initial.resolve(problem.dim())?;
    let mut state = BatchState::new(problem, &x0).map_err(RunError::Solver)?;
    let mut stages = Vec::new();
    let mut last_times = PhaseTimes::default();
    for (stage, lambda) in cfg.lambdas().into_iter().enumerate() {
        let clock = Instant::now();
        let before = state.g_eval_count;
        state.k = 0;
        for _ in 0..n_epoch {
            state.k += 1;
            let alpha = cfg.step.step(state.k);
            batch_step(&mut state, problem, lambda, alpha, PenaltyFunction::QuadraticHinge, cfg.parallel)
                .map_err(RunError::Solver)?;
        }
        let wall = clock.elapsed();
        let metrics = finish_metrics(cfg, instance, &state.x).map_err(RunError::Solver)?;
        stages.push(StageReport {
            stage,
            lambda,
            metrics,
            n_update: n_epoch,
            stage_g_evals: state.g_eval_count - before,
            total_g_evals: state.g_eval_count,
            wall,
            times: diff(state.times, last_times),
        });
        last_times = state.times;
    }
    Ok(CellResult {
        cell,
        method: Method::Batch,
        size_minibatch: problem.scenario_count(),
        n_epoch,
        stages,
        traces: Vec::new(),
        x: state.x,
    })
}

/// Runs every grid cell (in parallel across cells; results are ordered by cell index and do
/// not depend on scheduling).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, RunError> {
    cfg.validate()?;
    cfg.check_grid()?;
    let instance = Instance::build(cfg)?;
    let cells = cfg.grid.cells();
    let mut jobs: Vec<(usize, Method, usize, usize)> =
        cells.iter().enumerate().map(|(i, &(s, e))| (i, Method::Minibatch, s, e)).collect();
    if cfg.compare_batch {
        let mut epochs: Vec<usize> = cells.iter().map(|c| c.1).collect();
        epochs.sort_unstable();
        epochs.dedup();
        jobs.extend(epochs.into_iter().enumerate().map(|(i, e)| (cells.len() + i, Method::Batch, 0, e)));
    }
    let results = jobs
        .par_iter()
        .map(|&(i, method, size, epochs)| match method {
            Method::Minibatch => run_cell(cfg, &instance, i, size, epochs),
            Method::Batch => run_batch_cell(cfg, &instance, i, epochs),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentResult { config: cfg.clone(), instance, cells: results })
}

/// Per-time summary of a fishing control over the training scenarios: mean stock and the
/// stock at the lower `ε` tail.
pub fn fishing_profile(problem: &FishingProblem, u: &[f64]) -> Vec<(f64, Option<f64>, f64, f64)> {
    let params = &problem.model().params;
    let paths: Vec<Vec<f64>> = problem
        .scenarios()
        .as_slice()
        .par_iter()
        .map(|s| fishing::simulate(params, s, u))
        .collect();
    let s = paths.len();
    let tail = ((problem.epsilon() * s as f64).floor() as usize).min(s - 1);
    let dt = params.dt();
    (0..=params.steps)
        .map(|t| {
            let mut col: Vec<f64> = paths.iter().map(|p| p[t]).collect();
            let mean = ccsgd::scalar::pairwise_sum(&col) / s as f64;
            col.sort_by(f64::total_cmp);
            (t as f64 * dt, u.get(t).copied(), mean, col[tail])
        })
        .collect()
}
