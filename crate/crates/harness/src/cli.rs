//! Command-line front end.

use std::path::{Path, PathBuf};

use ccsgd::io::{fmt_float, read_checkpoint, ScenarioHeader};
use clap::{Args, Parser, Subcommand};

use crate::config::{Application, ConfigError, ExperimentConfig};
use crate::experiment::{run_experiment, Instance, RunError};
use crate::gradcheck::{default_tolerance, gradcheck};
use crate::prices::compare_prices;
use crate::report::{write_outputs, write_scenario_files};

#[derive(Debug, Parser)]
#[command(name = "ccsgd", version, about = "Chance-constrained minibatch solver experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the continuation over every grid cell and write reports.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic scenario gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        points: usize,
        #[arg(long, default_value_t = 4)]
        per_point: usize,
        /// Defaults to 1e-5, or 1e-4 for the separator.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Fishing only: objective and gradient under sampled versus expected prices.
    Prices {
        #[command(flatten)]
        common: Common,
        /// Checkpoint with the control to evaluate; defaults to the configured initial point.
        #[arg(long)]
        control: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "100,1000")]
        sizes: Vec<usize>,
    },
    /// Draw the training scenarios and write them with a JSON header.
    Sample {
        #[command(flatten)]
        common: Common,
    },
    /// Print the resolved configuration as JSON.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file; without it the preset for --app is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub app: Option<Application>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Override a configuration entry, e.g. `--set grid.sizes=[100]`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let cfg = ExperimentConfig::load(path)?;
                if let Some(app) = self.app {
                    if app != cfg.application {
                        return Err(ConfigError::Invalid(format!(
                            "--app {} contradicts application {} in {}",
                            app.name(),
                            cfg.application.name(),
                            path.display()
                        )));
                    }
                }
                cfg
            }
            None => ExperimentConfig::preset(self.app.unwrap_or(Application::Fishing)),
        };
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if !overrides.is_empty() {
            cfg = cfg.with_overrides(&overrides)?;
        }
        Ok(cfg)
    }
}

fn output(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Output(format!("{}: {e}", path.display()))
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), RunError> {
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new("."))).map_err(|e| output(path, e))?;
    let mut w = csv::Writer::from_path(path).map_err(|e| output(path, e))?;
    w.write_record(header).map_err(|e| output(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| output(path, e))?;
    }
    w.flush().map_err(|e| output(path, e))
}

fn cmd_run(common: &Common) -> Result<(), RunError> {
    let cfg = common.resolve()?;
    let result = run_experiment(&cfg)?;
    write_outputs(&result, &common.out)?;
    for c in &result.cells {
        if let Some(last) = c.stages.last() {
            let m = &last.metrics;
            println!(
                "{:<22} objective {:>12.6} q {:>11.3e} eps_data {:.4} eps_true {}",
                c.label(),
                m.objective,
                m.quantile,
                m.eps_data,
                m.eps_true.map_or("-".to_string(), |e| format!("{e:.4}"))
            );
        }
    }
    Ok(())
}

fn cmd_gradcheck(common: &Common, points: usize, per_point: usize, tolerance: Option<f64>) -> Result<(), RunError> {
    let cfg = common.resolve()?;
    let instance = Instance::build(&cfg)?;
    let tol = tolerance.unwrap_or_else(|| default_tolerance(&instance));
    let summary = gradcheck(&instance, points, per_point, cfg.seed, tol)?;
    let rows = summary
        .rows
        .iter()
        .map(|r| {
            vec![
                r.point.to_string(),
                r.scenario.to_string(),
                r.function.name().to_string(),
                r.rel_error.map(fmt_float).unwrap_or_default(),
            ]
        })
        .collect();
    write_rows(&common.out.join("gradcheck.csv"), &["point", "scenario", "function", "rel_error"], rows)?;
    println!(
        "checked {} skipped {} worst {:.3e} tolerance {:.0e} engine mismatches {}",
        summary.checked, summary.skipped, summary.worst, tol, summary.engine_mismatches
    );
    if summary.passed() {
        Ok(())
    } else {
        Err(RunError::CheckFailed(format!(
            "worst relative error {:.3e}, {} engine mismatches",
            summary.worst, summary.engine_mismatches
        )))
    }
}

fn cmd_prices(common: &Common, control: Option<&Path>, sizes: &[usize]) -> Result<(), RunError> {
    let cfg = common.resolve()?;
    if cfg.application != Application::Fishing {
        return Err(ConfigError::Invalid("the price comparison needs the fishing application".into()).into());
    }
    let params = &cfg.fishing.params;
    let u = match control {
        Some(path) => read_checkpoint(path).map_err(RunError::Setup)?,
        None => cfg.initial.resolve(params.steps)?,
    };
    let cmp = compare_prices(params, &cfg.fishing.distribution, &u, sizes, cfg.seed).map_err(RunError::Setup)?;
    let dt = params.dt();
    let mut grad_rows = Vec::new();
    let mut summary = Vec::new();
    for c in &cmp {
        let rel = c.relative_errors();
        for t in 0..params.steps {
            grad_rows.push(vec![
                c.size.to_string(),
                fmt_float(t as f64 * dt),
                fmt_float(c.grad_sampled[t]),
                fmt_float(c.grad_expected[t]),
                fmt_float(rel[t]),
            ]);
        }
        let max_rel = rel.iter().copied().fold(0.0, f64::max);
        println!(
            "size {:>5}: objective sampled {:.6} expected {:.6} gap {:.3e}; max relative gradient error {:.3e}",
            c.size,
            c.objective_sampled,
            c.objective_expected,
            c.objective_gap(),
            max_rel
        );
        summary.push(vec![
            c.size.to_string(),
            fmt_float(c.objective_sampled),
            fmt_float(c.objective_expected),
            fmt_float(c.objective_gap()),
            fmt_float(max_rel),
        ]);
    }
    write_rows(
        &common.out.join("prices_gradient.csv"),
        &["size", "t", "grad_sampled", "grad_expected", "rel_error"],
        grad_rows,
    )?;
    write_rows(
        &common.out.join("prices_summary.csv"),
        &["size", "objective_sampled", "objective_expected", "objective_gap", "max_rel_grad_error"],
        summary,
    )
}

fn cmd_sample(common: &Common) -> Result<(), RunError> {
    let cfg = common.resolve()?;
    let instance = Instance::build(&cfg)?;
    let app = cfg.application.name().to_string();
    let header = |dimension, distribution| ScenarioHeader {
        application: app.clone(),
        count: cfg.scenarios,
        dimension,
        seed: cfg.seed,
        distribution,
    };
    match &instance {
        Instance::Fishing { problem, distribution } => write_scenario_files(
            &common.out,
            &header(problem.scenarios().scenario_dim(), json(distribution)),
            problem.scenarios(),
        ),
        Instance::Separator { problem, distribution } => write_scenario_files(
            &common.out,
            &header(problem.scenarios().scenario_dim(), json(distribution)),
            problem.scenarios(),
        ),
        Instance::Gas { problem, law } => write_scenario_files(
            &common.out,
            &header(problem.scenarios().scenario_dim(), json(law)),
            problem.scenarios(),
        ),
    }?;
    println!("wrote {} {} scenarios to {}", cfg.scenarios, app, common.out.display());
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// Runs a parsed command; the return value is the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Run { common } => cmd_run(common),
        Command::Gradcheck { common, points, per_point, tolerance } => {
            cmd_gradcheck(common, *points, *per_point, *tolerance)
        }
        Command::Prices { common, control, sizes } => cmd_prices(common, control.as_deref(), sizes),
        Command::Sample { common } => cmd_sample(common),
        Command::Config { common } => common.resolve().map(|c| println!("{}", c.to_pretty_json())).map_err(Into::into),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
