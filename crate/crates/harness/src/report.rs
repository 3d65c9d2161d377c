//! Output files of a run. `report.csv` holds only deterministic quantities so that two runs
//! with the same configuration produce identical bytes; wall times go to `timing.csv`.

use std::fs;
use std::path::Path;

use ccsgd::apps::ScenarioRecord;
use ccsgd::io::{fmt_float, write_checkpoint, write_scenarios_csv, write_trace_file, ScenarioHeader};
use ccsgd::ScenarioSet;

use crate::experiment::{fishing_profile, CellResult, ExperimentResult, Instance, RunError};

pub const REPORT_COLUMNS: [&str; 16] = [
    "application",
    "cell",
    "method",
    "size_minibatch",
    "n_epoch",
    "diagonal",
    "stage",
    "lambda",
    "objective",
    "quantile",
    "eps_data",
    "eps_true",
    "n_update",
    "stage_g_evals",
    "total_g_evals",
    "epochs",
];

fn out_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Output(format!("{}: {e}", path.display()))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `n_epoch / size` in lowest terms; cells on one diagonal share the ratio.
pub fn diagonal(n_epoch: usize, size: usize) -> String {
    let g = gcd(n_epoch, size).max(1);
    format!("{}/{}", n_epoch / g, size / g)
}

pub fn report_rows(result: &ExperimentResult) -> Vec<Vec<String>> {
    let app = result.config.application.name();
    let s = result.config.scenarios as f64;
    let mut rows = Vec::new();
    for c in &result.cells {
        for st in &c.stages {
            let m = &st.metrics;
            rows.push(vec![
                app.to_string(),
                c.cell.to_string(),
                c.method.name().to_string(),
                c.size_minibatch.to_string(),
                c.n_epoch.to_string(),
                diagonal(c.n_epoch, c.size_minibatch),
                st.stage.to_string(),
                fmt_float(st.lambda),
                fmt_float(m.objective),
                fmt_float(m.quantile),
                fmt_float(m.eps_data),
                m.eps_true.map(fmt_float).unwrap_or_default(),
                st.n_update.to_string(),
                st.stage_g_evals.to_string(),
                st.total_g_evals.to_string(),
                fmt_float(st.total_g_evals as f64 / s),
            ]);
        }
    }
    rows
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| out_err(path, e))?;
    w.write_record(header).map_err(|e| out_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| out_err(path, e))?;
    }
    w.flush().map_err(|e| out_err(path, e))
}

fn write_timing(path: &Path, cells: &[CellResult]) -> Result<(), RunError> {
    let rows: Vec<Vec<String>> = cells
        .iter()
        .flat_map(|c| {
            c.stages.iter().map(move |st| {
                vec![
                    c.cell.to_string(),
                    c.label(),
                    st.stage.to_string(),
                    format!("{:.6}", st.wall.as_secs_f64()),
                    format!("{:.6}", st.times.objective.as_secs_f64()),
                    format!("{:.6}", st.times.constraint.as_secs_f64()),
                    format!("{:.6}", st.times.quantile.as_secs_f64()),
                ]
            })
        })
        .collect();
    write_csv(
        path,
        &["cell", "label", "stage", "wall_s", "objective_s", "constraint_s", "quantile_s"],
        &rows,
    )
}

fn write_solution(path: &Path, instance: &Instance, x: &[f64]) -> Result<(), RunError> {
    let rows: Vec<Vec<String>> = match instance {
        Instance::Fishing { problem, .. } => fishing_profile(problem, x)
            .into_iter()
            .map(|(t, u, mean, low)| vec![fmt_float(t), u.map(fmt_float).unwrap_or_default(), fmt_float(mean), fmt_float(low)])
            .collect(),
        _ => x.iter().enumerate().map(|(i, v)| vec![i.to_string(), fmt_float(*v)]).collect(),
    };
    match instance {
        Instance::Fishing { .. } => write_csv(path, &["t", "u", "x_mean", "x_tail"], &rows),
        _ => write_csv(path, &["index", "value"], &rows),
    }
}

/// Writes `config.json`, `report.csv`, `timing.csv`, and per cell the trace, the solution
/// summary, and a checkpoint of the final iterate.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, result.config.to_pretty_json() + "\n").map_err(|e| out_err(&cfg_path, e))?;
    write_csv(&dir.join("report.csv"), &REPORT_COLUMNS, &report_rows(result))?;
    write_timing(&dir.join("timing.csv"), &result.cells)?;
    for c in &result.cells {
        let label = c.label();
        if result.config.write_traces && !c.traces.is_empty() {
            let p = dir.join(format!("trace_{label}.csv"));
            write_trace_file(&c.traces, &p).map_err(|e| out_err(&p, e))?;
        }
        write_solution(&dir.join(format!("solution_{label}.csv")), &result.instance, &c.x)?;
        let p = dir.join(format!("x_{label}.txt"));
        write_checkpoint(&c.x, &p).map_err(|e| out_err(&p, e))?;
    }
    Ok(())
}

/// `scenarios_<app>.csv` plus its `scenarios_<app>.json` header.
pub fn write_scenario_files<S: ScenarioRecord + ccsgd::problem::ScenarioDim>(
    dir: &Path,
    header: &ScenarioHeader,
    set: &ScenarioSet<S>,
) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
    let csv_path = dir.join(format!("scenarios_{}.csv", header.application));
    let file = fs::File::create(&csv_path).map_err(|e| out_err(&csv_path, e))?;
    write_scenarios_csv(set, std::io::BufWriter::new(file)).map_err(|e| out_err(&csv_path, e))?;
    let json_path = dir.join(format!("scenarios_{}.json", header.application));
    let text = serde_json::to_string_pretty(header).map_err(|e| out_err(&json_path, e))?;
    fs::write(&json_path, text + "\n").map_err(|e| out_err(&json_path, e))
}
