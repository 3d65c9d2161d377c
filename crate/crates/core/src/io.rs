//! Text formats: per-update traces, iterate checkpoints, scenario matrices.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::apps::ScenarioRecord;
use crate::error::{Error, Result};
use crate::problem::ScenarioSet;
use crate::scalar::Scalar;
use crate::solver::StageTrace;

/// Decimal with 17 significant digits; parses back to the same `f64`.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub const TRACE_COLUMNS: [&str; 7] = ["lambda", "k", "epoch", "q_k", "step", "objective_estimate", "gap_if_audited"];

/// One row per update, stages in order. Unaudited rows leave the gap column empty.
pub fn write_trace_csv<T: Scalar, W: Write>(stages: &[StageTrace<T>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(TRACE_COLUMNS).map_err(fmt_err)?;
    for stage in stages {
        let lambda = fmt_float(stage.lambda.as_f64());
        for r in &stage.records {
            w.write_record([
                lambda.clone(),
                r.k.to_string(),
                r.epoch.to_string(),
                fmt_float(r.quantile.as_f64()),
                fmt_float(r.step.as_f64()),
                fmt_float(r.objective_estimate.as_f64()),
                r.gap.map(|g| fmt_float(g.as_f64())).unwrap_or_default(),
            ])
            .map_err(fmt_err)?;
        }
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn write_trace_file<T: Scalar>(stages: &[StageTrace<T>], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace_csv(stages, BufWriter::new(file))
}

const CHECKPOINT_MAGIC: &str = "# ccsgd checkpoint v1";

/// Header line, `dim <n>`, then one value per line.
pub fn write_checkpoint<T: Scalar>(x: &[T], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{CHECKPOINT_MAGIC}").map_err(io)?;
    writeln!(w, "dim {}", x.len()).map_err(io)?;
    for v in x {
        writeln!(w, "{}", fmt_float(v.as_f64())).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut next = || -> Result<Option<String>> { lines.next().transpose().map_err(|e| Error::io(path, e)) };
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if next()?.as_deref() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("missing checkpoint header"));
    }
    let dim: usize = next()?
        .and_then(|l| l.strip_prefix("dim ").and_then(|d| d.trim().parse().ok()))
        .ok_or_else(|| bad("missing dimension line"))?;
    let mut x = Vec::with_capacity(dim);
    while let Some(line) = next()? {
        if line.trim().is_empty() {
            continue;
        }
        let v: f64 = line.trim().parse().map_err(|_| bad(&format!("bad value {line:?}")))?;
        x.push(T::lit(v));
    }
    if x.len() != dim {
        return Err(bad(&format!("expected {dim} values, found {}", x.len())));
    }
    Ok(x)
}

/// Metadata written next to a scenario matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioHeader {
    pub application: String,
    pub count: usize,
    pub dimension: usize,
    pub seed: u64,
    pub distribution: serde_json::Value,
}

/// CSV matrix, one scenario per row.
pub fn write_scenarios_csv<S: ScenarioRecord, W: Write>(set: &ScenarioSet<S>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(set.get(0).field_names()).map_err(fmt_err)?;
    for s in set.iter() {
        w.write_record(s.to_row().into_iter().map(fmt_float)).map_err(fmt_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Reads a scenario matrix back as rows of numbers.
pub fn read_scenario_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::Format(format!("bad number {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{StageSummary, UpdateRecord};

    #[test]
    fn floats_round_trip() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 123456.789, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(fmt_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        let x = vec![0.1, 2.0 / 3.0, -5e-7];
        write_checkpoint(&x, &path).unwrap();
        assert_eq!(read_checkpoint::<f64>(&path).unwrap(), x);
        std::fs::write(&path, "# ccsgd checkpoint v1\ndim 2\n1.0\n").unwrap();
        assert!(read_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let stage = StageTrace {
            lambda: 10.0,
            records: vec![
                UpdateRecord { k: 1, epoch: 0, quantile: 0.5, step: 0.01, objective_estimate: -1.0, gap: None },
                UpdateRecord { k: 2, epoch: 0, quantile: 0.25, step: 0.01, objective_estimate: -1.5, gap: Some(0.0) },
            ],
            summary: StageSummary { lambda: 10.0, x: vec![], final_quantile: 0.25, updates: 2, g_eval_count: 4, epochs: 1 },
        };
        let mut buf = Vec::new();
        write_trace_csv(&[stage], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "lambda,k,epoch,q_k,step,objective_estimate,gap_if_audited");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(','));
        assert!(lines[2].starts_with("1.0000000000000000e1,2,0,2.5000000000000000e-1"));
    }
}
