//! Side-by-side comparison of controllers run on the same scenario and seed.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::TrajectoryLog;

pub const METRIC_NAMES: [&str; 6] = [
    "completion_time",
    "total_deviation_integral",
    "max_individual_deviation",
    "deviation_active_duration",
    "relaxed_step_count",
    "min_pairwise_distance",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub controller: String,
    /// Values in [`METRIC_NAMES`] order; `None` for a missing completion time.
    pub values: [Option<f64>; 6],
}

/// `100 · (other − reference) / |reference|` per metric.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub label: String,
    pub reference: String,
    pub percent: [Option<f64>; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub deltas: Vec<DeltaRow>,
}

fn percent_delta(reference: Option<f64>, other: Option<f64>) -> Option<f64> {
    match (reference, other) {
        (Some(r), Some(o)) if r == o => Some(0.0),
        (Some(r), Some(o)) if r != 0.0 => Some(100.0 * (o - r) / r.abs()),
        _ => None,
    }
}

/// Build the comparison. All logs must share initial state, targets and seed.
pub fn compare(logs: &[(&str, &TrajectoryLog)]) -> Result<Comparison> {
    let Some((_, first)) = logs.first() else {
        return Err(Error::invalid("nothing to compare"));
    };
    for (label, log) in &logs[1..] {
        let same_start = match (first.steps.first(), log.steps.first()) {
            (Some(a), Some(b)) => a.agents == b.agents,
            (None, None) => true,
            _ => false,
        };
        if !same_start || log.targets != first.targets || log.config.seed != first.config.seed {
            return Err(Error::invalid(format!(
                "log {label:?} does not share the scenario and seed of {:?}",
                logs[0].0
            )));
        }
    }
    let rows: Vec<ComparisonRow> = logs
        .iter()
        .map(|(label, log)| {
            let m = &log.metrics;
            ComparisonRow {
                label: label.to_string(),
                controller: log.config.controller.to_string(),
                values: [
                    m.completion_time,
                    Some(m.total_deviation_integral),
                    Some(m.max_individual_deviation),
                    Some(m.deviation_active_duration),
                    Some(m.relaxed_step_count as f64),
                    Some(m.min_pairwise_distance),
                ],
            }
        })
        .collect();
    let mut deltas = Vec::new();
    for (k, reference) in rows.iter().enumerate() {
        for other in &rows[k + 1..] {
            let mut percent = [None; 6];
            for (m, p) in percent.iter_mut().enumerate() {
                *p = percent_delta(reference.values[m], other.values[m]);
            }
            deltas.push(DeltaRow {
                label: other.label.clone(),
                reference: reference.label.clone(),
                percent,
            });
        }
    }
    Ok(Comparison { rows, deltas })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// `compare.csv`: one `metrics` row per controller, then one `delta_pct`
    /// row per ordered pair.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["row_type", "label", "reference", "controller"];
        header.extend(METRIC_NAMES);
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                "metrics".to_string(),
                r.label.clone(),
                String::new(),
                r.controller.clone(),
            ];
            rec.extend(r.values.iter().map(|v| cell(*v)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        for d in &self.deltas {
            let mut rec = vec![
                "delta_pct".to_string(),
                d.label.clone(),
                d.reference.clone(),
                String::new(),
            ];
            rec.extend(d.percent.iter().map(|v| cell(*v)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(
                self.deltas
                    .iter()
                    .map(|d| d.label.len() + d.reference.len() + 4),
            )
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}", "label");
        for m in METRIC_NAMES {
            let _ = write!(out, "  {m:>26}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<label_w$}", r.label);
            for v in r.values {
                let _ = write!(out, "  {:>26}", fmt(v));
            }
            out.push('\n');
        }
        for d in &self.deltas {
            let _ = write!(
                out,
                "{:<label_w$}",
                format!("{} vs {}", d.label, d.reference)
            );
            for v in d.percent {
                let _ = write!(
                    out,
                    "  {:>26}",
                    v.map(|x| format!("{x:+.2}%")).unwrap_or_else(|| "-".into())
                );
            }
            out.push('\n');
        }
        out
    }
}
