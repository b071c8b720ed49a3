//! Multi-run aggregation and plain-text result tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::drift::{AccuracyMetric, AccuracyReport, DriftReport};
use crate::pipeline::RunOutcome;

pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

/// One metric across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub per_run: Vec<f64>,
    pub average: f64,
}

/// Per-run values of each metric plus their mean. `best_run` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTable {
    pub title: String,
    pub rows: Vec<MetricRow>,
    pub best_run: usize,
}

impl RunTable {
    pub fn columns(&self) -> usize {
        self.rows.first().map_or(0, |r| r.per_run.len() + 1)
    }

    pub fn row(&self, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn render(&self) -> String {
        let runs = self.rows.first().map_or(0, |r| r.per_run.len());
        let width = self.rows.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        writeln!(out, "{}", self.title).unwrap();
        write!(out, "{:width$}", "Metric").unwrap();
        for r in 1..=runs {
            let label = if r == self.best_run { format!("R{r}*") } else { format!("R{r}") };
            write!(out, " {label:>8}").unwrap();
        }
        writeln!(out, " {:>8}", "Average").unwrap();
        for row in &self.rows {
            write!(out, "{:width$}", row.metric).unwrap();
            for v in &row.per_run {
                write!(out, " {:>8}", percent(*v)).unwrap();
            }
            writeln!(out, " {:>8}", percent(row.average)).unwrap();
        }
        out
    }
}

fn percent(v: f64) -> String {
    format!("{:.2}%", v * 100.0)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Builds a table from named per-run rows; the best run has the highest
/// mean over rows, ties going to the earlier run.
pub fn table_from_rows(title: &str, rows: Vec<(String, Vec<f64>)>) -> RunTable {
    let runs = rows.first().map_or(0, |r| r.1.len());
    assert!(rows.iter().all(|r| r.1.len() == runs), "every row needs one value per run");
    let mut best_run = 1;
    let mut best = f64::NEG_INFINITY;
    for r in 0..runs {
        let score = mean(&rows.iter().map(|row| row.1[r]).collect::<Vec<_>>());
        if score > best {
            best = score;
            best_run = r + 1;
        }
    }
    RunTable {
        title: title.to_string(),
        rows: rows
            .into_iter()
            .map(|(metric, per_run)| MetricRow {
                average: mean(&per_run),
                metric,
                per_run,
            })
            .collect(),
        best_run,
    }
}

/// The four accuracy metrics over runs R1..Rk with an average column.
///
/// Panics on an empty slice.
pub fn aggregate_runs(title: &str, reports: &[AccuracyReport]) -> RunTable {
    assert!(!reports.is_empty(), "aggregate_runs needs at least one report");
    let rows = AccuracyMetric::ALL
        .iter()
        .map(|&m| (m.name().to_string(), reports.iter().map(|r| r.get(m)).collect()))
        .collect();
    table_from_rows(title, rows)
}

/// Everything the report stage writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub training: RunTable,
    pub stable: RunTable,
    pub change: Option<RunTable>,
    pub change_all: Option<RunTable>,
    pub runs: Vec<RunOutcome>,
    pub drift: Vec<DriftReport>,
}

impl PipelineReport {
    /// Panics without outcomes.
    pub fn new(runs: Vec<RunOutcome>, drift: Vec<DriftReport>) -> Self {
        let training = table_from_rows(
            "Training and validation accuracy (all samples)",
            vec![
                ("Training".into(), runs.iter().map(|o| o.training.accuracy_all).collect()),
                ("Validation".into(), runs.iter().map(|o| o.validation.accuracy_all).collect()),
            ],
        );
        let stable = aggregate_runs(
            "Stable versions (days 4-7)",
            &runs.iter().map(|o| o.stable.clone()).collect::<Vec<_>>(),
        );
        let collect = |f: fn(&RunOutcome) -> Option<&AccuracyReport>| -> Option<Vec<AccuracyReport>> {
            runs.iter().map(|o| f(o).cloned()).collect()
        };
        let change = collect(|o| o.change.as_ref()).map(|r| aggregate_runs("Version changes visible on the wire (days 8-11)", &r));
        let change_all = collect(|o| o.change_all.as_ref()).map(|r| aggregate_runs("All updated devices (days 8-11)", &r));
        Self {
            training,
            stable,
            change,
            change_all,
            runs,
            drift,
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in [Some(&self.training), Some(&self.stable), self.change.as_ref(), self.change_all.as_ref()]
            .into_iter()
            .flatten()
        {
            out.push_str(&t.render());
            out.push('\n');
        }
        if let Some(best) = self.drift.get(self.stable.best_run - 1) {
            out.push_str(&render_drift(best, self.stable.best_run));
        }
        out
    }
}

/// Per device-day detail of one run: sample counts, means and Hedges' g.
pub fn render_drift(report: &DriftReport, run: usize) -> String {
    let mut out = String::new();
    writeln!(out, "Per-day detail, run R{run}").unwrap();
    writeln!(
        out,
        "{:<12} {:>4} {:>6} {:>6} {:>10} {:>10} {:>10} {:>11} {:>7} {:>8}",
        "Device", "Day", "Below", "Above", "Mean", "Base mean", "g", "Effect", "Change", "Truth"
    )
    .unwrap();
    for d in &report.days {
        writeln!(
            out,
            "{:<12} {:>4} {:>6} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>11} {:>7} {:>8}",
            d.device_id,
            d.day_index,
            d.below,
            d.above,
            d.mean,
            d.hedges.group2_mean,
            d.hedges.g,
            format!("{:?}", d.hedges.effect_label),
            if d.change_verdict { "yes" } else { "no" },
            d.truth.map_or_else(|| "-".to_string(), |t| format!("{t:?}")),
        )
        .unwrap();
    }
    out
}
