//! Continual-learning metrics over the lower-triangular accuracy matrix,
//! energy diagnostics, and per-class memory accounting.

use std::io::Write;

use crate::error::{CppError, Result};
use crate::linalg::{log_sum_exp, Vector};

/// A[i][j]: accuracy on task j's test set after training task i (0-indexed,
/// j <= i), in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Append the accuracy row measured after training one more task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(CppError::Shape(format!(
                "row of {} entries after {} tasks",
                row.len(),
                self.rows.len()
            )));
        }
        for &v in &row {
            if !(0.0..=100.0).contains(&v) {
                return Err(CppError::Config(format!("accuracy {v} outside [0, 100]")));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Result<f64> {
        self.rows
            .get(i)
            .and_then(|r| r.get(j))
            .copied()
            .ok_or_else(|| CppError::IncompleteMatrix(format!("no entry ({i}, {j})")))
    }

    /// Mean of row i (1-indexed session count: i = number of tasks seen).
    pub fn average_accuracy(&self, i: usize) -> Result<f64> {
        if i == 0 || i > self.rows.len() {
            return Err(CppError::IncompleteMatrix(format!(
                "session {i} of {}",
                self.rows.len()
            )));
        }
        let row = &self.rows[i - 1];
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Mean of average_accuracy over every session.
    pub fn macro_average(&self) -> Result<f64> {
        if self.rows.is_empty() {
            return Err(CppError::IncompleteMatrix("no sessions recorded".into()));
        }
        let mut acc = 0.0;
        for i in 1..=self.rows.len() {
            acc += self.average_accuracy(i)?;
        }
        Ok(acc / self.rows.len() as f64)
    }

    /// F_i: mean over earlier tasks j of (best accuracy on j over sessions
    /// before i) minus (accuracy on j at session i). Negative values are
    /// legal and reported as-is.
    pub fn forgetting(&self, i: usize) -> Result<f64> {
        if i == 1 {
            return Err(CppError::UndefinedForgetting);
        }
        if i == 0 || i > self.rows.len() {
            return Err(CppError::IncompleteMatrix(format!(
                "session {i} of {}",
                self.rows.len()
            )));
        }
        let last = &self.rows[i - 1];
        let mut total = 0.0;
        for j in 0..i - 1 {
            let mut best = f64::NEG_INFINITY;
            for jp in j..i - 1 {
                best = best.max(self.rows[jp][j]);
            }
            total += best - last[j];
        }
        Ok(total / (i - 1) as f64)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "session,{}", (0..self.rows.len()).map(|j| format!("task{j}")).collect::<Vec<_>>().join(","))?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut line = format!("{}", i + 1);
            for j in 0..self.rows.len() {
                line.push(',');
                if j < row.len() {
                    line.push_str(&format!("{:.6}", row[j]));
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// E = -tau * log sum exp(s / tau) over similarities to value prototypes;
/// dominated by the largest similarity as tau shrinks.
pub fn energy(sims: &Vector, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CppError::Config(format!("temperature must be positive, got {tau}")));
    }
    let scaled: Vec<f64> = sims.as_slice().iter().map(|s| s / tau).collect();
    Ok(-tau * log_sum_exp(&scaled)?)
}

/// Stored f64 slots attributable to one class: both centroid sets, the
/// augmentation scale, and an equal share of its task's prompt.
pub fn memory_per_class(
    embed_dim: usize,
    max_centroids: usize,
    num_layers: usize,
    prompt_len: usize,
    classes_per_task: usize,
) -> f64 {
    let centroids = 2 * max_centroids * embed_dim;
    let prompt_share = (num_layers * prompt_len * embed_dim) as f64 / classes_per_task as f64;
    centroids as f64 + 1.0 + prompt_share
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Last,
    Macro,
    Both,
}

impl Protocol {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Protocol::Last),
            "macro" => Ok(Protocol::Macro),
            "both" => Ok(Protocol::Both),
            other => Err(CppError::Config(format!(
                "unknown protocol '{other}' (expected last, macro, or both)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Last => "last",
            Protocol::Macro => "macro",
            Protocol::Both => "both",
        }
    }
}

/// Everything a finished run exposes to reporting.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub matrix: AccuracyMatrix,
    pub avg_forward_passes: f64,
    pub extra_params_per_class: f64,
    pub mean_final_energy: Option<f64>,
    /// Fully-resolved configuration echo.
    pub manifest: serde_json::Value,
}

/// Deterministic JSON report. Both accuracy protocols are always present;
/// the protocol field records what the caller asked for. The forgetting
/// field is absent for single-task runs.
pub fn run_report(summary: &RunSummary, protocol: Protocol) -> Result<serde_json::Value> {
    let t = summary.matrix.num_tasks();
    if t == 0 {
        return Err(CppError::IncompleteMatrix("empty run".into()));
    }
    let mut report = serde_json::Map::new();
    report.insert("protocol".into(), protocol.name().into());
    report.insert(
        "avg_acc_last".into(),
        summary.matrix.average_accuracy(t)?.into(),
    );
    report.insert("avg_acc_macro".into(), summary.matrix.macro_average()?.into());
    if t >= 2 {
        report.insert("forgetting_last".into(), summary.matrix.forgetting(t)?.into());
    }
    report.insert("avg_forward_passes".into(), summary.avg_forward_passes.into());
    report.insert(
        "extra_params_per_class".into(),
        summary.extra_params_per_class.into(),
    );
    if let Some(e) = summary.mean_final_energy {
        report.insert("mean_final_energy".into(), e.into());
    }
    report.insert(
        "per_task_rows".into(),
        serde_json::to_value(summary.matrix.rows()).expect("plain numbers"),
    );
    report.insert("manifest".into(), summary.manifest.clone());
    Ok(serde_json::Value::Object(report))
}
