//! CSV artifacts.
//!
//! Every float is written as `{:.16e}`, which round-trips `f64` exactly, so
//! a pipeline split across processes (sample, then post-process, then
//! diagnose) computes on bit-identical values. Readers validate headers and
//! shapes strictly; a stale or mismatched artifact should fail fast, not
//! feed the next stage quietly.
//!
//! Chain tables carry no iteration column: rows are the retained states in
//! order, and samples.csv/gradients.csv align row by row. Column names are
//! one-based (`theta_1..theta_d`, `g_1..g_d`).

use std::path::Path;

use crate::bounds::BoundReport;
use crate::diagnostics::MetricSeries;
use crate::error::{Error, Result};
use crate::estimators::CenteringState;
use crate::model::{Dataset, ParamVector};
use crate::sampler::ChainRecord;
use crate::zv::{TestFunction, ZvCorrection};

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn from_csv(path: &Path, e: csv::Error) -> Error {
    let name = path_str(path);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(name, io),
        other => Error::format(name, format!("{other:?}")),
    }
}

fn parse_f64(path: &Path, row: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::format(path_str(path), format!("row {row}: `{field}` is not a number")))
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| from_csv(path, e))
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::Reader::from_path(path).map_err(|e| from_csv(path, e))
}

fn write_value_table<'a>(
    path: &Path,
    prefix: &str,
    dim: usize,
    rows: impl Iterator<Item = &'a [f64]>,
) -> Result<()> {
    let mut w = writer(path)?;
    let header: Vec<String> = (1..=dim).map(|j| format!("{prefix}_{j}")).collect();
    w.write_record(&header).map_err(|e| from_csv(path, e))?;
    for row in rows {
        let fields: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        w.write_record(&fields).map_err(|e| from_csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path_str(path), e))
}

/// Retained chain states, one row each: `theta_1,...,theta_d`.
pub fn write_samples_csv(path: &Path, record: &ChainRecord) -> Result<()> {
    write_value_table(path, "theta", record.dim(), record.rows())
}

/// Gradient estimates aligned row by row with the samples: `g_1,...,g_d`.
pub fn write_gradients_csv(path: &Path, record: &ChainRecord) -> Result<()> {
    let rows = record.gradient_rows().ok_or_else(|| {
        Error::Capability("the chain was run without gradient recording".into())
    })?;
    write_value_table(path, "g", record.dim(), rows)
}

/// A table read back from [`write_samples_csv`] or [`write_gradients_csv`].
#[derive(Debug, Clone)]
pub struct SampleTable {
    pub values: Vec<f64>,
    pub dim: usize,
}

impl SampleTable {
    pub fn rows(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        assert!(j < self.dim);
        self.values.chunks_exact(self.dim).map(|row| row[j]).collect()
    }
}

/// Reads a table whose columns are named `{prefix}_1,...,{prefix}_d`.
pub fn read_sample_table(path: &Path, prefix: &str) -> Result<SampleTable> {
    let mut r = reader(path)?;
    let headers = r.headers().map_err(|e| from_csv(path, e))?.clone();
    if headers.is_empty() {
        return Err(Error::format(
            path_str(path),
            format!("expected `{prefix}_1..` columns"),
        ));
    }
    let dim = headers.len();
    for j in 0..dim {
        let expected = format!("{prefix}_{}", j + 1);
        if &headers[j] != expected.as_str() {
            return Err(Error::format(
                path_str(path),
                format!("column {} is `{}`, expected `{expected}`", j + 1, &headers[j]),
            ));
        }
    }
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (idx, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| from_csv(path, e))?;
        if rec.len() != dim {
            return Err(Error::format(
                path_str(path),
                format!("row {idx} has {} fields, expected {dim}", rec.len()),
            ));
        }
        for field in rec.iter() {
            values.push(parse_f64(path, idx, field)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::format(path_str(path), "no data rows".to_string()));
    }
    Ok(SampleTable { values, dim })
}

/// Persists a centering point as the pair theta_hat.csv + grad_hat.csv, each
/// a single-row table (`theta_1..` resp. `g_1..`).
pub fn write_centering_csvs(
    theta_path: &Path,
    grad_path: &Path,
    centering: &CenteringState,
) -> Result<()> {
    let theta = centering.theta_hat();
    let grad = centering.grad_full();
    write_value_table(theta_path, "theta", theta.dim(), std::iter::once(&theta[..]))?;
    write_value_table(grad_path, "g", grad.dim(), std::iter::once(&grad[..]))
}

fn read_single_row(path: &Path, prefix: &str) -> Result<ParamVector> {
    let table = read_sample_table(path, prefix)?;
    if table.rows() != 1 {
        return Err(Error::format(
            path_str(path),
            format!("expected exactly one row, found {}", table.rows()),
        ));
    }
    ParamVector::new(table.values)
}

/// Reads the pair written by [`write_centering_csvs`]. The values still need
/// to be checked against a model via `CenteringState::from_parts`.
pub fn read_centering_csvs(theta_path: &Path, grad_path: &Path) -> Result<(ParamVector, ParamVector)> {
    let theta = read_single_row(theta_path, "theta")?;
    let grad = read_single_row(grad_path, "g")?;
    if theta.dim() != grad.dim() {
        return Err(Error::format(
            path_str(grad_path),
            format!(
                "gradient has dimension {}, centering point has {}",
                grad.dim(),
                theta.dim()
            ),
        ));
    }
    Ok((theta, grad))
}

/// Data records, features first: `x_1,...` plus a trailing `y` column when
/// `label_last` is set.
pub fn write_dataset_csv(path: &Path, dataset: &Dataset, label_last: bool) -> Result<()> {
    let mut w = writer(path)?;
    let width = dataset.width();
    if label_last && width < 2 {
        return Err(Error::Argument(
            "a labelled dataset needs at least one feature column".into(),
        ));
    }
    let features = if label_last { width - 1 } else { width };
    let mut header: Vec<String> = (1..=features).map(|j| format!("x_{j}")).collect();
    if label_last {
        header.push("y".to_string());
    }
    w.write_record(&header).map_err(|e| from_csv(path, e))?;
    for record in dataset.records() {
        let fields: Vec<String> = record.iter().map(|v| fmt_f64(*v)).collect();
        w.write_record(&fields).map_err(|e| from_csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path_str(path), e))
}

/// Reads any numeric CSV with a header row into a dataset.
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let mut r = reader(path)?;
    let headers = r.headers().map_err(|e| from_csv(path, e))?.clone();
    if headers.iter().any(|h| h.trim().parse::<f64>().is_ok()) {
        return Err(Error::format(
            path_str(path),
            "first row looks numeric; datasets need a header row".to_string(),
        ));
    }
    let width = headers.len();
    let mut flat = Vec::new();
    let mut rows = 0usize;
    for (idx, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| from_csv(path, e))?;
        if rec.len() != width {
            return Err(Error::format(
                path_str(path),
                format!("row {idx} has {} fields, expected {width}", rec.len()),
            ));
        }
        for field in rec.iter() {
            flat.push(parse_f64(path, idx, field)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::format(path_str(path), "no data rows".to_string()));
    }
    Dataset::from_flat(flat, width)
}

/// Long-format metric trace: `iteration,metric,value`.
pub fn write_metrics_csv(path: &Path, series: &[MetricSeries]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iteration", "metric", "value"])
        .map_err(|e| from_csv(path, e))?;
    for s in series {
        for (iteration, value) in &s.points {
            w.write_record([iteration.to_string().as_str(), s.name.as_str(), &fmt_f64(*value)])
                .map_err(|e| from_csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path_str(path), e))
}

/// Per-function correction summary: `function,raw_mean,corrected_mean,
/// raw_variance,corrected_variance,reduction_factor,a_1,...`.
pub fn write_zv_report_csv(path: &Path, report: &[(TestFunction, ZvCorrection)]) -> Result<()> {
    if report.is_empty() {
        return Err(Error::Argument("nothing to report".into()));
    }
    let dim = report[0].1.coefficients.len();
    let mut w = writer(path)?;
    let mut header = vec![
        "function".to_string(),
        "raw_mean".to_string(),
        "corrected_mean".to_string(),
        "raw_variance".to_string(),
        "corrected_variance".to_string(),
        "reduction_factor".to_string(),
    ];
    header.extend((1..=dim).map(|j| format!("a_{j}")));
    w.write_record(&header).map_err(|e| from_csv(path, e))?;
    for (function, c) in report {
        if c.coefficients.len() != dim {
            return Err(Error::Argument(
                "corrections in one report must share a dimension".into(),
            ));
        }
        let mut fields = vec![
            function.to_string(),
            fmt_f64(c.raw_mean),
            fmt_f64(c.corrected_mean),
            fmt_f64(c.raw_variance),
            fmt_f64(c.corrected_variance),
            fmt_f64(c.variance_ratio()),
        ];
        fields.extend(c.coefficients.iter().map(|a| fmt_f64(*a)));
        w.write_record(&fields).map_err(|e| from_csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path_str(path), e))
}

/// Corrected series side by side, one column per test function, rows aligned
/// with the input chain.
pub fn write_corrected_csv(path: &Path, columns: &[(String, &[f64])]) -> Result<()> {
    if columns.is_empty() {
        return Err(Error::Argument("nothing to write".into()));
    }
    let rows = columns[0].1.len();
    if columns.iter().any(|(_, c)| c.len() != rows) {
        return Err(Error::Argument("corrected series must share a length".into()));
    }
    let mut w = writer(path)?;
    let header: Vec<&str> = columns.iter().map(|(label, _)| label.as_str()).collect();
    w.write_record(&header).map_err(|e| from_csv(path, e))?;
    for s in 0..rows {
        let fields: Vec<String> = columns.iter().map(|(_, c)| fmt_f64(c[s])).collect();
        w.write_record(&fields).map_err(|e| from_csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path_str(path), e))
}

/// Long-format `quantity,value` rendering of a [`BoundReport`].
pub fn write_bound_report_csv(path: &Path, report: &BoundReport) -> Result<()> {
    let rows = [
        ("h_max", fmt_f64(report.stepsize_cap)),
        ("budget_stepsize", fmt_f64(report.budget.stepsize)),
        ("budget_iterations", report.budget.iterations.to_string()),
        ("budget_batch", report.budget.batch_size.to_string()),
        ("contraction_a", fmt_f64(report.triple.a)),
        ("noise_b", fmt_f64(report.triple.b)),
        ("discretization_c", fmt_f64(report.triple.c)),
        ("initial_distance", fmt_f64(report.initial_distance)),
        ("envelope_at_budget", fmt_f64(report.envelope_at_budget)),
        ("guarantee", fmt_f64(report.guarantee)),
        (
            "iteration_batch_product",
            fmt_f64(report.iteration_batch_product),
        ),
    ];
    let mut w = writer(path)?;
    w.write_record(["quantity", "value"])
        .map_err(|e| from_csv(path, e))?;
    for (quantity, value) in rows {
        w.write_record([quantity, value.as_str()])
            .map_err(|e| from_csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path_str(path), e))
}
