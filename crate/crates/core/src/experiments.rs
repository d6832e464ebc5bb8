//! Scripted method comparisons on synthetic data.
//!
//! A plan names a synthetic data family, a ladder of dataset sizes and a set
//! of sampler configurations; [`run_comparison`] runs every (size, method,
//! replication) cell, traces held-out log predictive density along each
//! chain, and reports the number of per-datum gradient evaluations each
//! method needed to get within a fixed offset of the best density any method
//! reached on that dataset. Setup work (descent to the centering point, the
//! full gradient there, table fills) is charged to the method that incurred
//! it, so the numbers are comparable across estimators.
//!
//! [`run_zv_comparison`] instead reruns each configuration over several
//! seeds with gradient recording on and tabulates the variance of one test
//! statistic before and after the zero-variance correction.
//!
//! Everything is derived from the plan's master seed through named streams,
//! so a rerun of the same plan reproduces every output file byte for byte.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::diagnostics::{gradient_noise_variance, MetricSeries, NoiseProbe, PredictiveDensity};
use crate::error::{Error, Result};
use crate::estimators::{CacheMode, CenteringState};
use crate::io;
use crate::model::{BuiltinModel, Dataset, GaussianModel, GradientModel, LogisticModel, ParamVector};
use crate::optimizer::{find_centering, run_sgd, BatchMode, SgdConfig, StepSchedule};
use crate::rng;
use crate::sampler::{run_chain, ChainRecord, EstimatorKind, SamplerConfig};
use crate::zv::{apply_zv, TestFunction, ZvInput, ZvOptions};

/// Which synthetic family to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// `x_i ~ N(θ*, I)` with `θ*` from [`synthetic_gaussian_center`].
    Gaussian,
    /// `x_i ~ N(0, I)`, labels `y_i ∈ {−1, 1}` drawn from the logistic
    /// likelihood at the coefficients from [`synthetic_logistic_truth`].
    Logistic,
}

/// Ground-truth location of the Gaussian generator: every coordinate 0.5.
pub fn synthetic_gaussian_center(dim: usize) -> Vec<f64> {
    vec![0.5; dim]
}

/// Ground-truth coefficients of the logistic generator:
/// `β*_j = (−1)^j (d − j)/d`, alternating in sign and decaying from 1.
pub fn synthetic_logistic_truth(dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * (dim - j) as f64 / dim as f64
        })
        .collect()
}

/// Draws a synthetic dataset; the same arguments always produce the same
/// records.
pub fn generate_synthetic(
    kind: SyntheticKind,
    num_records: usize,
    dim: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_records == 0 || dim == 0 {
        return Err(Error::Argument(
            "synthetic data needs at least one record and one dimension".into(),
        ));
    }
    let mut rng = rng::stream(seed, "synthetic");
    match kind {
        SyntheticKind::Gaussian => {
            let center = synthetic_gaussian_center(dim);
            let mut flat = Vec::with_capacity(num_records * dim);
            for _ in 0..num_records {
                for c in &center {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    flat.push(c + z);
                }
            }
            Dataset::from_flat(flat, dim)
        }
        SyntheticKind::Logistic => {
            let beta = synthetic_logistic_truth(dim);
            let mut flat = Vec::with_capacity(num_records * (dim + 1));
            for _ in 0..num_records {
                let mut margin = 0.0;
                for b in &beta {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    margin += b * x;
                    flat.push(x);
                }
                let u: f64 = rng.gen();
                let p = 1.0 / (1.0 + (-margin).exp());
                flat.push(if u < p { 1.0 } else { -1.0 });
            }
            Dataset::from_flat(flat, dim + 1)
        }
    }
}

/// A value that is either shared by every dataset size or given per size.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum PerSize<T> {
    Same(T),
    Each(Vec<T>),
}

impl<T: Copy> PerSize<T> {
    pub fn at(&self, size_index: usize) -> T {
        match self {
            PerSize::Same(v) => *v,
            PerSize::Each(vs) => vs[size_index],
        }
    }

    fn check_len(&self, sizes: usize, field: &str, method: &str) -> Result<()> {
        if let PerSize::Each(vs) = self {
            if vs.len() != sizes {
                return Err(Error::Config(format!(
                    "method `{method}`: {field} lists {} values for {sizes} dataset sizes",
                    vs.len()
                )));
            }
        }
        Ok(())
    }
}

/// What [`run_comparison`] or [`run_zv_comparison`] should do; selected by
/// the plan's `mode` key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentMode {
    #[default]
    Comparison,
    Zv,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: SyntheticKind,
    pub dim: usize,
    /// Training set sizes, one comparison column each.
    pub sizes: Vec<usize>,
    /// Held-out records for the predictive-density trace.
    pub heldout: usize,
    /// Observation scale of the Gaussian model (ignored by logistic).
    #[serde(default = "default_unit_scale")]
    pub noise_scale: f64,
    /// Prior scale of the Gaussian model (ignored by logistic).
    #[serde(default = "default_unit_scale")]
    pub prior_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    /// Nats per datum between the best final density and the threshold a
    /// method must cross.
    #[serde(default = "default_offset")]
    pub offset: f64,
}

impl Default for TargetSection {
    fn default() -> Self {
        TargetSection {
            offset: default_offset(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Minibatch draws per probe.
    #[serde(default = "default_noise_draws")]
    pub draws: usize,
    /// Retained end-of-chain states the stationary probe averages over.
    #[serde(default = "default_tail_states")]
    pub tail_states: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            draws: default_noise_draws(),
            tail_states: default_tail_states(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZvSection {
    /// Statistic whose variance the before/after table reports, named like
    /// the sample columns: `theta_1` or `theta_1_squared`.
    #[serde(default = "default_zv_function")]
    pub function: String,
}

impl Default for ZvSection {
    fn default() -> Self {
        ZvSection {
            function: default_zv_function(),
        }
    }
}

/// One sampler configuration to compare, with per-size tuning.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    /// Directory-safe label; also the `method` value in the summary tables.
    pub name: String,
    pub estimator: EstimatorKind,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub stepsize: PerSize<f64>,
    pub iterations: PerSize<usize>,
    /// Iterations sliced off the front of the recorded chain before any
    /// metric is computed.
    #[serde(default = "default_burn_in")]
    pub burn_in: PerSize<usize>,
    #[serde(default = "default_thin")]
    pub thin: PerSize<usize>,
    /// Descent stepsize for the centering phase (cv only).
    pub optimizer_stepsize: Option<PerSize<f64>>,
    /// Descent iterations for the centering phase (cv only).
    pub optimizer_iterations: Option<PerSize<usize>>,
    /// Descent minibatch size; defaults to `batch_size` (cv only).
    pub optimizer_batch: Option<usize>,
}

fn default_unit_scale() -> f64 {
    1.0
}

fn default_offset() -> f64 {
    0.01
}

fn default_noise_draws() -> usize {
    240
}

fn default_tail_states() -> usize {
    16
}

fn default_zv_function() -> String {
    "theta_1".into()
}

fn default_batch() -> usize {
    1
}

fn default_burn_in() -> PerSize<usize> {
    PerSize::Same(0)
}

fn default_thin() -> PerSize<usize> {
    PerSize::Same(1)
}

fn default_replications() -> usize {
    1
}

/// A full comparison or ZV study: data family, size ladder, methods,
/// replication count and output location, usually loaded from a TOML file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub mode: ExperimentMode,
    pub data: DataSection,
    #[serde(default)]
    pub target: TargetSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub zv: ZvSection,
    #[serde(rename = "method")]
    pub methods: Vec<MethodSection>,
}

impl ExperimentPlan {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let plan: ExperimentPlan = toml::from_str(text)
            .map_err(|e| Error::Config(format!("experiment plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }

    fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        let d = &self.data;
        if d.dim == 0 {
            return Err(Error::Config("data dimension must be at least 1".into()));
        }
        if d.sizes.is_empty() || d.sizes.contains(&0) {
            return Err(Error::Config("dataset sizes must be a non-empty list of positive counts".into()));
        }
        if d.heldout == 0 {
            return Err(Error::Config("heldout count must be at least 1".into()));
        }
        for (label, v) in [("noise_scale", d.noise_scale), ("prior_scale", d.prior_scale)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{label} must be positive, got {v}")));
            }
        }
        if !(self.target.offset > 0.0) || !self.target.offset.is_finite() {
            return Err(Error::Config(format!(
                "target offset must be positive, got {}",
                self.target.offset
            )));
        }
        if self.noise.draws < 2 {
            return Err(Error::Config("noise probes need at least two draws".into()));
        }
        if self.noise.tail_states == 0 {
            return Err(Error::Config("the stationary probe needs at least one tail state".into()));
        }
        let function: TestFunction = self.zv.function.parse()?;
        if function.coordinate() >= d.dim {
            return Err(Error::Config(format!(
                "zv function {function} reads past dimension {}",
                d.dim
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("the plan lists no methods".into()));
        }
        let smallest = *d.sizes.iter().min().expect("non-empty");
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.methods {
            m.validate(d.sizes.len(), smallest)?;
            if !seen.insert(m.name.as_str()) {
                return Err(Error::Config(format!("duplicate method name `{}`", m.name)));
            }
        }
        Ok(())
    }
}

impl MethodSection {
    fn validate(&self, num_sizes: usize, smallest_size: usize) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::Config(format!(
                "method name `{}` must be non-empty and use only letters, digits, `-` or `_` \
                 (it becomes a directory name)",
                self.name
            )));
        }
        let name = self.name.as_str();
        self.stepsize.check_len(num_sizes, "stepsize", name)?;
        self.iterations.check_len(num_sizes, "iterations", name)?;
        self.burn_in.check_len(num_sizes, "burn_in", name)?;
        self.thin.check_len(num_sizes, "thin", name)?;
        for idx in 0..num_sizes {
            let h = self.stepsize.at(idx);
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::Config(format!(
                    "method `{name}`: stepsize must be positive, got {h}"
                )));
            }
            if self.iterations.at(idx) == 0 {
                return Err(Error::Config(format!(
                    "method `{name}`: iterations must be at least 1"
                )));
            }
            if self.thin.at(idx) == 0 {
                return Err(Error::Config(format!(
                    "method `{name}`: thin must be at least 1"
                )));
            }
            if self.burn_in.at(idx) >= self.iterations.at(idx) {
                return Err(Error::Config(format!(
                    "method `{name}`: burn-in {} swallows all {} iterations",
                    self.burn_in.at(idx),
                    self.iterations.at(idx)
                )));
            }
        }
        if self.estimator != EstimatorKind::Exact {
            if self.batch_size == 0 {
                return Err(Error::Config(format!(
                    "method `{name}`: batch size must be at least 1"
                )));
            }
            if self.batch_size > smallest_size {
                return Err(Error::Config(format!(
                    "method `{name}`: batch size {} exceeds the smallest dataset size {smallest_size}",
                    self.batch_size
                )));
            }
        }
        let is_cv = self.estimator == EstimatorKind::ControlVariate;
        let has_optimizer = self.optimizer_stepsize.is_some()
            || self.optimizer_iterations.is_some()
            || self.optimizer_batch.is_some();
        if is_cv {
            let (h, iters) = match (&self.optimizer_stepsize, &self.optimizer_iterations) {
                (Some(h), Some(i)) => (h, i),
                _ => {
                    return Err(Error::Config(format!(
                        "method `{name}`: the cv estimator needs optimizer_stepsize and \
                         optimizer_iterations for its centering phase"
                    )))
                }
            };
            h.check_len(num_sizes, "optimizer_stepsize", name)?;
            iters.check_len(num_sizes, "optimizer_iterations", name)?;
            for idx in 0..num_sizes {
                if !(h.at(idx) > 0.0) || !h.at(idx).is_finite() {
                    return Err(Error::Config(format!(
                        "method `{name}`: optimizer_stepsize must be positive"
                    )));
                }
                if iters.at(idx) == 0 {
                    return Err(Error::Config(format!(
                        "method `{name}`: optimizer_iterations must be at least 1"
                    )));
                }
            }
            let opt_batch = self.optimizer_batch.unwrap_or(self.batch_size);
            if opt_batch == 0 || opt_batch > smallest_size {
                return Err(Error::Config(format!(
                    "method `{name}`: optimizer batch size {opt_batch} must be between 1 and \
                     the smallest dataset size {smallest_size}"
                )));
            }
        } else if has_optimizer {
            return Err(Error::Config(format!(
                "method `{name}`: optimizer settings only apply to the cv estimator"
            )));
        }
        Ok(())
    }
}

/// One summary line: how one (size, method, replication) cell fared.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub n_data: usize,
    pub method: String,
    pub replication: usize,
    /// Evaluations spent before the chain started (descent, full gradient).
    pub setup_evals: u64,
    /// Total evaluations, setup included, when the density trace first
    /// reached the target; `None` when it never did or the cell failed.
    pub evals_to_target: Option<u64>,
    /// Running density over all post-burn-in retained samples.
    pub final_lpd: Option<f64>,
    /// `"ok"` or the failure rendered on one line.
    pub status: String,
}

/// Where a noise probe sat.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseContext {
    /// At the posterior mode found by full-batch descent.
    Mode,
    /// Averaged over retained end-of-chain states.
    Stationary,
}

impl NoiseContext {
    fn label(self) -> &'static str {
        match self {
            NoiseContext::Mode => "mode",
            NoiseContext::Stationary => "stationary",
        }
    }
}

/// One measured `E‖∇f̂ − ∇f‖²` value.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRow {
    pub n_data: usize,
    pub method: String,
    pub context: NoiseContext,
    pub mean_sq_noise: f64,
    pub standard_error: f64,
    pub draws: usize,
}

/// Everything [`run_comparison`] wrote, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub summary: Vec<SummaryRow>,
    pub noise: Vec<NoiseRow>,
}

/// One before/after line from [`run_zv_comparison`].
#[derive(Debug, Clone, PartialEq)]
pub struct ZvRow {
    pub n_data: usize,
    pub method: String,
    pub seed_index: usize,
    pub function: String,
    pub raw_variance: f64,
    pub corrected_variance: f64,
}

/// Full-batch descent iterations used to locate the posterior mode for the
/// noise probes.
const MODE_SEARCH_ITERATIONS: usize = 300;

fn posterior_mode<M: GradientModel + ?Sized>(model: &M) -> Result<ParamVector> {
    let constants = model
        .lipschitz_constants()
        .ok_or_else(|| Error::Capability("per-term Lipschitz constants".into()))?;
    let smooth: f64 = constants.iter().sum();
    if !(smooth > 0.0) || !smooth.is_finite() {
        return Err(Error::State(format!(
            "cannot size a descent step from total curvature {smooth}"
        )));
    }
    // h = 1/ΣL_i is safe whenever the likelihood curvature dominates the
    // prior's, which holds for every synthetic size this module generates.
    let config = SgdConfig::new(
        StepSchedule::Constant(1.0 / smooth),
        MODE_SEARCH_ITERATIONS,
        BatchMode::Full,
        0,
    );
    let run = run_sgd(model, &ParamVector::zeros(model.dim()), &config)?;
    Ok(run.final_point().clone())
}

fn build_model(data: &DataSection, train: &Dataset) -> Result<BuiltinModel> {
    Ok(match data.kind {
        SyntheticKind::Gaussian => BuiltinModel::Gaussian(GaussianModel::from_dataset(
            train,
            data.noise_scale,
            data.prior_scale,
        )?),
        SyntheticKind::Logistic => BuiltinModel::Logistic(LogisticModel::from_dataset(train)?),
    })
}

fn one_line(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}

/// Output of one completed cell, kept until the per-dataset target is known.
struct CellOutcome {
    method: String,
    replication: usize,
    setup_evals: u64,
    /// Table fill charged at chain start (SAGA only).
    initial_chain_evals: u64,
    per_iteration_evals: u64,
    /// `(iteration, running density)` per post-burn-in retained row.
    lpd_trace: Vec<(usize, f64)>,
    final_lpd: Option<f64>,
    status: String,
    /// Last retained post-burn-in states, oldest first (probe material).
    tail_states: Vec<ParamVector>,
    centering: Option<CenteringState>,
}

impl CellOutcome {
    fn failed(method: &str, replication: usize, setup_evals: u64, error: &Error) -> Self {
        CellOutcome {
            method: method.to_string(),
            replication,
            setup_evals,
            initial_chain_evals: 0,
            per_iteration_evals: 0,
            lpd_trace: Vec::new(),
            final_lpd: None,
            status: one_line(error),
            tail_states: Vec::new(),
            centering: None,
        }
    }

    fn into_summary_row(self, n_data: usize, target: Option<f64>) -> SummaryRow {
        let evals_to_target = match target {
            Some(t) => self
                .lpd_trace
                .iter()
                .find(|(_, lpd)| *lpd >= t)
                .map(|(k, _)| {
                    self.setup_evals
                        + self.initial_chain_evals
                        + self.per_iteration_evals * *k as u64
                }),
            None => None,
        };
        SummaryRow {
            n_data,
            method: self.method,
            replication: self.replication,
            setup_evals: self.setup_evals,
            evals_to_target,
            final_lpd: self.final_lpd,
            status: self.status,
        }
    }
}

fn cell_seed(plan: &ExperimentPlan, prefix: &str, rep: usize, n_data: usize, name: &str) -> u64 {
    rng::derive_seed(plan.master_seed, &format!("{prefix}:{rep}:{n_data}:{name}"))
}

/// Builds the chain configuration and, for cv, runs the centering phase.
/// Returns (config, initial point, centering, setup evals).
fn prepare_cell<M: GradientModel + ?Sized>(
    model: &M,
    method: &MethodSection,
    size_index: usize,
    seed: u64,
    record_gradients: bool,
) -> Result<(SamplerConfig, ParamVector, Option<CenteringState>, u64)> {
    let dim = model.dim();
    let (initial, centering, setup_evals) = if method.estimator == EstimatorKind::ControlVariate {
        let schedule = StepSchedule::Constant(
            method
                .optimizer_stepsize
                .as_ref()
                .expect("validated")
                .at(size_index),
        );
        let iterations = method
            .optimizer_iterations
            .as_ref()
            .expect("validated")
            .at(size_index);
        let batch = method.optimizer_batch.unwrap_or(method.batch_size);
        let sgd = SgdConfig::new(schedule, iterations, BatchMode::Minibatch(batch), seed);
        let run = find_centering(model, &ParamVector::zeros(dim), &sgd, CacheMode::Recompute)?;
        let start = run.centering.theta_hat().clone();
        (start, Some(run.centering), run.grad_evals)
    } else {
        (ParamVector::zeros(dim), None, 0)
    };
    let mut config = SamplerConfig::new(
        method.estimator,
        method.stepsize.at(size_index),
        method.batch_size,
        method.iterations.at(size_index),
        seed,
    );
    config.thin = method.thin.at(size_index);
    config.record_gradients = record_gradients;
    Ok((config, initial, centering, setup_evals))
}

/// Retained rows at or past the burn-in boundary, as (first row, count).
fn post_burn_rows(record: &ChainRecord, burn_in: usize) -> (usize, usize) {
    let total = record.num_retained();
    let first = (0..total)
        .find(|&r| record.iteration_of(r) >= burn_in)
        .unwrap_or(total);
    (first, total - first)
}

fn run_cell(
    plan: &ExperimentPlan,
    size_index: usize,
    n_data: usize,
    model: &BuiltinModel,
    heldout: &Dataset,
    method: &MethodSection,
    rep: usize,
) -> CellOutcome {
    let seed = cell_seed(plan, "replication", rep, n_data, &method.name);
    let (config, initial, centering, setup_evals) =
        match prepare_cell(model, method, size_index, seed, false) {
            Ok(v) => v,
            Err(e) => return CellOutcome::failed(&method.name, rep, 0, &e),
        };
    match try_run_cell(
        plan, size_index, n_data, model, heldout, method, rep, config, &initial,
        centering.as_ref(), setup_evals,
    ) {
        Ok(mut outcome) => {
            outcome.centering = centering;
            outcome
        }
        Err(e) => CellOutcome::failed(&method.name, rep, setup_evals, &e),
    }
}

#[allow(clippy::too_many_arguments)]
fn try_run_cell(
    plan: &ExperimentPlan,
    size_index: usize,
    n_data: usize,
    model: &BuiltinModel,
    heldout: &Dataset,
    method: &MethodSection,
    rep: usize,
    config: SamplerConfig,
    initial: &ParamVector,
    centering: Option<&CenteringState>,
    setup_evals: u64,
) -> Result<CellOutcome> {
    let record = run_chain(model, initial, &config, centering)?;

    let cell_dir = plan
        .output_dir
        .join(n_data.to_string())
        .join(&method.name)
        .join(format!("rep_{rep}"));
    std::fs::create_dir_all(&cell_dir)
        .map_err(|e| Error::io(cell_dir.display().to_string(), e))?;
    io::write_samples_csv(&cell_dir.join("samples.csv"), &record)?;
    if let Some(c) = centering {
        io::write_centering_csvs(
            &cell_dir.join("theta_hat.csv"),
            &cell_dir.join("grad_hat.csv"),
            c,
        )?;
    }

    let burn_in = method.burn_in.at(size_index);
    let (first_row, rows) = post_burn_rows(&record, burn_in);
    if rows == 0 {
        return Err(Error::Config(format!(
            "burn-in {burn_in} leaves no retained samples"
        )));
    }
    let mut density = PredictiveDensity::new(heldout.num_records())?;
    let mut trace = Vec::with_capacity(rows);
    for r in first_row..record.num_retained() {
        density.absorb(model, record.sample(r), heldout)?;
        trace.push((record.iteration_of(r), density.mean_lpd()?));
    }

    let mut lpd_series = MetricSeries::new("lpd");
    for (k, v) in &trace {
        lpd_series.push(*k, *v);
    }
    io::write_metrics_csv(&cell_dir.join("metrics.csv"), &[lpd_series])?;

    let initial_chain_evals = if method.estimator == EstimatorKind::Saga {
        n_data as u64
    } else {
        0
    };
    let per_iteration_evals = (record.grad_evals() - initial_chain_evals)
        / record.completed_iterations() as u64;

    let keep = plan.noise.tail_states.min(rows);
    let tail_states = (record.num_retained() - keep..record.num_retained())
        .map(|r| ParamVector::new(record.sample(r).to_vec()))
        .collect::<Result<Vec<_>>>()?;

    let final_lpd = trace.last().map(|(_, v)| *v);
    Ok(CellOutcome {
        method: method.name.clone(),
        replication: rep,
        setup_evals,
        initial_chain_evals,
        per_iteration_evals,
        lpd_trace: trace,
        final_lpd,
        status: "ok".into(),
        tail_states,
        centering: None,
    })
}

/// Noise probes for one method at one dataset size, using the first
/// replication's chain as the source of stationary states. Estimators whose
/// noise is not a function of the current state alone (the table estimator)
/// and the exact gradient are skipped.
fn probe_method(
    plan: &ExperimentPlan,
    n_data: usize,
    model: &BuiltinModel,
    mode_point: &ParamVector,
    method: &MethodSection,
    rep0: &CellOutcome,
) -> Result<Vec<NoiseRow>> {
    if !matches!(
        method.estimator,
        EstimatorKind::Naive | EstimatorKind::ControlVariate
    ) {
        return Ok(Vec::new());
    }
    if rep0.status != "ok" {
        return Ok(Vec::new());
    }
    let uniform = vec![1.0 / n_data as f64; n_data];
    let probe = match method.estimator {
        EstimatorKind::Naive => NoiseProbe::Naive,
        EstimatorKind::ControlVariate => NoiseProbe::ControlVariate {
            centering: rep0
                .centering
                .as_ref()
                .expect("cv cell that succeeded has a centering"),
            weights: &uniform,
        },
        _ => unreachable!(),
    };
    let probe_seed = rng::derive_seed(plan.master_seed, &format!("noise:{n_data}:{}", method.name));
    let mut rows = Vec::with_capacity(2);

    let at_mode = gradient_noise_variance(
        model,
        mode_point,
        &probe,
        method.batch_size,
        plan.noise.draws,
        rng::stream(probe_seed, "mode"),
    )?;
    rows.push(NoiseRow {
        n_data,
        method: method.name.clone(),
        context: NoiseContext::Mode,
        mean_sq_noise: at_mode.mean_sq_norm,
        standard_error: at_mode.standard_error,
        draws: at_mode.draws,
    });

    let states = &rep0.tail_states;
    let per_state = (plan.noise.draws / states.len()).max(2);
    let mut mean = 0.0;
    let mut se_sq = 0.0;
    for (i, state) in states.iter().enumerate() {
        let stats = gradient_noise_variance(
            model,
            state,
            &probe,
            method.batch_size,
            per_state,
            rng::indexed_stream(probe_seed, "stationary", i as u64),
        )?;
        mean += stats.mean_sq_norm;
        se_sq += stats.standard_error * stats.standard_error;
    }
    let count = states.len() as f64;
    rows.push(NoiseRow {
        n_data,
        method: method.name.clone(),
        context: NoiseContext::Stationary,
        mean_sq_noise: mean / count,
        standard_error: se_sq.sqrt() / count,
        draws: per_state * states.len(),
    });
    Ok(rows)
}

/// Runs the full plan: every (size, method, replication) cell, the density
/// traces, the evaluation accounting and the noise probes. Cell failures are
/// recorded in their summary rows; the experiment keeps going.
pub fn run_comparison(plan: &ExperimentPlan) -> Result<ComparisonReport> {
    plan.validate()?;
    std::fs::create_dir_all(&plan.output_dir)
        .map_err(|e| Error::io(plan.output_dir.display().to_string(), e))?;

    let wants_probes = plan.methods.iter().any(|m| {
        matches!(
            m.estimator,
            EstimatorKind::Naive | EstimatorKind::ControlVariate
        )
    });

    let mut summary = Vec::new();
    let mut noise = Vec::new();
    for (size_index, &n_data) in plan.data.sizes.iter().enumerate() {
        let train = generate_synthetic(
            plan.data.kind,
            n_data,
            plan.data.dim,
            rng::derive_seed(plan.master_seed, &format!("data:{n_data}")),
        )?;
        let heldout = generate_synthetic(
            plan.data.kind,
            plan.data.heldout,
            plan.data.dim,
            rng::derive_seed(plan.master_seed, &format!("heldout:{n_data}")),
        )?;
        let model = build_model(&plan.data, &train)?;

        let mut cells: Vec<CellOutcome> = Vec::new();
        for method in &plan.methods {
            for rep in 0..plan.replications {
                cells.push(run_cell(
                    plan, size_index, n_data, &model, &heldout, method, rep,
                ));
            }
        }

        // The target is defined by the best density any method reached on
        // this dataset, so it exists only once every cell has run.
        let best = cells
            .iter()
            .filter_map(|c| c.final_lpd)
            .fold(f64::NEG_INFINITY, f64::max);
        let target = best.is_finite().then(|| best - plan.target.offset);

        if wants_probes {
            let mode_point = posterior_mode(&model)?;
            for (m_idx, method) in plan.methods.iter().enumerate() {
                let rep0 = &cells[m_idx * plan.replications];
                noise.extend(probe_method(
                    plan,
                    n_data,
                    &model,
                    &mode_point,
                    method,
                    rep0,
                )?);
            }
        }

        for cell in cells {
            summary.push(cell.into_summary_row(n_data, target));
        }
    }

    write_summary_csv(&plan.output_dir.join("summary.csv"), &summary)?;
    write_noise_csv(&plan.output_dir.join("noise.csv"), &noise)?;
    Ok(ComparisonReport { summary, noise })
}

/// Reruns every (size, method) configuration over `replications` seeds with
/// gradient recording on and tabulates the variance of the plan's statistic
/// before and after the zero-variance correction. Unlike
/// [`run_comparison`], failures abort the study.
pub fn run_zv_comparison(plan: &ExperimentPlan) -> Result<Vec<ZvRow>> {
    plan.validate()?;
    std::fs::create_dir_all(&plan.output_dir)
        .map_err(|e| Error::io(plan.output_dir.display().to_string(), e))?;
    let function: TestFunction = plan.zv.function.parse()?;
    // Near-singular covariances get the ridge rather than an abort: an
    // exact-gradient chain on a well-conditioned target sits close to
    // singular by design.
    let options = ZvOptions { ridge: true };

    let mut rows = Vec::new();
    for (size_index, &n_data) in plan.data.sizes.iter().enumerate() {
        let train = generate_synthetic(
            plan.data.kind,
            n_data,
            plan.data.dim,
            rng::derive_seed(plan.master_seed, &format!("data:{n_data}")),
        )?;
        let model = build_model(&plan.data, &train)?;
        for method in &plan.methods {
            for seed_index in 0..plan.replications {
                let seed = cell_seed(plan, "zv", seed_index, n_data, &method.name);
                let (config, initial, centering, _) =
                    prepare_cell(&model, method, size_index, seed, true)?;
                let record = run_chain(&model, &initial, &config, centering.as_ref())?;

                let burn_in = method.burn_in.at(size_index);
                let (first_row, kept) = post_burn_rows(&record, burn_in);
                if kept == 0 {
                    return Err(Error::Config(format!(
                        "burn-in {burn_in} leaves no retained samples"
                    )));
                }
                let dim = record.dim();
                let mut samples = Vec::with_capacity(kept * dim);
                let mut gradients = Vec::with_capacity(kept * dim);
                for r in first_row..record.num_retained() {
                    samples.extend_from_slice(record.sample(r));
                    gradients.extend_from_slice(
                        record.gradient(r).expect("recorded with gradients"),
                    );
                }
                let input = ZvInput::new(samples, gradients, dim)?;
                let correction = apply_zv(&input, &function, &options)?;

                let cell_dir = plan
                    .output_dir
                    .join(n_data.to_string())
                    .join(&method.name)
                    .join(format!("zv_seed_{seed_index}"));
                std::fs::create_dir_all(&cell_dir)
                    .map_err(|e| Error::io(cell_dir.display().to_string(), e))?;
                io::write_samples_csv(&cell_dir.join("samples.csv"), &record)?;
                io::write_gradients_csv(&cell_dir.join("gradients.csv"), &record)?;
                io::write_corrected_csv(
                    &cell_dir.join("corrected.csv"),
                    &[(function.to_string(), correction.corrected.as_slice())],
                )?;
                rows.push(ZvRow {
                    n_data,
                    method: method.name.clone(),
                    seed_index,
                    function: function.to_string(),
                    raw_variance: correction.raw_variance,
                    corrected_variance: correction.corrected_variance,
                });
                io::write_zv_report_csv(
                    &cell_dir.join("zv_report.csv"),
                    &[(function, correction)],
                )?;
            }
        }
    }
    write_zv_summary_csv(&plan.output_dir.join("zv_summary.csv"), &rows)?;
    Ok(rows)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))
}

fn finish(path: &Path, mut w: csv::Writer<std::fs::File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let fail = |e: csv::Error| Error::io(path.display().to_string(), std::io::Error::other(e));
    w.write_record([
        "n_data",
        "method",
        "replication",
        "setup_evals",
        "evals_to_target",
        "final_lpd",
        "status",
    ])
    .map_err(fail)?;
    for r in rows {
        w.write_record([
            r.n_data.to_string(),
            r.method.clone(),
            r.replication.to_string(),
            r.setup_evals.to_string(),
            r.evals_to_target.map_or("NA".into(), |v| v.to_string()),
            r.final_lpd.map_or("NA".into(), io::fmt_f64),
            r.status.clone(),
        ])
        .map_err(fail)?;
    }
    finish(path, w)
}

fn write_noise_csv(path: &Path, rows: &[NoiseRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let fail = |e: csv::Error| Error::io(path.display().to_string(), std::io::Error::other(e));
    w.write_record([
        "n_data",
        "method",
        "context",
        "mean_sq_noise",
        "standard_error",
        "draws",
    ])
    .map_err(fail)?;
    for r in rows {
        w.write_record([
            r.n_data.to_string(),
            r.method.clone(),
            r.context.label().to_string(),
            io::fmt_f64(r.mean_sq_noise),
            io::fmt_f64(r.standard_error),
            r.draws.to_string(),
        ])
        .map_err(fail)?;
    }
    finish(path, w)
}

fn write_zv_summary_csv(path: &Path, rows: &[ZvRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let fail = |e: csv::Error| Error::io(path.display().to_string(), std::io::Error::other(e));
    w.write_record([
        "n_data",
        "method",
        "seed",
        "function",
        "raw_variance",
        "corrected_variance",
        "reduction_factor",
    ])
    .map_err(fail)?;
    for r in rows {
        w.write_record([
            r.n_data.to_string(),
            r.method.clone(),
            r.seed_index.to_string(),
            r.function.clone(),
            io::fmt_f64(r.raw_variance),
            io::fmt_f64(r.corrected_variance),
            io::fmt_f64(r.raw_variance / r.corrected_variance),
        ])
        .map_err(fail)?;
    }
    finish(path, w)
}
