//! Target posteriors exposed through per-term gradients.
//!
//! A posterior over `θ ∈ R^d` built from `N` data points is represented by
//! its negative log density `f(θ) = f_0(θ) + Σ_{i=1..N} f_i(θ)`, where `f_0`
//! comes from the prior and `f_i` from datum `i`. Samplers and optimizers
//! only ever see the gradients `∇f_0` and `∇f_i`, so any model that can
//! produce those term gradients plugs in here. Models are immutable once
//! built and safe to evaluate from several threads.

mod gaussian;
mod logistic;

pub use gaussian::GaussianModel;
pub use logistic::LogisticModel;

use crate::error::{Error, Result};

/// A parameter vector; entries are always finite and the dimension is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("parameter vector must be non-empty".into()));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "parameter entry {bad} is not finite"
            )));
        }
        Ok(ParamVector { values })
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    // Samplers mutate state in place; they run their own divergence checks,
    // so the finite-on-construction invariant is enforced at their exits.
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn distance_sq(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl std::ops::Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.values
    }
}

/// A fixed-width table of data records. Row `i` backs likelihood term `i`.
#[derive(Debug, Clone)]
pub struct Dataset {
    flat: Vec<f64>,
    width: usize,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Argument("dataset must contain at least one record".into()));
        }
        let width = rows[0].len();
        if width == 0 {
            return Err(Error::Argument("dataset records must be non-empty".into()));
        }
        let mut flat = Vec::with_capacity(rows.len() * width);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Argument(format!(
                    "record {i} has {} fields, expected {width}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Argument(format!("record {i} contains a non-finite field")));
            }
            flat.extend_from_slice(row);
        }
        Ok(Dataset { flat, width })
    }

    pub fn from_flat(flat: Vec<f64>, width: usize) -> Result<Self> {
        if width == 0 || flat.is_empty() || flat.len() % width != 0 {
            return Err(Error::Argument(format!(
                "flat data of length {} does not tile into records of width {width}",
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("dataset contains a non-finite field".into()));
        }
        Ok(Dataset { flat, width })
    }

    pub fn num_records(&self) -> usize {
        self.flat.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn record(&self, i: usize) -> &[f64] {
        &self.flat[i * self.width..(i + 1) * self.width]
    }

    pub fn records(&self) -> impl Iterator<Item = &[f64]> {
        self.flat.chunks_exact(self.width)
    }
}

/// A posterior target decomposed into prior and per-datum gradient terms.
///
/// Evaluating any term must not depend on any record other than its own, and
/// implementations must be pure: repeated calls with the same arguments give
/// bit-identical results.
pub trait GradientModel: Send + Sync {
    /// Parameter dimension `d`.
    fn dim(&self) -> usize;

    /// Number of likelihood terms `N`.
    fn num_data(&self) -> usize;

    /// Writes `∇f_0(θ)` (the prior term) into `out`.
    fn grad_prior(&self, theta: &[f64], out: &mut [f64]);

    /// Writes `∇f_i(θ)` for the 0-based datum `index` into `out`.
    fn grad_term(&self, theta: &[f64], index: usize, out: &mut [f64]);

    /// Per-datum gradient Lipschitz constants `L_1..L_N`, if the model knows
    /// them. Used for Lipschitz-proportional minibatch weights.
    fn lipschitz_constants(&self) -> Option<Vec<f64>> {
        None
    }

    /// Log-likelihood of one held-out `record` under parameters `theta`, if
    /// the model supports predictive evaluation.
    fn log_likelihood(&self, _theta: &[f64], _record: &[f64]) -> Option<f64> {
        None
    }
}

/// Sum of the prior and every likelihood term gradient: `∇f(θ)`.
///
/// Terms are accumulated in index order, so the result is bit-reproducible.
/// A non-finite term aborts with an error naming the offending term.
pub fn full_gradient<M: GradientModel + ?Sized>(model: &M, theta: &ParamVector) -> Result<ParamVector> {
    let d = model.dim();
    if theta.dim() != d {
        return Err(Error::Argument(format!(
            "parameter dimension {} does not match model dimension {d}",
            theta.dim()
        )));
    }
    let mut total = vec![0.0; d];
    let mut term = vec![0.0; d];
    model.grad_prior(theta, &mut term);
    accumulate_checked(&mut total, &term, "prior")?;
    for i in 0..model.num_data() {
        model.grad_term(theta, i, &mut term);
        accumulate_checked(&mut total, &term, i)?;
    }
    ParamVector::new(total)
}

fn accumulate_checked(total: &mut [f64], term: &[f64], label: impl std::fmt::Display) -> Result<()> {
    if term.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelEvaluation {
            term: label.to_string(),
        });
    }
    for (t, v) in total.iter_mut().zip(term) {
        *t += v;
    }
    Ok(())
}

/// The models the command line and experiment runner know how to build.
#[derive(Debug, Clone)]
pub enum BuiltinModel {
    Gaussian(GaussianModel),
    Logistic(LogisticModel),
}

impl BuiltinModel {
    pub fn as_dyn(&self) -> &dyn GradientModel {
        match self {
            BuiltinModel::Gaussian(m) => m,
            BuiltinModel::Logistic(m) => m,
        }
    }
}

impl GradientModel for BuiltinModel {
    fn dim(&self) -> usize {
        self.as_dyn().dim()
    }

    fn num_data(&self) -> usize {
        self.as_dyn().num_data()
    }

    fn grad_prior(&self, theta: &[f64], out: &mut [f64]) {
        self.as_dyn().grad_prior(theta, out)
    }

    fn grad_term(&self, theta: &[f64], index: usize, out: &mut [f64]) {
        self.as_dyn().grad_term(theta, index, out)
    }

    fn lipschitz_constants(&self) -> Option<Vec<f64>> {
        self.as_dyn().lipschitz_constants()
    }

    fn log_likelihood(&self, theta: &[f64], record: &[f64]) -> Option<f64> {
        self.as_dyn().log_likelihood(theta, record)
    }
}
