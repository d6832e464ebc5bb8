//! Zero-variance post-processing of chain output.
//!
//! Under the target density `π ∝ exp(−f)`, the statistics `z = ∇f(θ)/2` have
//! expectation zero, so for any test function `ψ` the corrected series
//! `ψ(θ_s) + aᵀ z_s` estimates the same quantity for every coefficient
//! vector `a`. Choosing `a = −V_z⁻¹ Cov(z, ψ)` minimizes the sample variance
//! of the corrected series. With stochastic gradients the same construction
//! applies verbatim to `z = ∇f̂(θ)/2`; the injected estimator noise merely
//! caps how much variance the correction can remove.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sampler::ChainRecord;

/// Pairs of visited states and the gradient estimates evaluated there.
#[derive(Debug, Clone)]
pub struct ZvInput {
    samples: Vec<f64>,
    z: Vec<f64>,
    dim: usize,
    rows: usize,
}

impl ZvInput {
    /// `samples` and `gradients` are row-major `rows × dim`.
    pub fn new(samples: Vec<f64>, gradients: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("dimension must be at least 1".into()));
        }
        if samples.len() != gradients.len() || samples.len() % dim != 0 {
            return Err(Error::Argument(format!(
                "sample and gradient tables must agree in shape: {} and {} values for dimension {dim}",
                samples.len(),
                gradients.len()
            )));
        }
        let rows = samples.len() / dim;
        // d + 2 rows make the d×d covariance of z and one extra series
        // estimable; fewer rows and the least-squares fit is vacuous.
        if rows < dim + 2 {
            return Err(Error::Argument(format!(
                "covariance estimation in dimension {dim} needs at least {} retained samples, got {rows}",
                dim + 2
            )));
        }
        if samples.iter().chain(&gradients).any(|v| !v.is_finite()) {
            return Err(Error::Argument("samples and gradients must be finite".into()));
        }
        let z = gradients.iter().map(|g| 0.5 * g).collect();
        Ok(ZvInput {
            samples,
            z,
            dim,
            rows,
        })
    }

    pub fn from_record(record: &ChainRecord) -> Result<Self> {
        let gradients = record
            .gradient_rows()
            .ok_or_else(|| Error::Capability("the chain was run without gradient recording".into()))?
            .flatten()
            .copied()
            .collect();
        Self::new(record.rows().flatten().copied().collect(), gradients, record.dim())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, s: usize) -> &[f64] {
        &self.samples[s * self.dim..(s + 1) * self.dim]
    }

    /// The control-variate vector `z_s = ∇f̂(θ_s)/2`.
    pub fn control_variate(&self, s: usize) -> &[f64] {
        &self.z[s * self.dim..(s + 1) * self.dim]
    }
}

/// Scalar test functions the corrector knows how to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestFunction {
    /// `ψ(θ) = θ_j`, for posterior means.
    Coordinate(usize),
    /// `ψ(θ) = θ_j²`, for posterior second moments.
    SquaredCoordinate(usize),
}

impl std::fmt::Display for TestFunction {
    // One-based, matching the theta_1..theta_d column convention of the CSV
    // artifacts; the constructor index stays zero-based like every other
    // coordinate index in the API.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TestFunction::Coordinate(j) => write!(f, "theta_{}", j + 1),
            TestFunction::SquaredCoordinate(j) => write!(f, "theta_{}_squared", j + 1),
        }
    }
}

impl std::str::FromStr for TestFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Argument(format!(
                "unknown test function `{s}` (expected theta_<j> or theta_<j>_squared, j from 1)"
            ))
        };
        let rest = s.strip_prefix("theta_").ok_or_else(bad)?;
        let (digits, squared) = match rest.strip_suffix("_squared") {
            Some(d) => (d, true),
            None => (rest, false),
        };
        let j: usize = digits.parse().map_err(|_| bad())?;
        if j == 0 {
            return Err(bad());
        }
        Ok(if squared {
            TestFunction::SquaredCoordinate(j - 1)
        } else {
            TestFunction::Coordinate(j - 1)
        })
    }
}

impl TestFunction {
    pub fn evaluate(&self, theta: &[f64]) -> f64 {
        match self {
            TestFunction::Coordinate(j) => theta[*j],
            TestFunction::SquaredCoordinate(j) => theta[*j] * theta[*j],
        }
    }

    /// Zero-based coordinate the function reads.
    pub fn coordinate(&self) -> usize {
        match self {
            TestFunction::Coordinate(j) | TestFunction::SquaredCoordinate(j) => *j,
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        let j = match self {
            TestFunction::Coordinate(j) | TestFunction::SquaredCoordinate(j) => *j,
        };
        if j >= dim {
            return Err(Error::Argument(format!(
                "test function uses coordinate {j}, input has dimension {dim}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ZvOptions {
    /// Stabilize a near-singular covariance by adding `1e-10·tr(V)/d` to its
    /// diagonal instead of failing.
    pub ridge: bool,
}

/// One corrected series and its bookkeeping. Variances are the unbiased
/// sample variances of the raw and corrected series; their gap is the amount
/// of variance the correction removed.
#[derive(Debug, Clone)]
pub struct ZvCorrection {
    pub coefficients: Vec<f64>,
    pub raw_mean: f64,
    pub corrected_mean: f64,
    pub raw_variance: f64,
    pub corrected_variance: f64,
    pub corrected: Vec<f64>,
}

impl ZvCorrection {
    /// `Var(ψ) / Var(ψ + aᵀz)`; infinite when the correction is exact.
    pub fn variance_ratio(&self) -> f64 {
        self.raw_variance / self.corrected_variance
    }
}

/// Least-squares coefficients `a = −V_z⁻¹ Cov(z, ψ)` for an arbitrary ψ
/// series aligned with the input rows.
pub fn fit_coefficients(input: &ZvInput, psi: &[f64], options: &ZvOptions) -> Result<Vec<f64>> {
    if psi.len() != input.rows {
        return Err(Error::Argument(format!(
            "test series has {} values, input has {} rows",
            psi.len(),
            input.rows
        )));
    }
    let d = input.dim;
    let k = input.rows as f64;

    let mut z_mean = vec![0.0; d];
    for s in 0..input.rows {
        for (m, v) in z_mean.iter_mut().zip(input.control_variate(s)) {
            *m += v;
        }
    }
    for m in &mut z_mean {
        *m /= k;
    }
    let psi_mean = psi.iter().sum::<f64>() / k;

    // Unbiased second moments: V = Cov(z), c = Cov(z, ψ).
    let mut v = DMatrix::<f64>::zeros(d, d);
    let mut c = DVector::<f64>::zeros(d);
    for s in 0..input.rows {
        let z = input.control_variate(s);
        let dpsi = psi[s] - psi_mean;
        for i in 0..d {
            let zi = z[i] - z_mean[i];
            c[i] += zi * dpsi;
            for j in 0..=i {
                v[(i, j)] += zi * (z[j] - z_mean[j]);
            }
        }
    }
    let denom = k - 1.0;
    for i in 0..d {
        c[i] /= denom;
        for j in 0..=i {
            v[(i, j)] /= denom;
            v[(j, i)] = v[(i, j)];
        }
    }

    let condition = condition_number(&v);
    if condition > 1e12 {
        if !options.ridge {
            return Err(Error::DegenerateCovariance { condition });
        }
        let lambda = 1e-10 * v.trace() / d as f64;
        // A covariance with zero trace carries no signal at all; the ridge
        // then needs an absolute floor to be invertible.
        let lambda = if lambda > 0.0 { lambda } else { 1e-300 };
        for i in 0..d {
            v[(i, i)] += lambda;
        }
    }

    let chol = match Cholesky::new(v) {
        Some(c) => c,
        None => return Err(Error::DegenerateCovariance { condition }),
    };
    let a = chol.solve(&(-c));
    Ok(a.iter().copied().collect())
}

/// Fits and applies the correction for one test function.
pub fn apply_zv(input: &ZvInput, function: &TestFunction, options: &ZvOptions) -> Result<ZvCorrection> {
    function.check_dim(input.dim)?;
    let psi: Vec<f64> = (0..input.rows)
        .map(|s| function.evaluate(input.sample(s)))
        .collect();
    let coefficients = fit_coefficients(input, &psi, options)?;

    let corrected: Vec<f64> = (0..input.rows)
        .map(|s| {
            let z = input.control_variate(s);
            psi[s] + coefficients.iter().zip(z).map(|(a, z)| a * z).sum::<f64>()
        })
        .collect();

    let (raw_mean, raw_variance) = mean_and_variance(&psi);
    let (corrected_mean, corrected_variance) = mean_and_variance(&corrected);
    Ok(ZvCorrection {
        coefficients,
        raw_mean,
        corrected_mean,
        raw_variance,
        corrected_variance,
        corrected,
    })
}

fn mean_and_variance(series: &[f64]) -> (f64, f64) {
    let k = series.len() as f64;
    let mean = series.iter().sum::<f64>() / k;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    (mean, var)
}

/// `λ_max/λ_min` of a symmetric matrix; infinite when `λ_min ≤ 0`.
fn condition_number(v: &DMatrix<f64>) -> f64 {
    let eig = v.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &e in eig.eigenvalues.iter() {
        lo = lo.min(e);
        hi = hi.max(e);
    }
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}
