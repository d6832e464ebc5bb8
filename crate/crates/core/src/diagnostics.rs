//! Chain quality measurements: Wasserstein distance to a reference,
//! held-out predictive density, and direct gradient-noise probes.

use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{cv_estimate, naive_estimate, CenteringState, MinibatchSampler, SagaState};
use crate::model::{full_gradient, Dataset, GradientModel, ParamVector};

/// Quantile-grid resolution that keeps the coupling error of the scalar
/// Wasserstein estimate well under the tolerances used in the test suite.
pub const DEFAULT_QUANTILE_GRID: usize = 1000;

/// Fewest samples for which the empirical quantile function is trusted.
const MIN_W2_SAMPLES: usize = 100;

/// Mean and unbiased variance of a series.
pub fn mean_and_variance(series: &[f64]) -> Result<(f64, f64)> {
    if series.len() < 2 {
        return Err(Error::Argument(
            "mean and variance need at least two values".into(),
        ));
    }
    let k = series.len() as f64;
    let mean = series.iter().sum::<f64>() / k;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    Ok((mean, var))
}

/// Scalar Wasserstein-2 distance between a sample and a distribution given
/// by its quantile function, coupling both through `grid` midpoint levels
/// `u_q = (q + ½)/grid`.
pub fn w2_to_quantile(
    samples: &[f64],
    quantile: impl Fn(f64) -> f64,
    grid: usize,
) -> Result<f64> {
    let sorted = checked_sorted(samples)?;
    if grid < 2 {
        return Err(Error::Argument("quantile grid needs at least two levels".into()));
    }
    let mut acc = 0.0;
    for q in 0..grid {
        let u = (q as f64 + 0.5) / grid as f64;
        let gap = empirical_quantile(&sorted, u) - quantile(u);
        acc += gap * gap;
    }
    Ok((acc / grid as f64).sqrt())
}

/// Scalar Wasserstein-2 distance between a sample and `N(mean, var)`.
pub fn w2_to_normal(samples: &[f64], mean: f64, var: f64, grid: usize) -> Result<f64> {
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::Argument(format!("reference variance must be positive, got {var}")));
    }
    let normal = Normal::new(mean, var.sqrt())
        .map_err(|e| Error::Argument(format!("bad reference normal: {e}")))?;
    w2_to_quantile(samples, |u| normal.inverse_cdf(u), grid)
}

/// Scalar Wasserstein-2 distance between two samples.
pub fn w2_between_samples(a: &[f64], b: &[f64], grid: usize) -> Result<f64> {
    let sorted_b = checked_sorted(b)?;
    w2_to_quantile(a, |u| empirical_quantile(&sorted_b, u), grid)
}

fn checked_sorted(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.len() < MIN_W2_SAMPLES {
        return Err(Error::Argument(format!(
            "Wasserstein estimation needs at least {MIN_W2_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("samples must be finite".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(sorted)
}

fn empirical_quantile(sorted: &[f64], u: f64) -> f64 {
    let idx = ((u * sorted.len() as f64) as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// Streaming estimate of the log predictive density of held-out records
/// under the posterior sample: for each record `y`,
/// `log[(1/S) Σ_s exp ℓ(θ_s; y)]`, accumulated in log-sum-exp form so any
/// prefix of the sample can be read off without revisiting earlier states.
#[derive(Debug, Clone)]
pub struct PredictiveDensity {
    max: Vec<f64>,
    scaled: Vec<f64>,
    seen: usize,
}

impl PredictiveDensity {
    pub fn new(num_test_records: usize) -> Result<Self> {
        if num_test_records == 0 {
            return Err(Error::Argument("need at least one held-out record".into()));
        }
        Ok(PredictiveDensity {
            max: vec![f64::NEG_INFINITY; num_test_records],
            scaled: vec![0.0; num_test_records],
            seen: 0,
        })
    }

    /// Folds one posterior sample into every record's accumulator.
    pub fn absorb<M: GradientModel + ?Sized>(
        &mut self,
        model: &M,
        theta: &[f64],
        test: &Dataset,
    ) -> Result<()> {
        if test.num_records() != self.max.len() {
            return Err(Error::Argument(format!(
                "accumulator tracks {} records, dataset has {}",
                self.max.len(),
                test.num_records()
            )));
        }
        for (i, record) in test.records().enumerate() {
            let ll = model.log_likelihood(theta, record).ok_or_else(|| {
                Error::Capability("per-record log-likelihood".into())
            })?;
            if ll.is_nan() {
                return Err(Error::State(format!(
                    "log-likelihood of test record {i} is NaN"
                )));
            }
            if ll == f64::NEG_INFINITY {
                continue; // contributes zero mass; the sample still counts
            }
            if ll <= self.max[i] {
                self.scaled[i] += (ll - self.max[i]).exp();
            } else {
                self.scaled[i] = self.scaled[i] * (self.max[i] - ll).exp() + 1.0;
                self.max[i] = ll;
            }
        }
        self.seen += 1;
        Ok(())
    }

    pub fn samples_seen(&self) -> usize {
        self.seen
    }

    /// Average log predictive density over the held-out records.
    pub fn mean_lpd(&self) -> Result<f64> {
        if self.seen == 0 {
            return Err(Error::State("no posterior samples absorbed yet".into()));
        }
        let log_seen = (self.seen as f64).ln();
        let total: f64 = self
            .max
            .iter()
            .zip(&self.scaled)
            .map(|(m, s)| {
                if *s == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    m + s.ln() - log_seen
                }
            })
            .sum();
        Ok(total / self.max.len() as f64)
    }
}

/// One-call variant over a flat row-major sample table.
pub fn log_predictive_density<M: GradientModel + ?Sized>(
    model: &M,
    samples: &[f64],
    dim: usize,
    test: &Dataset,
) -> Result<f64> {
    if dim == 0 || samples.is_empty() || samples.len() % dim != 0 {
        return Err(Error::Argument(format!(
            "sample table of {} values does not tile into rows of dimension {dim}",
            samples.len()
        )));
    }
    let mut acc = PredictiveDensity::new(test.num_records())?;
    for theta in samples.chunks_exact(dim) {
        acc.absorb(model, theta, test)?;
    }
    acc.mean_lpd()
}

/// Which gradient estimator a noise probe drives.
#[derive(Debug)]
pub enum NoiseProbe<'a> {
    /// Rescaled minibatch sum under uniform weights.
    Naive,
    /// Centered estimator; `weights` must be the batch distribution it runs
    /// with.
    ControlVariate {
        centering: &'a CenteringState,
        weights: &'a [f64],
    },
    /// Table estimator with the table frozen at its current contents.
    Saga { state: &'a SagaState },
}

/// Monte Carlo estimate of `E‖∇f̂(θ) − ∇f(θ)‖²` over the batch draw.
#[derive(Debug, Clone, Copy)]
pub struct NoiseStats {
    pub mean_sq_norm: f64,
    /// Standard error of `mean_sq_norm` across the draws.
    pub standard_error: f64,
    pub draws: usize,
}

pub fn gradient_noise_variance<M: GradientModel + ?Sized>(
    model: &M,
    theta: &ParamVector,
    probe: &NoiseProbe,
    batch_size: usize,
    draws: usize,
    rng: ChaCha8Rng,
) -> Result<NoiseStats> {
    if draws < 2 {
        return Err(Error::Argument("noise probes need at least two draws".into()));
    }
    let reference = full_gradient(model, theta)?;
    let weights = match probe {
        NoiseProbe::ControlVariate { weights, .. } => weights.to_vec(),
        _ => vec![1.0 / model.num_data() as f64; model.num_data()],
    };
    let mut batcher = MinibatchSampler::weighted(weights.clone(), batch_size, rng)?;
    let mut batch = Vec::with_capacity(batch_size);
    let mut sq_norms = Vec::with_capacity(draws);
    for _ in 0..draws {
        batcher.draw_into(&mut batch);
        let estimate = match probe {
            NoiseProbe::Naive => naive_estimate(model, theta, &batch)?,
            NoiseProbe::ControlVariate { centering, .. } => {
                cv_estimate(model, theta, centering, &batch, &weights)?
            }
            NoiseProbe::Saga { state } => state.estimate(model, theta, &batch)?,
        };
        let sq: f64 = estimate
            .value
            .values()
            .iter()
            .zip(reference.values())
            .map(|(e, r)| (e - r) * (e - r))
            .sum();
        sq_norms.push(sq);
    }
    let (mean, var) = mean_and_variance(&sq_norms)?;
    Ok(NoiseStats {
        mean_sq_norm: mean,
        standard_error: (var / draws as f64).sqrt(),
        draws,
    })
}

/// A named metric traced over chain iterations, ready for CSV export.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub name: String,
    pub points: Vec<(usize, f64)>,
}

impl MetricSeries {
    pub fn new(name: impl Into<String>) -> Self {
        MetricSeries {
            name: name.into(),
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, iteration: usize, value: f64) {
        self.points.push((iteration, value));
    }
}
