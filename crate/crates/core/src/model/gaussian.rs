//! Conjugate Gaussian location model.
//!
//! Likelihood `x_i ~ N(θ, σ_x² I)` with prior `θ ~ N(0, σ_0² I)`, treated
//! coordinate-wise. The posterior is Gaussian with known moments, which makes
//! this the reference target for calibration checks: every sampler and
//! estimator statistic can be compared against a closed form.

use super::{Dataset, GradientModel, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GaussianModel {
    data: Vec<f64>,
    dim: usize,
    num_data: usize,
    noise_scale: f64,
    prior_scale: f64,
}

impl GaussianModel {
    /// Builds the model from records of width `d`. An empty `rows` list is
    /// allowed and yields the prior alone.
    pub fn from_rows(rows: Vec<Vec<f64>>, noise_scale: f64, prior_scale: f64) -> Result<Self> {
        if rows.is_empty() {
            return Self::from_parts(Vec::new(), 1, noise_scale, prior_scale);
        }
        let dim = rows[0].len();
        let ds = Dataset::new(rows)?;
        Self::from_parts(ds.records().flatten().copied().collect(), dim, noise_scale, prior_scale)
    }

    pub fn from_dataset(data: &Dataset, noise_scale: f64, prior_scale: f64) -> Result<Self> {
        Self::from_parts(
            data.records().flatten().copied().collect(),
            data.width(),
            noise_scale,
            prior_scale,
        )
    }

    fn from_parts(data: Vec<f64>, dim: usize, noise_scale: f64, prior_scale: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("dimension must be at least 1".into()));
        }
        if !(noise_scale > 0.0) || !(prior_scale > 0.0) {
            return Err(Error::Argument("scales must be strictly positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Argument("data length is not a multiple of the dimension".into()));
        }
        let num_data = data.len() / dim;
        Ok(GaussianModel {
            data,
            dim,
            num_data,
            noise_scale,
            prior_scale,
        })
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    pub fn prior_scale(&self) -> f64 {
        self.prior_scale
    }

    fn datum(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact posterior mean and per-coordinate variance.
    ///
    /// Each coordinate has precision `1/σ_0² + N/σ_x²` and mean
    /// `(Σ_i x_ij / σ_x²) / precision`. With no data this is the prior.
    pub fn posterior_moments(&self) -> (ParamVector, Vec<f64>) {
        let precision =
            1.0 / (self.prior_scale * self.prior_scale) + self.num_data as f64 / (self.noise_scale * self.noise_scale);
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.num_data {
            for (m, x) in mean.iter_mut().zip(self.datum(i)) {
                *m += x;
            }
        }
        let scale = 1.0 / (self.noise_scale * self.noise_scale) / precision;
        for m in &mut mean {
            *m *= scale;
        }
        let variance = vec![1.0 / precision; self.dim];
        (ParamVector::new(mean).expect("posterior mean is finite"), variance)
    }

    /// Negative log posterior up to its normalizing constant.
    pub fn neg_log_posterior(&self, theta: &[f64]) -> f64 {
        let prior: f64 = theta.iter().map(|t| t * t).sum::<f64>() / (2.0 * self.prior_scale * self.prior_scale);
        let mut lik = 0.0;
        for i in 0..self.num_data {
            for (t, x) in theta.iter().zip(self.datum(i)) {
                lik += (t - x) * (t - x);
            }
        }
        prior + lik / (2.0 * self.noise_scale * self.noise_scale)
    }
}

impl GradientModel for GaussianModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_data(&self) -> usize {
        self.num_data
    }

    fn grad_prior(&self, theta: &[f64], out: &mut [f64]) {
        let inv_var = 1.0 / (self.prior_scale * self.prior_scale);
        for (o, t) in out.iter_mut().zip(theta) {
            *o = t * inv_var;
        }
    }

    fn grad_term(&self, theta: &[f64], index: usize, out: &mut [f64]) {
        let inv_var = 1.0 / (self.noise_scale * self.noise_scale);
        for ((o, t), x) in out.iter_mut().zip(theta).zip(self.datum(index)) {
            *o = (t - x) * inv_var;
        }
    }

    fn lipschitz_constants(&self) -> Option<Vec<f64>> {
        Some(vec![1.0 / (self.noise_scale * self.noise_scale); self.num_data])
    }

    fn log_likelihood(&self, theta: &[f64], record: &[f64]) -> Option<f64> {
        let var = self.noise_scale * self.noise_scale;
        let mut ll = -0.5 * self.dim as f64 * (std::f64::consts::TAU * var).ln();
        for (t, x) in theta.iter().zip(record) {
            ll -= (x - t) * (x - t) / (2.0 * var);
        }
        Some(ll)
    }
}
