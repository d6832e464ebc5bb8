//! Bayesian logistic regression with a Laplace prior.
//!
//! Records are `(x_i, y_i)` with `y_i ∈ {−1, +1}`. The negative log
//! likelihood term is `f_i(β) = log(1 + exp(−y_i βᵀx_i))` and the prior is
//! independent Laplace(1) on each coordinate, handled through its sign
//! subgradient (0 exactly at a kink).

use super::{Dataset, GradientModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LogisticModel {
    features: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
}

impl LogisticModel {
    /// Builds the model from a dataset whose rows are `x_1..x_d, y`.
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        if data.width() < 2 {
            return Err(Error::Argument(
                "logistic records need at least one feature and a label".into(),
            ));
        }
        let dim = data.width() - 1;
        let mut features = Vec::with_capacity(data.num_records() * dim);
        let mut labels = Vec::with_capacity(data.num_records());
        for (i, row) in data.records().enumerate() {
            let y = row[dim];
            if y != 1.0 && y != -1.0 {
                return Err(Error::Argument(format!(
                    "record {i}: label must be -1 or 1, got {y}"
                )));
            }
            features.extend_from_slice(&row[..dim]);
            labels.push(y);
        }
        Ok(LogisticModel {
            features,
            labels,
            dim,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_dataset(&Dataset::new(rows)?)
    }

    fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Negative log posterior up to the prior's normalizing constant.
    pub fn neg_log_posterior(&self, beta: &[f64]) -> f64 {
        let prior: f64 = beta.iter().map(|b| b.abs()).sum();
        let mut lik = 0.0;
        for i in 0..self.labels.len() {
            let margin: f64 = beta
                .iter()
                .zip(self.feature(i))
                .map(|(b, x)| b * x)
                .sum::<f64>()
                * self.labels[i];
            lik += softplus(-margin);
        }
        prior + lik
    }
}

/// log(1 + e^t) without overflow.
fn softplus(t: f64) -> f64 {
    if t > 35.0 {
        t
    } else if t < -35.0 {
        0.0
    } else {
        t.exp().ln_1p()
    }
}

/// 1 / (1 + e^t) without overflow.
fn inv_one_plus_exp(t: f64) -> f64 {
    if t > 35.0 {
        0.0
    } else if t < -35.0 {
        1.0
    } else {
        1.0 / (1.0 + t.exp())
    }
}

impl GradientModel for LogisticModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_data(&self) -> usize {
        self.labels.len()
    }

    fn grad_prior(&self, theta: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(theta) {
            *o = if *t > 0.0 {
                1.0
            } else if *t < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }

    fn grad_term(&self, theta: &[f64], index: usize, out: &mut [f64]) {
        let x = self.feature(index);
        let y = self.labels[index];
        let margin: f64 = theta.iter().zip(x).map(|(t, v)| t * v).sum::<f64>() * y;
        // ∇f_i(β) = −y x / (1 + exp(y βᵀx))
        let w = -y * inv_one_plus_exp(margin);
        for (o, v) in out.iter_mut().zip(x) {
            *o = w * v;
        }
    }

    fn lipschitz_constants(&self) -> Option<Vec<f64>> {
        // The per-term Hessian is bounded by ‖x_i‖²/4.
        Some(
            (0..self.labels.len())
                .map(|i| self.feature(i).iter().map(|v| v * v).sum::<f64>() / 4.0)
                .collect(),
        )
    }

    fn log_likelihood(&self, theta: &[f64], record: &[f64]) -> Option<f64> {
        if record.len() != self.dim + 1 {
            return None;
        }
        let y = record[self.dim];
        let margin: f64 = theta
            .iter()
            .zip(&record[..self.dim])
            .map(|(t, v)| t * v)
            .sum::<f64>()
            * y;
        Some(-softplus(-margin))
    }
}
