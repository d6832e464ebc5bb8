//! Stochastic gradient descent for locating a posterior mode.
//!
//! The control-variate estimator needs a centering point `θ̂` close to the
//! mode; this module produces one. Updates are plain descent steps
//! `θ_{k+1} = θ_k − h_k ∇f̂(θ_k)` with either the full gradient or the
//! rescaled-minibatch estimate, no injected noise.

use crate::error::{Error, Result};
use crate::estimators::{naive_estimate, CacheMode, CenteringState, MinibatchSampler};
use crate::model::{full_gradient, GradientModel, ParamVector};
use crate::rng;

/// Stepsize as a function of the 0-based iteration index.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSchedule {
    Constant(f64),
    /// `h_k = a/(b + k)` with `k` counted from 1. Any `a > 0`, `b ≥ 0` gives
    /// Σh_k = ∞ and Σh_k² < ∞.
    RobbinsMonro { numerator: f64, offset: f64 },
    /// `h_k = 1/(m·k)` with `k` counted from 1; `m` is the strong-convexity
    /// constant of the target.
    InverseIteration { strong_convexity: f64 },
}

impl StepSchedule {
    pub fn stepsize(&self, k: usize) -> f64 {
        match self {
            StepSchedule::Constant(h) => *h,
            StepSchedule::RobbinsMonro { numerator, offset } => {
                numerator / (offset + (k + 1) as f64)
            }
            StepSchedule::InverseIteration { strong_convexity } => {
                1.0 / (strong_convexity * (k + 1) as f64)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            StepSchedule::Constant(h) => *h > 0.0 && h.is_finite(),
            StepSchedule::RobbinsMonro { numerator, offset } => {
                *numerator > 0.0 && numerator.is_finite() && *offset >= 0.0 && offset.is_finite()
            }
            StepSchedule::InverseIteration { strong_convexity } => {
                *strong_convexity > 0.0 && strong_convexity.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("step schedule has a non-positive constant: {self:?}")))
        }
    }
}

/// Gradient source for the descent updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    /// Exact full gradient each step.
    Full,
    /// Uniform with-replacement minibatch of the given size.
    Minibatch(usize),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub schedule: StepSchedule,
    pub iterations: usize,
    pub batch: BatchMode,
    pub seed: u64,
    /// Keep every visited state and every gradient estimate. O(Kd) memory,
    /// so reserve it for analysis runs.
    pub record_trajectory: bool,
}

impl SgdConfig {
    pub fn new(schedule: StepSchedule, iterations: usize, batch: BatchMode, seed: u64) -> Self {
        SgdConfig {
            schedule,
            iterations,
            batch,
            seed,
            record_trajectory: false,
        }
    }

    fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch == BatchMode::Minibatch(0) {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of a descent run. With trajectory recording on, `state(k)` holds
/// `θ_k` for `k in 0..=K` and `estimate(k)` the gradient used for update `k`.
#[derive(Debug, Clone)]
pub struct SgdRun {
    dim: usize,
    iterations: usize,
    final_point: ParamVector,
    states: Option<Vec<f64>>,
    estimates: Option<Vec<f64>>,
    grad_evals: u64,
}

impl SgdRun {
    pub fn final_point(&self) -> &ParamVector {
        &self.final_point
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Per-datum gradient evaluations the run consumed.
    pub fn grad_evals(&self) -> u64 {
        self.grad_evals
    }

    pub fn state(&self, k: usize) -> Option<&[f64]> {
        self.states
            .as_ref()
            .map(|s| &s[k * self.dim..(k + 1) * self.dim])
    }

    pub fn estimate(&self, k: usize) -> Option<&[f64]> {
        self.estimates
            .as_ref()
            .map(|e| &e[k * self.dim..(k + 1) * self.dim])
    }
}

/// One descent update, in place.
pub fn sgd_step(theta: &mut ParamVector, gradient: &[f64], stepsize: f64) {
    for (t, g) in theta.values_mut().iter_mut().zip(gradient) {
        *t -= stepsize * g;
    }
}

pub fn run_sgd<M: GradientModel + ?Sized>(
    model: &M,
    initial: &ParamVector,
    config: &SgdConfig,
) -> Result<SgdRun> {
    config.validate()?;
    if initial.dim() != model.dim() {
        return Err(Error::Argument(format!(
            "initial point has dimension {}, model has {}",
            initial.dim(),
            model.dim()
        )));
    }
    let d = model.dim();
    let mut batcher = match config.batch {
        BatchMode::Full => None,
        BatchMode::Minibatch(n) => Some(MinibatchSampler::uniform(
            model.num_data(),
            n,
            rng::stream(config.seed, "optimize"),
        )?),
    };
    let per_iter_evals: u64 = match config.batch {
        BatchMode::Full => model.num_data() as u64,
        BatchMode::Minibatch(n) => n as u64,
    };

    let mut theta = initial.clone();
    let mut batch = Vec::new();
    let mut states = config
        .record_trajectory
        .then(|| Vec::with_capacity((config.iterations + 1) * d));
    let mut estimates = config
        .record_trajectory
        .then(|| Vec::with_capacity(config.iterations * d));
    let mut grad_evals: u64 = 0;

    for k in 0..config.iterations {
        let estimate = match batcher.as_mut() {
            None => full_gradient(model, &theta)?,
            Some(b) => {
                b.draw_into(&mut batch);
                naive_estimate(model, &theta, &batch)?.value
            }
        };
        grad_evals += per_iter_evals;
        if let Some(s) = states.as_mut() {
            s.extend_from_slice(theta.values());
        }
        if let Some(e) = estimates.as_mut() {
            e.extend_from_slice(estimate.values());
        }
        sgd_step(&mut theta, &estimate, config.schedule.stepsize(k));
        let bad = theta.values().iter().any(|v| !v.is_finite()) || theta.norm_sq() > 1e16;
        if bad {
            return Err(Error::State(format!(
                "descent diverged at iteration {k}; reduce the stepsize"
            )));
        }
    }
    if let Some(s) = states.as_mut() {
        s.extend_from_slice(theta.values());
    }

    Ok(SgdRun {
        dim: d,
        iterations: config.iterations,
        final_point: theta,
        states,
        estimates,
        grad_evals,
    })
}

/// A centering state plus the total per-datum gradient evaluations spent
/// producing it (descent plus the full-gradient and cache fills).
#[derive(Debug)]
pub struct CenteringRun {
    pub centering: CenteringState,
    pub grad_evals: u64,
}

/// Runs descent from `initial` and fixes the control variate at the end
/// point.
pub fn find_centering<M: GradientModel + ?Sized>(
    model: &M,
    initial: &ParamVector,
    config: &SgdConfig,
    cache: CacheMode,
) -> Result<CenteringRun> {
    let run = run_sgd(model, initial, config)?;
    let centering = CenteringState::new(model, run.final_point().clone(), cache)?;
    let setup_evals = match cache {
        CacheMode::Recompute => model.num_data() as u64,
        CacheMode::Cached => 2 * model.num_data() as u64,
    };
    Ok(CenteringRun {
        centering,
        grad_evals: run.grad_evals() + setup_evals,
    })
}
