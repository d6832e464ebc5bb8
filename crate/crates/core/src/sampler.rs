//! Stochastic gradient Langevin dynamics.
//!
//! One chain iterates
//!
//! ```text
//! θ_{k+1} = θ_k − (h/2) ∇f̂(θ_k) + ζ_k,   ζ_k ~ N(0, h·I)
//! ```
//!
//! where `∇f̂` is one of the gradient estimators from [`crate::estimators`]
//! (or the exact full gradient, for ground-truth runs). The driver records
//! every `thin`-th visited state together with the estimate evaluated there,
//! which is exactly the pairing the zero-variance post-processor consumes.
//!
//! Injected noise is drawn from a stream derived per iteration, so the noise
//! of any single step can be reproduced in isolation with [`replay_noise`]
//! without rerunning the chain.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::estimators::{
    cv_estimate, naive_estimate, saga_estimate_and_update, CenteringState, MinibatchSampler,
    SagaState,
};
use crate::model::{full_gradient, GradientModel, ParamVector};
use crate::rng;

/// Squared norm ceiling (`‖θ‖ > 1e8`) past which a chain is declared
/// divergent.
const DIVERGENCE_RADIUS_SQ: f64 = 1e16;

/// Which gradient estimate drives the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Full gradient every step; the Langevin baseline.
    Exact,
    /// Rescaled minibatch sum.
    Naive,
    /// Minibatch estimate centered at a fixed point.
    #[serde(rename = "cv")]
    ControlVariate,
    /// Minibatch estimate centered at a per-term gradient table.
    Saga,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Exact => "exact",
            EstimatorKind::Naive => "naive",
            EstimatorKind::ControlVariate => "cv",
            EstimatorKind::Saga => "saga",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(EstimatorKind::Exact),
            "naive" => Ok(EstimatorKind::Naive),
            "cv" => Ok(EstimatorKind::ControlVariate),
            "saga" => Ok(EstimatorKind::Saga),
            other => Err(Error::Argument(format!(
                "unknown estimator `{other}` (expected exact, naive, cv or saga)"
            ))),
        }
    }
}

/// How batch indices are weighted.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsSpec {
    /// `p_i = 1/N`.
    Uniform,
    /// `p_i ∝ L_i`, the per-term gradient Lipschitz constants.
    Lipschitz,
    /// Explicit probabilities, one per data term.
    Custom(Vec<f64>),
}

impl WeightsSpec {
    pub fn resolve<M: GradientModel + ?Sized>(&self, model: &M) -> Result<Vec<f64>> {
        let n = model.num_data();
        match self {
            WeightsSpec::Uniform => {
                if n == 0 {
                    return Err(Error::Config("model has no data terms to weight".into()));
                }
                Ok(vec![1.0 / n as f64; n])
            }
            WeightsSpec::Lipschitz => {
                let constants = model.lipschitz_constants().ok_or_else(|| {
                    Error::Capability("per-term Lipschitz constants".into())
                })?;
                crate::estimators::lipschitz_weights(&constants)
            }
            WeightsSpec::Custom(w) => {
                if w.len() != n {
                    return Err(Error::Config(format!(
                        "{} custom weights supplied for {n} data terms",
                        w.len()
                    )));
                }
                if w.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
                    return Err(Error::Config("custom weights must be strictly positive".into()));
                }
                let total: f64 = w.iter().sum();
                if (total - 1.0).abs() > 1e-8 {
                    return Err(Error::Config(format!(
                        "custom weights sum to {total}, expected 1"
                    )));
                }
                Ok(w.clone())
            }
        }
    }
}

/// Everything a chain run needs besides the model and the start point.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub estimator: EstimatorKind,
    pub stepsize: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Record every `thin`-th state (1 keeps them all).
    pub thin: usize,
    pub weights: WeightsSpec,
    pub record_gradients: bool,
}

impl SamplerConfig {
    pub fn new(
        estimator: EstimatorKind,
        stepsize: f64,
        batch_size: usize,
        iterations: usize,
        seed: u64,
    ) -> Self {
        SamplerConfig {
            estimator,
            stepsize,
            batch_size,
            iterations,
            seed,
            thin: 1,
            weights: WeightsSpec::Uniform,
            record_gradients: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.stepsize > 0.0) || !self.stepsize.is_finite() {
            return Err(Error::Config(format!("stepsize must be positive, got {}", self.stepsize)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thinning interval must be at least 1".into()));
        }
        if self.batch_size == 0 && self.estimator != EstimatorKind::Exact {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.estimator != EstimatorKind::ControlVariate && self.weights != WeightsSpec::Uniform
        {
            return Err(Error::Config(format!(
                "non-uniform batch weights are only supported by the cv estimator, not {}",
                self.estimator
            )));
        }
        Ok(())
    }
}

/// The output of one chain: thinned states, matching gradient estimates, and
/// the state after the final update.
#[derive(Debug, Clone)]
pub struct ChainRecord {
    config: SamplerConfig,
    dim: usize,
    retained: Vec<usize>,
    samples: Vec<f64>,
    gradients: Option<Vec<f64>>,
    elapsed: Vec<f64>,
    final_state: ParamVector,
    completed: usize,
    grad_evals: u64,
}

impl ChainRecord {
    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_retained(&self) -> usize {
        self.retained.len()
    }

    /// Iteration index at which retained row `r` was visited.
    pub fn iteration_of(&self, r: usize) -> usize {
        self.retained[r]
    }

    /// Wall-clock seconds from chain start to the recording of row `r`.
    /// Informational only; nothing downstream keys off these.
    pub fn elapsed_seconds(&self, r: usize) -> f64 {
        self.elapsed[r]
    }

    pub fn sample(&self, r: usize) -> &[f64] {
        &self.samples[r * self.dim..(r + 1) * self.dim]
    }

    pub fn gradient(&self, r: usize) -> Option<&[f64]> {
        self.gradients
            .as_ref()
            .map(|g| &g[r * self.dim..(r + 1) * self.dim])
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.dim)
    }

    pub fn gradient_rows(&self) -> Option<impl Iterator<Item = &[f64]>> {
        self.gradients.as_ref().map(|g| g.chunks_exact(self.dim))
    }

    /// Component `j` of every retained sample, oldest first.
    pub fn column(&self, j: usize) -> Vec<f64> {
        assert!(j < self.dim, "component {j} out of range for dimension {}", self.dim);
        self.rows().map(|row| row[j]).collect()
    }

    /// State after the last completed update.
    pub fn final_state(&self) -> &ParamVector {
        &self.final_state
    }

    /// Updates actually performed; shorter than requested only when attached
    /// to a divergence error.
    pub fn completed_iterations(&self) -> usize {
        self.completed
    }

    /// Per-datum gradient evaluations consumed, including estimator setup
    /// inside the run (a SAGA table fill, for instance).
    pub fn grad_evals(&self) -> u64 {
        self.grad_evals
    }
}

/// The noise vector `ζ` injected at one iteration of a chain.
pub fn replay_noise(seed: u64, iteration: usize, dim: usize, stepsize: f64) -> Vec<f64> {
    let mut rng = rng::indexed_stream(seed, "noise", iteration as u64);
    let sqrt_h = stepsize.sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sqrt_h * z
        })
        .collect()
}

/// Runs one SGLD chain from `initial`.
///
/// `centering` must be given exactly when the configured estimator is
/// [`EstimatorKind::ControlVariate`]; other estimators carry their own state.
/// On divergence the partly-built record travels inside the error.
pub fn run_chain<M: GradientModel + ?Sized>(
    model: &M,
    initial: &ParamVector,
    config: &SamplerConfig,
    centering: Option<&CenteringState>,
) -> Result<ChainRecord> {
    config.validate()?;
    if initial.dim() != model.dim() {
        return Err(Error::Argument(format!(
            "initial point has dimension {}, model has {}",
            initial.dim(),
            model.dim()
        )));
    }
    match (config.estimator, centering.is_some()) {
        (EstimatorKind::ControlVariate, false) => {
            return Err(Error::Argument(
                "the cv estimator needs a centering state; build one with CenteringState::new".into(),
            ))
        }
        (EstimatorKind::ControlVariate, true) => {}
        (_, true) => {
            return Err(Error::Argument(format!(
                "a centering state was supplied but the {} estimator does not use one",
                config.estimator
            )))
        }
        (_, false) => {}
    }

    let d = model.dim();
    let needs_batches = config.estimator != EstimatorKind::Exact;
    if needs_batches && config.batch_size > model.num_data() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} data terms",
            config.batch_size,
            model.num_data()
        )));
    }
    let probs;
    let mut batcher = if needs_batches {
        let p = config.weights.resolve(model)?;
        let sampler =
            MinibatchSampler::weighted(p.clone(), config.batch_size, rng::stream(config.seed, "batch"))?;
        probs = p;
        Some(sampler)
    } else {
        probs = Vec::new();
        None
    };

    let mut saga = match config.estimator {
        EstimatorKind::Saga => Some(SagaState::init(model, initial)?),
        _ => None,
    };

    let per_iter_evals: u64 = match config.estimator {
        EstimatorKind::Exact => model.num_data() as u64,
        EstimatorKind::Naive | EstimatorKind::Saga => config.batch_size as u64,
        EstimatorKind::ControlVariate => {
            let replays = match centering.expect("checked above").cache_mode() {
                crate::estimators::CacheMode::Cached => 1,
                crate::estimators::CacheMode::Recompute => 2,
            };
            config.batch_size as u64 * replays
        }
    };
    let mut grad_evals: u64 = if saga.is_some() { model.num_data() as u64 } else { 0 };

    let retain_count = (config.iterations + config.thin - 1) / config.thin;
    let mut retained = Vec::with_capacity(retain_count);
    let mut samples = Vec::with_capacity(retain_count * d);
    let mut gradients = if config.record_gradients {
        Some(Vec::with_capacity(retain_count * d))
    } else {
        None
    };
    let mut elapsed = Vec::with_capacity(retain_count);
    let started = std::time::Instant::now();

    let half_h = 0.5 * config.stepsize;
    let sqrt_h = config.stepsize.sqrt();
    let mut theta = initial.clone();
    let mut prev = vec![0.0; d];
    let mut batch = Vec::with_capacity(config.batch_size);

    for k in 0..config.iterations {
        let estimate = match config.estimator {
            EstimatorKind::Exact => full_gradient(model, &theta)?,
            EstimatorKind::Naive => {
                batcher.as_mut().expect("batcher exists").draw_into(&mut batch);
                naive_estimate(model, &theta, &batch)?.value
            }
            EstimatorKind::ControlVariate => {
                batcher.as_mut().expect("batcher exists").draw_into(&mut batch);
                cv_estimate(model, &theta, centering.expect("checked above"), &batch, &probs)?
                    .value
            }
            EstimatorKind::Saga => {
                batcher.as_mut().expect("batcher exists").draw_into(&mut batch);
                saga_estimate_and_update(model, &theta, saga.as_mut().expect("saga exists"), &batch)?
                    .value
            }
        };
        grad_evals += per_iter_evals;

        if k % config.thin == 0 {
            retained.push(k);
            samples.extend_from_slice(theta.values());
            if let Some(g) = gradients.as_mut() {
                g.extend_from_slice(estimate.values());
            }
            elapsed.push(started.elapsed().as_secs_f64());
        }

        prev.copy_from_slice(theta.values());
        let mut noise_rng = rng::indexed_stream(config.seed, "noise", k as u64);
        let state = theta.values_mut();
        let mut norm_sq = 0.0;
        let mut finite = true;
        for (j, s) in state.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            *s = *s - half_h * estimate[j] + sqrt_h * z;
            norm_sq += *s * *s;
            finite &= s.is_finite();
        }
        if !finite || norm_sq > DIVERGENCE_RADIUS_SQ {
            // Report the last state that was still inside the admissible
            // region, not the one that escaped it.
            let partial = ChainRecord {
                config: config.clone(),
                dim: d,
                retained,
                samples,
                gradients,
                elapsed,
                final_state: ParamVector::new(prev).expect("pre-step state is finite"),
                completed: k,
                grad_evals,
            };
            return Err(Error::Diverged {
                iteration: k,
                partial: Box::new(partial),
            });
        }
    }

    Ok(ChainRecord {
        config: config.clone(),
        dim: d,
        retained,
        samples,
        gradients,
        elapsed,
        final_state: theta,
        completed: config.iterations,
        grad_evals,
    })
}
