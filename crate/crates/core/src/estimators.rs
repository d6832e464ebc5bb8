//! Unbiased minibatch estimators of the full posterior gradient.
//!
//! All three estimators draw batches i.i.d. with replacement from a
//! categorical distribution over the data indices, so their expectation over
//! the batch draw equals `∇f(θ)` exactly for any fixed state:
//!
//! * [`naive_estimate`] rescales the batch sum by `N/n`;
//! * [`cv_estimate`] subtracts per-term gradients at a fixed centering point
//!   `θ̂` and adds back the stored full gradient there, which shrinks the
//!   variance to `O(‖θ − θ̂‖²)`;
//! * [`saga_estimate_and_update`] keeps a gradient table that is refreshed
//!   one batch at a time instead of being anchored at a single point.

use rand::distributions::{Distribution, WeightedIndex};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{full_gradient, GradientModel, ParamVector};

/// A gradient estimate together with the batch that produced it.
#[derive(Debug, Clone)]
pub struct GradEstimate {
    pub value: ParamVector,
    pub indices: Vec<usize>,
}

/// Draws index batches i.i.d. with replacement from `categorical(p)`.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    probs: Vec<f64>,
    table: WeightedIndex<f64>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl MinibatchSampler {
    /// Uniform weights `p_i = 1/N`.
    pub fn uniform(num_data: usize, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if num_data == 0 {
            return Err(Error::Config("cannot sample batches from an empty dataset".into()));
        }
        Self::weighted(vec![1.0 / num_data as f64; num_data], batch_size, rng)
    }

    /// Arbitrary strictly positive weights summing to 1.
    pub fn weighted(probs: Vec<f64>, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if probs.is_empty() || probs.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::Config("batch weights must be strictly positive".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(Error::Config(format!("batch weights sum to {total}, expected 1")));
        }
        let table = WeightedIndex::new(&probs)
            .map_err(|e| Error::Config(format!("invalid batch weights: {e}")))?;
        Ok(MinibatchSampler {
            probs,
            table,
            batch_size,
            rng,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn draw(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.batch_size);
        self.draw_into(&mut batch);
        batch
    }

    pub fn draw_into(&mut self, batch: &mut Vec<usize>) {
        batch.clear();
        for _ in 0..self.batch_size {
            batch.push(self.table.sample(&mut self.rng));
        }
    }
}

/// Normalizes per-datum Lipschitz constants into batch weights
/// `p_i = L_i / Σ_j L_j`.
pub fn lipschitz_weights(constants: &[f64]) -> Result<Vec<f64>> {
    if constants.is_empty() {
        return Err(Error::Argument("no Lipschitz constants supplied".into()));
    }
    if constants.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::Argument("Lipschitz constants must be strictly positive".into()));
    }
    let total: f64 = constants.iter().sum();
    Ok(constants.iter().map(|l| l / total).collect())
}

/// `∇f̂(θ) = ∇f_0(θ) + (N/n) Σ_{i∈batch} ∇f_i(θ)`.
///
/// Unbiased when the batch is drawn uniformly with replacement; a batch that
/// lists every index exactly once reproduces the full gradient.
pub fn naive_estimate<M: GradientModel + ?Sized>(
    model: &M,
    theta: &ParamVector,
    batch: &[usize],
) -> Result<GradEstimate> {
    check_batch(model, theta, batch)?;
    let d = model.dim();
    let mut term = vec![0.0; d];
    let mut sum = vec![0.0; d];
    for &i in batch {
        model.grad_term(theta, i, &mut term);
        for (s, t) in sum.iter_mut().zip(&term) {
            *s += t;
        }
    }
    let scale = model.num_data() as f64 / batch.len() as f64;
    model.grad_prior(theta, &mut term);
    for (s, t) in sum.iter_mut().zip(&term) {
        *s = *s * scale + t;
    }
    finish(sum, batch)
}

/// How a [`CenteringState`] serves per-term gradients at `θ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CacheMode {
    /// Recompute `∇f_i(θ̂)` on demand; no extra memory.
    Recompute,
    /// Store all `N` term gradients at `θ̂` up front; O(Nd) memory.
    Cached,
}

/// The fixed centering point of the control-variate estimator: `θ̂`, the full
/// gradient there, and optionally the cached per-term gradients.
#[derive(Debug, Clone)]
pub struct CenteringState {
    theta_hat: ParamVector,
    grad_full: ParamVector,
    term_cache: Option<Vec<f64>>,
}

impl CenteringState {
    pub fn new<M: GradientModel + ?Sized>(
        model: &M,
        theta_hat: ParamVector,
        cache: CacheMode,
    ) -> Result<Self> {
        let grad_full = full_gradient(model, &theta_hat)?;
        let term_cache = match cache {
            CacheMode::Recompute => None,
            CacheMode::Cached => {
                let d = model.dim();
                let mut cache = vec![0.0; model.num_data() * d];
                for i in 0..model.num_data() {
                    model.grad_term(&theta_hat, i, &mut cache[i * d..(i + 1) * d]);
                }
                Some(cache)
            }
        };
        Ok(CenteringState {
            theta_hat,
            grad_full,
            term_cache,
        })
    }

    /// Rebuilds a state from persisted values, checking them against the
    /// model so a stale artifact cannot silently bias the estimator.
    pub fn from_parts<M: GradientModel + ?Sized>(
        model: &M,
        theta_hat: ParamVector,
        grad_full: ParamVector,
        cache: CacheMode,
    ) -> Result<Self> {
        let fresh = Self::new(model, theta_hat, cache)?;
        let drift = fresh.grad_full.distance_sq(&grad_full).sqrt();
        let scale = fresh.grad_full.norm_sq().sqrt().max(1.0);
        if drift > 1e-9 * scale {
            return Err(Error::State(format!(
                "stored centering gradient disagrees with the model (drift {drift:.3e}); \
                 was it produced from a different dataset?"
            )));
        }
        Ok(fresh)
    }

    pub fn theta_hat(&self) -> &ParamVector {
        &self.theta_hat
    }

    pub fn grad_full(&self) -> &ParamVector {
        &self.grad_full
    }

    pub fn cache_mode(&self) -> CacheMode {
        if self.term_cache.is_some() {
            CacheMode::Cached
        } else {
            CacheMode::Recompute
        }
    }

    fn term_at_hat<M: GradientModel + ?Sized>(&self, model: &M, i: usize, out: &mut [f64]) {
        match &self.term_cache {
            Some(cache) => {
                let d = out.len();
                out.copy_from_slice(&cache[i * d..(i + 1) * d]);
            }
            None => model.grad_term(&self.theta_hat, i, out),
        }
    }
}

/// Control-variate estimate
/// `∇f̃(θ) = ∇f(θ̂) + ∇f_0(θ) − ∇f_0(θ̂) + (1/n) Σ_{i∈batch} (1/p_i) [∇f_i(θ) − ∇f_i(θ̂)]`.
///
/// `probs` must be the weights the batch was drawn from. At `θ = θ̂` every
/// bracket vanishes and the estimate is exactly `∇f(θ̂)`.
pub fn cv_estimate<M: GradientModel + ?Sized>(
    model: &M,
    theta: &ParamVector,
    centering: &CenteringState,
    batch: &[usize],
    probs: &[f64],
) -> Result<GradEstimate> {
    check_batch(model, theta, batch)?;
    if probs.len() != model.num_data() {
        return Err(Error::Argument(format!(
            "{} batch weights supplied for {} data terms",
            probs.len(),
            model.num_data()
        )));
    }
    if centering.theta_hat.dim() != model.dim() {
        return Err(Error::State("centering dimension does not match the model".into()));
    }
    let d = model.dim();
    let mut sum = vec![0.0; d];
    let mut term = vec![0.0; d];
    let mut term_hat = vec![0.0; d];
    for &i in batch {
        let p = probs[i];
        if !(p > 0.0) {
            return Err(Error::Config(format!("sampled index {i} has non-positive weight {p}")));
        }
        model.grad_term(theta, i, &mut term);
        centering.term_at_hat(model, i, &mut term_hat);
        let w = 1.0 / p;
        for ((s, t), th) in sum.iter_mut().zip(&term).zip(&term_hat) {
            *s += w * (t - th);
        }
    }
    let inv_n = 1.0 / batch.len() as f64;
    model.grad_prior(theta, &mut term);
    model.grad_prior(&centering.theta_hat, &mut term_hat);
    for (((s, g), t), th) in sum
        .iter_mut()
        .zip(centering.grad_full.values())
        .zip(&term)
        .zip(&term_hat)
    {
        *s = *s * inv_n + g + t - th;
    }
    finish(sum, batch)
}

/// Per-term gradient table for the SAGA estimator. Index 0 holds the prior
/// term; indices 1..=N hold the data terms. The running sum over the table
/// is maintained incrementally.
#[derive(Debug, Clone)]
pub struct SagaState {
    table: Vec<f64>,
    sum: Vec<f64>,
    dim: usize,
    num_data: usize,
}

impl SagaState {
    /// One full pass at `θ_0` fills the table, so the first estimate sees
    /// zero lag.
    pub fn init<M: GradientModel + ?Sized>(model: &M, theta0: &ParamVector) -> Result<Self> {
        if theta0.dim() != model.dim() {
            return Err(Error::Argument("initial point dimension does not match the model".into()));
        }
        let d = model.dim();
        let n_terms = model.num_data() + 1;
        let mut table = vec![0.0; n_terms * d];
        model.grad_prior(theta0, &mut table[..d]);
        for i in 0..model.num_data() {
            let row = &mut table[(i + 1) * d..(i + 2) * d];
            model.grad_term(theta0, i, row);
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(Error::State("non-finite gradient while initializing the table".into()));
        }
        let mut sum = vec![0.0; d];
        for row in table.chunks_exact(d) {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        Ok(SagaState {
            table,
            sum,
            dim: d,
            num_data: model.num_data(),
        })
    }

    pub fn num_data(&self) -> usize {
        self.num_data
    }

    /// Stored gradient for table slot `i` (0 is the prior, `i ≥ 1` is datum
    /// `i − 1`).
    pub fn stored(&self, i: usize) -> &[f64] {
        &self.table[i * self.dim..(i + 1) * self.dim]
    }

    pub fn running_sum(&self) -> &[f64] {
        &self.sum
    }

    /// The estimate at `θ` for `batch`, without touching the table:
    /// `Σ_i g_i + (N/n) Σ_{i∈batch} [∇f_i(θ) − g_i] + ∇f_0(θ) − g_0`.
    pub fn estimate<M: GradientModel + ?Sized>(
        &self,
        model: &M,
        theta: &ParamVector,
        batch: &[usize],
    ) -> Result<GradEstimate> {
        check_batch(model, theta, batch)?;
        if model.num_data() != self.num_data || model.dim() != self.dim {
            return Err(Error::State("table shape does not match the model".into()));
        }
        let d = self.dim;
        let mut acc = vec![0.0; d];
        let mut term = vec![0.0; d];
        for &i in batch {
            model.grad_term(theta, i, &mut term);
            let stored = self.stored(i + 1);
            for ((a, t), s) in acc.iter_mut().zip(&term).zip(stored) {
                *a += t - s;
            }
        }
        let scale = self.num_data as f64 / batch.len() as f64;
        model.grad_prior(theta, &mut term);
        for (((a, s), t), p) in acc
            .iter_mut()
            .zip(&self.sum)
            .zip(&term)
            .zip(self.stored(0))
        {
            *a = *a * scale + s + t - p;
        }
        finish(acc, batch)
    }

    /// Overwrites the table rows for the sampled indices and the prior with
    /// gradients at `θ`, keeping the running sum consistent.
    pub fn update<M: GradientModel + ?Sized>(&mut self, model: &M, theta: &ParamVector, batch: &[usize]) {
        let d = self.dim;
        let mut term = vec![0.0; d];
        model.grad_prior(theta, &mut term);
        self.replace_row(0, &term);
        // A repeated index is refreshed once; later occurrences rewrite the
        // same row with the same value.
        for &i in batch {
            model.grad_term(theta, i, &mut term);
            self.replace_row(i + 1, &term);
        }
    }

    fn replace_row(&mut self, slot: usize, value: &[f64]) {
        let row = &mut self.table[slot * self.dim..(slot + 1) * self.dim];
        for ((s, old), new) in self.sum.iter_mut().zip(row.iter()).zip(value) {
            *s += new - old;
        }
        row.copy_from_slice(value);
    }
}

/// SAGA step: compute the estimate for `batch`, then fold the fresh term
/// gradients into the table. Equivalent to [`SagaState::estimate`] followed
/// by [`SagaState::update`] but evaluates each term gradient once.
pub fn saga_estimate_and_update<M: GradientModel + ?Sized>(
    model: &M,
    theta: &ParamVector,
    state: &mut SagaState,
    batch: &[usize],
) -> Result<GradEstimate> {
    check_batch(model, theta, batch)?;
    if model.num_data() != state.num_data || model.dim() != state.dim {
        return Err(Error::State("table shape does not match the model".into()));
    }
    let d = state.dim;
    let mut acc = vec![0.0; d];
    let mut fresh = Vec::with_capacity(batch.len());
    let mut term = vec![0.0; d];
    // A repeated index must subtract the table entry as it stood when the
    // batch was drawn, so replacements wait until the estimate is assembled.
    for &i in batch {
        model.grad_term(theta, i, &mut term);
        for ((a, t), s) in acc.iter_mut().zip(&term).zip(state.stored(i + 1)) {
            *a += t - s;
        }
        fresh.push((i + 1, term.clone()));
    }
    let scale = state.num_data as f64 / batch.len() as f64;
    let mut prior = vec![0.0; d];
    model.grad_prior(theta, &mut prior);
    for (((a, s), t), p) in acc
        .iter_mut()
        .zip(&state.sum)
        .zip(&prior)
        .zip(state.stored(0))
    {
        *a = *a * scale + s + t - p;
    }
    let est = finish(acc, batch)?;
    state.replace_row(0, &prior);
    for (slot, value) in &fresh {
        state.replace_row(*slot, value);
    }
    Ok(est)
}

fn check_batch<M: GradientModel + ?Sized>(model: &M, theta: &ParamVector, batch: &[usize]) -> Result<()> {
    if theta.dim() != model.dim() {
        return Err(Error::Argument(format!(
            "parameter dimension {} does not match model dimension {}",
            theta.dim(),
            model.dim()
        )));
    }
    if batch.is_empty() {
        return Err(Error::Argument("batch must contain at least one index".into()));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= model.num_data()) {
        return Err(Error::Argument(format!(
            "batch index {bad} out of range for {} data terms",
            model.num_data()
        )));
    }
    Ok(())
}

fn finish(value: Vec<f64>, batch: &[usize]) -> Result<GradEstimate> {
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::State("gradient estimate is not finite".into()));
    }
    Ok(GradEstimate {
        value: ParamVector::new(value).expect("checked finite"),
        indices: batch.to_vec(),
    })
}
