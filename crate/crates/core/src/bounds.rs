//! Non-asymptotic Wasserstein guarantees for the sampler and descent phases.
//!
//! For an `m`-strongly-convex, `M`-smooth negative log density, one SGLD
//! step with stepsize `h` and minibatch size `n` contracts the Wasserstein-2
//! distance to the target through the recurrence
//!
//! ```text
//! x_{k+1} = sqrt( ((1−A) x_k + C)² + B² )
//! ```
//!
//! with `A` the contraction rate, `C` the discretization error of one step
//! and `B` the estimator-noise contribution. Every iterate of that
//! recurrence is dominated by the closed-form envelope in
//! [`contraction_envelope`], which is what the tuning functions invert to a
//! stepsize, batch size and iteration budget for a requested accuracy.

use crate::error::{Error, Result};

/// Constant in the one-step discretization error `C = α·M·sqrt(h³ d)`.
pub const DISCRETIZATION_ALPHA: f64 = 7.0 * std::f64::consts::SQRT_2 / 6.0;

/// Curvature envelope of the target: `m‖u‖² ≤ uᵀ∇²f u ≤ M‖u‖²`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CurvatureBounds {
    strong_convexity: f64,
    smoothness: f64,
}

impl CurvatureBounds {
    pub fn new(strong_convexity: f64, smoothness: f64) -> Result<Self> {
        if !(strong_convexity > 0.0) || !strong_convexity.is_finite() {
            return Err(Error::Argument(format!(
                "strong convexity must be positive, got {strong_convexity}"
            )));
        }
        if !(smoothness >= strong_convexity) || !smoothness.is_finite() {
            return Err(Error::Argument(format!(
                "smoothness {smoothness} must be at least the strong convexity {strong_convexity}"
            )));
        }
        Ok(CurvatureBounds {
            strong_convexity,
            smoothness,
        })
    }

    /// Sums per-term curvature over a prior plus `num_data` likelihood terms
    /// that are each `l`-strongly convex and `L`-smooth.
    pub fn from_terms(l: f64, big_l: f64, num_data: usize) -> Result<Self> {
        let terms = (num_data + 1) as f64;
        Self::new(terms * l, terms * big_l)
    }

    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    /// Condition ratio `R = M/m ≥ 1`.
    pub fn ratio(&self) -> f64 {
        self.smoothness / self.strong_convexity
    }

    /// Largest stepsize for which one SGLD step contracts at every batch
    /// size: `2m/(2M² + m²)`.
    pub fn stepsize_limit(&self) -> f64 {
        let m = self.strong_convexity;
        let big_m = self.smoothness;
        2.0 * m / (2.0 * big_m * big_m + m * m)
    }
}

/// One-step contraction data `(A, B, C)` for a sampler configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionTriple {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ContractionTriple {
    /// Closed-form envelope after `k` steps starting `w0` away from the
    /// target.
    pub fn envelope(&self, w0: f64, k: u64) -> f64 {
        contraction_envelope(self.a, self.b, self.c, w0, k)
    }

    /// The `k → ∞` limit of the envelope.
    pub fn floor(&self) -> f64 {
        contraction_envelope(self.a, self.b, self.c, 0.0, 0)
    }
}

/// Contraction data for SGLD driven by a centered minibatch estimator whose
/// centering point sits `centering_gap_sq` (in squared expectation) from the
/// posterior mean.
///
/// Requires `h < 2m/(2M² + m²)`; that threshold makes the contraction rate
/// positive at every batch size.
pub fn sgld_contraction(
    curvature: &CurvatureBounds,
    stepsize: f64,
    batch_size: usize,
    dim: usize,
    centering_gap_sq: f64,
) -> Result<ContractionTriple> {
    check_stepsize(curvature, stepsize)?;
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    if dim == 0 {
        return Err(Error::Argument("dimension must be at least 1".into()));
    }
    if !(centering_gap_sq >= 0.0) || !centering_gap_sq.is_finite() {
        return Err(Error::Argument(format!(
            "centering gap must be a finite square, got {centering_gap_sq}"
        )));
    }
    let m = curvature.strong_convexity;
    let big_m = curvature.smoothness;
    let h = stepsize;
    let n = batch_size as f64;
    let d = dim as f64;

    let noise = 2.0 * h * h * big_m * big_m / n;
    // A = 1 − sqrt(noise + (1−mh)²), evaluated as (1−s)/(1+√s) to survive
    // tiny stepsizes without cancellation.
    let s = noise + (1.0 - m * h) * (1.0 - m * h);
    let one_minus_s = h * (2.0 * m - m * m * h - 2.0 * h * big_m * big_m / n);
    let a = one_minus_s / (1.0 + s.sqrt());

    let b = (noise * (centering_gap_sq + d / m)).sqrt();
    let c = DISCRETIZATION_ALPHA * big_m * (h * h * h * d).sqrt();
    Ok(ContractionTriple { a, b, c })
}

/// Contraction data for exact-gradient Langevin: the `n → ∞` limit of
/// [`sgld_contraction`], with no noise term.
pub fn langevin_contraction(
    curvature: &CurvatureBounds,
    stepsize: f64,
    dim: usize,
) -> Result<ContractionTriple> {
    check_stepsize(curvature, stepsize)?;
    if dim == 0 {
        return Err(Error::Argument("dimension must be at least 1".into()));
    }
    let h = stepsize;
    Ok(ContractionTriple {
        a: curvature.strong_convexity * h,
        b: 0.0,
        c: DISCRETIZATION_ALPHA * curvature.smoothness * (h * h * h * dim as f64).sqrt(),
    })
}

fn check_stepsize(curvature: &CurvatureBounds, stepsize: f64) -> Result<()> {
    if !(stepsize > 0.0) || !stepsize.is_finite() {
        return Err(Error::Argument(format!("stepsize must be positive, got {stepsize}")));
    }
    let limit = curvature.stepsize_limit();
    if stepsize >= limit {
        return Err(Error::Argument(format!(
            "stepsize {stepsize} is not below the contraction threshold {limit:.6e}"
        )));
    }
    Ok(())
}

/// One step of the distance recurrence.
pub fn contraction_step(a: f64, b: f64, c: f64, x: f64) -> f64 {
    let drift = (1.0 - a) * x + c;
    (drift * drift + b * b).sqrt()
}

/// `(1−A)^k x₀ + C/A + B²/(C + √A·B)`, which dominates the `k`-th iterate
/// of [`contraction_step`] from `x₀`. The noise term vanishes with `B`.
pub fn contraction_envelope(a: f64, b: f64, c: f64, x0: f64, k: u64) -> f64 {
    let transient = (1.0 - a).powf(k as f64) * x0;
    let noise = if b == 0.0 {
        0.0
    } else {
        b * b / (c + a.sqrt() * b)
    };
    transient + c / a + noise
}

/// Minibatch noise bound for the centered estimator under weights
/// proportional to the per-term Lipschitz constants:
/// `E‖ξ‖² ≤ (Σ_i L_i)²/n · E‖θ − θ̂‖²`.
pub fn centered_noise_bound(sum_term_lipschitz: f64, batch_size: usize, distance_sq: f64) -> Result<f64> {
    if !(sum_term_lipschitz >= 0.0) || batch_size == 0 || !(distance_sq >= 0.0) {
        return Err(Error::Argument(
            "noise bound needs a non-negative Lipschitz sum, a positive batch and a non-negative distance"
                .into(),
        ));
    }
    Ok(sum_term_lipschitz * sum_term_lipschitz / batch_size as f64 * distance_sq)
}

/// Minibatch noise bound for the rescaled-sum estimator:
/// `E‖ξ‖² ≤ 2N²σ²/n`, with `σ²` the mean squared scatter of the per-term
/// gradients around their average.
pub fn rescaled_noise_bound(num_data: usize, batch_size: usize, term_scatter: f64) -> Result<f64> {
    if batch_size == 0 || !(term_scatter >= 0.0) {
        return Err(Error::Argument(
            "noise bound needs a positive batch and non-negative scatter".into(),
        ));
    }
    let n_sq = (num_data as f64) * (num_data as f64);
    Ok(2.0 * n_sq * term_scatter / batch_size as f64)
}

/// Mean squared error guarantee for descent with the `1/(mk)` schedule:
/// `E‖θ_{K+1} − θ*‖² ≤ 4D²/(m²K)` when `E‖∇f̂‖² ≤ D²` along the run.
pub fn descent_mse_bound(gradient_bound_sq: f64, strong_convexity: f64, iterations: u64) -> Result<f64> {
    if !(gradient_bound_sq >= 0.0) || !(strong_convexity > 0.0) || iterations == 0 {
        return Err(Error::Argument(
            "descent bound needs a non-negative gradient bound, positive curvature and at least one iteration"
                .into(),
        ));
    }
    Ok(4.0 * gradient_bound_sq / (strong_convexity * strong_convexity * iterations as f64))
}

/// Stepsize cap `(1/m)·max{n/(2R²+n), ε₀²/(64R²α²d)}` quoted by the tuning
/// analysis. The max picks the laxer of the two regimes; a configuration
/// that must satisfy both regimes at once should use the conservative value
/// chosen by [`accuracy_budget`] instead.
pub fn stepsize_cap(curvature: &CurvatureBounds, dim: usize, target: f64, batch_size: usize) -> Result<f64> {
    check_budget_args(dim, target)?;
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let r = curvature.ratio();
    let n = batch_size as f64;
    let contraction_regime = n / (2.0 * r * r + n);
    let discretization_regime = discretization_cap(r, dim, target);
    Ok(contraction_regime.max(discretization_regime) / curvature.strong_convexity)
}

/// `ε₀²/(64 R² α² d)`: the `hm` ceiling that keeps one-step discretization
/// error inside the accuracy budget.
fn discretization_cap(r: f64, dim: usize, target: f64) -> f64 {
    target * target / (64.0 * r * r * DISCRETIZATION_ALPHA * DISCRETIZATION_ALPHA * dim as f64)
}

/// Sampler settings guaranteed to reach `W₂ ≤ ε₀/√m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyBudget {
    /// Conforming stepsize; sits at or below [`stepsize_cap`].
    pub stepsize: f64,
    /// Minibatch size making the estimator-noise term small enough.
    pub batch_size: usize,
    /// Iterations needed to flush the initialization transient.
    pub iterations: u64,
}

/// Inverts the envelope: produces `(h, n, K)` with
/// `envelope(K) ≤ ε₀/√m` for a chain started `start_gap_sq` (squared
/// expectation) from the posterior mean, with a centering point
/// `centering_gap_sq` away.
///
/// The three outputs split the budget as `ε₀/2` for the transient and
/// `ε₀/4` each for discretization and estimator noise, so the guarantee
/// holds with slack; see the consistency tests.
pub fn accuracy_budget(
    curvature: &CurvatureBounds,
    dim: usize,
    target: f64,
    start_gap_sq: f64,
    centering_gap_sq: f64,
) -> Result<AccuracyBudget> {
    check_budget_args(dim, target)?;
    for (label, v) in [("start", start_gap_sq), ("centering", centering_gap_sq)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Argument(format!(
                "{label} gap must be a finite square, got {v}"
            )));
        }
    }
    let m = curvature.strong_convexity;
    let r = curvature.ratio();
    let d = dim as f64;
    let eps_sq = target * target;

    // hm never exceeds β below, which is what lets the batch size be fixed
    // before the stepsize.
    let disc = discretization_cap(r, dim, target);
    let beta = (1.0 / (2.0 * r * r + 1.0)).max(disc);
    let moment_scale = centering_gap_sq + d / m;
    let n_min = (64.0 * r * r * beta * m * moment_scale / eps_sq).ceil().max(1.0);
    let batch_size = n_min as usize;

    let hm = (n_min / (2.0 * r * r + n_min)).min(disc);
    let stepsize = hm / m;

    let burn = (4.0 * m * (start_gap_sq + d / m) / eps_sq).ln().max(0.0) / m;
    let iterations = ((burn / stepsize).ceil() as u64).max(1);

    Ok(AccuracyBudget {
        stepsize,
        batch_size,
        iterations,
    })
}

/// The iteration-batch product `K·n` implied by the budget's closed form.
/// Invariant in the data size when the curvature grows linearly with it and
/// the start and centering gaps shrink like `1/m`.
pub fn iteration_batch_product(
    curvature: &CurvatureBounds,
    dim: usize,
    target: f64,
    start_gap_sq: f64,
    centering_gap_sq: f64,
) -> Result<f64> {
    check_budget_args(dim, target)?;
    let m = curvature.strong_convexity;
    let r = curvature.ratio();
    let d = dim as f64;
    let eps_sq = target * target;

    let disc = discretization_cap(r, dim, target);
    let c1 = (2.0 * r * r + 1.0).min(1.0 / disc);
    let beta = (1.0 / (2.0 * r * r + 1.0)).max(disc);
    let c2 = 64.0 * r * r * beta / eps_sq;

    let iterations = c1 * (m * start_gap_sq + d).ln() + c1 * (4.0 / eps_sq).ln() + 1.0;
    let batch = c2 * m * centering_gap_sq + c2 * d + 1.0;
    Ok(iterations * batch)
}

fn check_budget_args(dim: usize, target: f64) -> Result<()> {
    if dim == 0 {
        return Err(Error::Argument("dimension must be at least 1".into()));
    }
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::Argument(format!("accuracy target must be positive, got {target}")));
    }
    Ok(())
}

/// Checks that the closed-form envelope dominates every iterate of the
/// distance recurrence for `steps` steps from `x0`, allowing only float
/// slack. This is an identity of the analysis, so `false` means one of the
/// two implementations is wrong.
pub fn envelope_dominates(a: f64, b: f64, c: f64, x0: f64, steps: u64) -> Result<bool> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::Argument(format!(
            "contraction rate must lie in (0, 1), got {a}"
        )));
    }
    for (label, v) in [("noise", b), ("discretization", c), ("start", x0)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Argument(format!(
                "{label} term must be a finite non-negative number, got {v}"
            )));
        }
    }
    let mut x = x0;
    for k in 0..=steps {
        let envelope = contraction_envelope(a, b, c, x0, k);
        if x > envelope + 1e-12 * envelope.max(1.0) {
            return Ok(false);
        }
        x = contraction_step(a, b, c, x);
    }
    Ok(true)
}

/// Everything the tuning analysis says about reaching `W₂ ≤ ε₀/√m`:
/// the conforming `(h, n, K)` budget, the stepsize ceiling at the caller's
/// batch size, the contraction data at the budget settings, and the
/// envelope value the budget actually reaches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    /// Stepsize ceiling at the batch size handed in (not the budget's).
    pub stepsize_cap: f64,
    pub budget: AccuracyBudget,
    /// Contraction data `(A, B, C)` at the budget's stepsize and batch.
    pub triple: ContractionTriple,
    /// Worst-case starting distance `sqrt(start_gap_sq + d/m)`.
    pub initial_distance: f64,
    /// Envelope after the budget's iterations from that start.
    pub envelope_at_budget: f64,
    /// The promised accuracy `ε₀/√m`.
    pub guarantee: f64,
    /// Closed-form `K·n`, the data-size-invariant cost of the chain phase.
    pub iteration_batch_product: f64,
}

impl BoundReport {
    pub fn meets_guarantee(&self) -> bool {
        self.envelope_at_budget <= self.guarantee
    }
}

/// Assembles a [`BoundReport`] for one target configuration. `batch_size`
/// only feeds the reported stepsize ceiling; the budget picks its own batch.
pub fn bound_report(
    curvature: &CurvatureBounds,
    dim: usize,
    target: f64,
    batch_size: usize,
    start_gap_sq: f64,
    centering_gap_sq: f64,
) -> Result<BoundReport> {
    let cap = stepsize_cap(curvature, dim, target, batch_size)?;
    let budget = accuracy_budget(curvature, dim, target, start_gap_sq, centering_gap_sq)?;
    let triple = sgld_contraction(
        curvature,
        budget.stepsize,
        budget.batch_size,
        dim,
        centering_gap_sq,
    )?;
    let m = curvature.strong_convexity();
    let initial_distance = (start_gap_sq + dim as f64 / m).sqrt();
    let envelope_at_budget = triple.envelope(initial_distance, budget.iterations);
    let product = iteration_batch_product(curvature, dim, target, start_gap_sq, centering_gap_sq)?;
    Ok(BoundReport {
        stepsize_cap: cap,
        budget,
        triple,
        initial_distance,
        envelope_at_budget,
        guarantee: target / m.sqrt(),
        iteration_batch_product: product,
    })
}
