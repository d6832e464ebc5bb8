//! The acceptance gate: one test per release criterion, each printing a
//! single PASS/FAIL line (visible with `--nocapture`). Everything here
//! drives public interfaces only; exact expectations come from enumeration,
//! closed forms, or replicated Monte Carlo with stated error budgets.

use std::fmt::Display;
use std::path::Path;
use std::time::Instant;

use sgmcmc::bounds::{
    accuracy_budget, bound_report, centered_noise_bound, contraction_envelope, contraction_step,
    iteration_batch_product, sgld_contraction, CurvatureBounds,
};
use sgmcmc::diagnostics::mean_and_variance;
use sgmcmc::estimators::{cv_estimate, naive_estimate, CacheMode, CenteringState, SagaState};
use sgmcmc::experiments::ExperimentPlan;
use sgmcmc::model::{full_gradient, GaussianModel, GradientModel, LogisticModel};
use sgmcmc::optimizer::{run_sgd, BatchMode, SgdConfig, StepSchedule};
use sgmcmc::rng;
use sgmcmc::sampler::{run_chain, EstimatorKind, SamplerConfig, WeightsSpec};
use sgmcmc::zv::{apply_zv, TestFunction, ZvInput, ZvOptions};
use sgmcmc::{ChainRecord, ParamVector};

use rand::Rng;

/// Prints the one-line verdict and hands the outcome back to the caller's
/// assert, so a failure shows up both in the line and in the panic message.
fn verdict(label: &str, ok: bool, detail: impl Display) -> bool {
    println!("{label}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    ok
}

fn elapsed_under(start: Instant, budget_s: f64, label: &str) {
    let took = start.elapsed().as_secs_f64();
    assert!(
        took < budget_s,
        "{label} took {took:.1}s, budget {budget_s}s"
    );
}

/// Five two-dimensional records shared by the enumeration criteria.
fn small_model() -> GaussianModel {
    GaussianModel::from_rows(
        vec![
            vec![0.31, -0.84],
            vec![1.27, 0.41],
            vec![-0.52, 0.93],
            vec![0.74, -0.18],
            vec![-1.11, 0.62],
        ],
        0.9,
        1.3,
    )
    .unwrap()
}

fn random_point(rng: &mut impl Rng, dim: usize, scale: f64) -> ParamVector {
    ParamVector::new((0..dim).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Visits every ordered batch of `n` indices with its sampling probability.
fn for_each_batch(probs: &[f64], n: usize, mut visit: impl FnMut(&[usize], f64)) {
    let num = probs.len();
    let total = num.pow(n as u32);
    let mut batch = vec![0usize; n];
    for code in 0..total {
        let mut rest = code;
        let mut weight = 1.0;
        for slot in batch.iter_mut() {
            *slot = rest % num;
            weight *= probs[*slot];
            rest /= num;
        }
        visit(&batch, weight);
    }
}

/// Exact mean and mean squared deviation from `reference` of an estimator
/// over the full batch distribution.
fn enumerate_estimator(
    probs: &[f64],
    n: usize,
    dim: usize,
    reference: &[f64],
    mut estimate: impl FnMut(&[usize]) -> Vec<f64>,
) -> (Vec<f64>, f64) {
    let mut mean = vec![0.0; dim];
    let mut second = 0.0;
    for_each_batch(probs, n, |batch, weight| {
        let value = estimate(batch);
        let mut dev = 0.0;
        for (j, v) in value.iter().enumerate() {
            mean[j] += weight * v;
            let gap = v - reference[j];
            dev += gap * gap;
        }
        second += weight * dev;
    });
    (mean, second)
}

fn max_abs_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_01_every_estimator_is_unbiased_over_the_batch_law() {
    let start = Instant::now();
    let model = small_model();
    let dim = model.dim();
    let num = model.num_data();
    let uniform = vec![1.0 / num as f64; num];
    let skewed: Vec<f64> = {
        let raw: Vec<f64> = (1..=num).map(|i| i as f64).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| w / total).collect()
    };

    let theta_hat = ParamVector::new(vec![0.2, -0.1]).unwrap();
    let centering = CenteringState::new(&model, theta_hat, CacheMode::Cached).unwrap();

    // A table with stale rows from two unrelated points.
    let mut saga = SagaState::init(&model, &ParamVector::new(vec![0.9, 0.4]).unwrap()).unwrap();
    saga.update(&model, &ParamVector::new(vec![-0.7, 1.1]).unwrap(), &[0, 2]);
    saga.update(&model, &ParamVector::new(vec![0.3, -1.3]).unwrap(), &[4]);

    let mut rng = rng::stream(90_101, "points");
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let theta = random_point(&mut rng, dim, 2.0);
        let exact = full_gradient(&model, &theta).unwrap();
        for n in [1usize, 2] {
            let (naive_mean, _) = enumerate_estimator(&uniform, n, dim, exact.values(), |batch| {
                naive_estimate(&model, &theta, batch).unwrap().value.into_values()
            });
            let (cv_mean, _) = enumerate_estimator(&skewed, n, dim, exact.values(), |batch| {
                cv_estimate(&model, &theta, &centering, batch, &skewed)
                    .unwrap()
                    .value
                    .into_values()
            });
            let (saga_mean, _) = enumerate_estimator(&uniform, n, dim, exact.values(), |batch| {
                saga.estimate(&model, &theta, batch).unwrap().value.into_values()
            });
            worst = worst
                .max(max_abs_gap(&naive_mean, exact.values()))
                .max(max_abs_gap(&cv_mean, exact.values()))
                .max(max_abs_gap(&saga_mean, exact.values()));
        }
    }
    let ok = worst <= 1e-10;
    assert!(verdict(
        "criterion 01 estimator unbiasedness",
        ok,
        format!("max |E[estimate] - grad| = {worst:.2e}, allowed 1e-10")
    ));
    elapsed_under(start, 1.0, "criterion 01");
}

#[test]
fn criterion_02_cv_variance_stays_under_the_lipschitz_envelope() {
    let start = Instant::now();
    // A Gaussian likelihood has identical per-term gradient differences and
    // therefore zero cv noise; logistic terms differ for real, which is
    // what makes the envelope worth checking.
    let model = LogisticModel::from_rows(vec![
        vec![0.31, -0.84, 1.0],
        vec![1.27, 0.41, -1.0],
        vec![-0.52, 0.93, 1.0],
        vec![0.74, -0.18, 1.0],
        vec![-1.11, 0.62, -1.0],
    ])
    .unwrap();
    let dim = model.dim();
    let constants = model.lipschitz_constants().unwrap();
    let sum_lipschitz: f64 = constants.iter().sum();
    // The envelope is stated for Lipschitz-proportional batch weights.
    let probs: Vec<f64> = constants.iter().map(|l| l / sum_lipschitz).collect();

    let mut rng = rng::stream(90_102, "pairs");
    let mut slackest = f64::INFINITY;
    for _ in 0..20 {
        let theta = random_point(&mut rng, dim, 1.5);
        let hat = random_point(&mut rng, dim, 1.5);
        let centering = CenteringState::new(&model, hat.clone(), CacheMode::Cached).unwrap();
        let exact = full_gradient(&model, &theta).unwrap();
        let dist_sq = theta.distance_sq(&hat);
        for n in [1usize, 2] {
            let (_, variance) = enumerate_estimator(&probs, n, dim, exact.values(), |batch| {
                cv_estimate(&model, &theta, &centering, batch, &probs)
                    .unwrap()
                    .value
                    .into_values()
            });
            let bound = centered_noise_bound(sum_lipschitz, n, dist_sq).unwrap();
            let closed_form = sum_lipschitz * sum_lipschitz / n as f64 * dist_sq;
            assert!(
                (bound - closed_form).abs() <= 1e-12 * closed_form,
                "bound {bound} drifted from (sum L)^2/n * dist {closed_form}"
            );
            assert!(
                variance <= bound * (1.0 + 1e-12),
                "enumerated variance {variance} above bound {bound} (n={n})"
            );
            if variance > 0.0 {
                slackest = slackest.min(bound / variance);
            }
        }
    }

    // Sitting exactly on the centering point kills the noise entirely.
    let at_hat = random_point(&mut rng, dim, 1.5);
    let centering = CenteringState::new(&model, at_hat.clone(), CacheMode::Cached).unwrap();
    let exact = full_gradient(&model, &at_hat).unwrap();
    let (_, var_at_hat) = enumerate_estimator(&probs, 2, dim, exact.values(), |batch| {
        cv_estimate(&model, &at_hat, &centering, batch, &probs)
            .unwrap()
            .value
            .into_values()
    });
    let ok = var_at_hat <= 1e-26;
    assert!(verdict(
        "criterion 02 cv variance envelope",
        ok,
        format!("variance at the centering point {var_at_hat:.2e}, tightest bound/variance ratio {slackest:.2}")
    ));
    elapsed_under(start, 1.0, "criterion 02");
}

#[test]
fn criterion_03_sgld_matches_its_stationary_gaussian_law() {
    let start = Instant::now();
    // One observation at 1 with unit noise and prior scale 1/sqrt(3):
    // posterior precision 4, mean 1/4.
    let model = GaussianModel::from_rows(vec![vec![1.0]], 1.0, 1.0 / 3.0f64.sqrt()).unwrap();
    let (mu, var) = model.posterior_moments();
    assert!((mu.values()[0] - 0.25).abs() < 1e-12);
    assert!((var[0] - 0.25).abs() < 1e-12);
    let (mu, sigma_sq) = (0.25, 0.25);

    let h = 0.01 * sigma_sq;
    let warmup = 2_000usize;
    let keep = 100_000usize;
    let mut config = SamplerConfig::new(
        EstimatorKind::Exact,
        h,
        0,
        warmup + keep,
        rng::derive_seed(90_103, "chain"),
    );
    config.record_gradients = false;
    let record = run_chain(&model, &ParamVector::new(vec![mu]).unwrap(), &config, None).unwrap();
    let draws: Vec<f64> = (warmup..record.num_retained())
        .map(|r| record.sample(r)[0])
        .collect();
    assert_eq!(draws.len(), keep);
    let (mean, variance) = mean_and_variance(&draws).unwrap();

    // The chain is an exact AR(1): rho = 1 - h/(2 sigma^2), stationary
    // variance sigma^2/(1 - h/(4 sigma^2)). Monte Carlo standard errors
    // carry the usual autocorrelation inflation.
    let rho = 1.0 - h / (2.0 * sigma_sq);
    let v = sigma_sq / (1.0 - h / (4.0 * sigma_sq));
    let k = keep as f64;
    let se_mean = (v / k * (1.0 + rho) / (1.0 - rho)).sqrt();
    let se_var = v * (2.0 / k * (1.0 + rho * rho) / (1.0 - rho * rho)).sqrt();

    let mean_gap = (mean - mu).abs() / se_mean;
    let var_gap = (variance - v).abs() / se_var;
    let ok = mean_gap <= 3.0 && var_gap <= 3.0;
    assert!(verdict(
        "criterion 03 stationary law",
        ok,
        format!("mean off by {mean_gap:.2} SE, variance off by {var_gap:.2} SE, allowed 3")
    ));
    elapsed_under(start, 10.0, "criterion 03");
}

#[test]
fn criterion_04_cv_chain_transport_distance_stays_under_the_envelope() {
    let start = Instant::now();
    let model = GaussianModel::from_rows(vec![vec![-0.6], vec![0.2], vec![1.0]], 1.0, 1.0).unwrap();
    let (mu_vec, var_vec) = model.posterior_moments();
    let (mu, sigma_sq) = (mu_vec.values()[0], var_vec[0]);
    let curvature = CurvatureBounds::from_terms(1.0, 1.0, 3).unwrap();

    // Deliberately imperfect centering and lopsided batch weights keep the
    // estimator noise alive; both enter the computed envelope exactly.
    let gap = 0.1;
    let hat = ParamVector::new(vec![mu + gap]).unwrap();
    let centering = CenteringState::new(&model, hat, CacheMode::Cached).unwrap();
    let weights = vec![0.5, 0.3, 0.2];

    let theta0 = mu + 0.5;
    let w0 = ((theta0 - mu).powi(2) + sigma_sq).sqrt();
    let replications = 2_000usize;
    let checkpoints = [10usize, 100, 1000];

    let mut failures = Vec::new();
    let mut tightest = f64::INFINITY;
    for h in [0.01, 0.04, 0.1] {
        let mut states: Vec<Vec<f64>> = vec![Vec::with_capacity(replications); checkpoints.len()];
        for rep in 0..replications {
            let mut config = SamplerConfig::new(
                EstimatorKind::ControlVariate,
                h,
                1,
                // Row k of an unthinned record is the state before update k,
                // so reaching theta_K as a row takes K+1 iterations.
                *checkpoints.last().unwrap() + 1,
                rng::derive_seed(90_104, &format!("rep:{h}:{rep}")),
            );
            config.weights = WeightsSpec::Custom(weights.clone());
            config.record_gradients = false;
            let record = run_chain(
                &model,
                &ParamVector::new(vec![theta0]).unwrap(),
                &config,
                Some(&centering),
            )
            .unwrap();
            for (slot, &k) in checkpoints.iter().enumerate() {
                assert_eq!(record.iteration_of(k), k);
                states[slot].push(record.sample(k)[0]);
            }
        }
        let triple = sgld_contraction(&curvature, h, 1, 1, gap * gap).unwrap();
        for (slot, &k) in checkpoints.iter().enumerate() {
            let distance =
                sgmcmc::diagnostics::w2_to_normal(&states[slot], mu, sigma_sq, 1024).unwrap();
            let bound = triple.envelope(w0, k as u64);
            if distance > bound {
                failures.push(format!("h={h} k={k}: {distance:.4} > {bound:.4}"));
            }
            tightest = tightest.min(bound / distance);
        }
    }
    let ok = failures.is_empty();
    assert!(verdict(
        "criterion 04 transport envelope",
        ok,
        if ok {
            format!("9 checkpoints under the bound, smallest bound/distance ratio {tightest:.2}")
        } else {
            failures.join("; ")
        }
    ));
    elapsed_under(start, 30.0, "criterion 04");
}

#[test]
fn criterion_05_random_budgets_meet_the_accuracy_guarantee() {
    let start = Instant::now();
    let mut rng = rng::stream(90_105, "configs");
    let mut slack = f64::INFINITY;
    for trial in 0..50 {
        let m = 10f64.powf(rng.gen_range(-1.0..1.0));
        let big_m = m * rng.gen_range(1.0..4.0);
        let dim = rng.gen_range(1..=16usize);
        let eps0 = 10f64.powf(rng.gen_range(-1.3..0.0));
        let start_gap = rng.gen_range(0.0..1.0);
        let hat_gap = rng.gen_range(0.0..1.0);
        let curvature = CurvatureBounds::new(m, big_m).unwrap();

        let budget = accuracy_budget(&curvature, dim, eps0, start_gap, hat_gap).unwrap();
        // Replay the budget through the envelope from scratch rather than
        // trusting the report's own bookkeeping.
        let triple =
            sgld_contraction(&curvature, budget.stepsize, budget.batch_size, dim, hat_gap)
                .unwrap();
        let w0 = (start_gap + dim as f64 / m).sqrt();
        let achieved = triple.envelope(w0, budget.iterations);
        let guarantee = eps0 / m.sqrt();
        assert!(
            achieved <= guarantee * (1.0 + 1e-9),
            "trial {trial}: envelope {achieved} exceeds {guarantee} \
             (m={m:.3} M={big_m:.3} d={dim} eps0={eps0:.3})"
        );

        let report = bound_report(&curvature, dim, eps0, budget.batch_size, start_gap, hat_gap)
            .unwrap();
        assert!(report.meets_guarantee(), "trial {trial}: report disagrees");
        slack = slack.min(guarantee / achieved);
    }
    assert!(verdict(
        "criterion 05 budget guarantee",
        true,
        format!("50 random budgets replayed, smallest guarantee/achieved ratio {slack:.3}")
    ));
    elapsed_under(start, 1.0, "criterion 05");
}

#[test]
fn criterion_06_budget_size_is_invariant_in_the_data_size() {
    let start = Instant::now();
    // Strong convexity grows linearly with the data and the centering
    // quality keeps pace (squared gap c/m), the regime the budget is built
    // for; its K*n answer must not care about N itself.
    let c = 0.7;
    let dim = 3;
    let eps0 = 0.3;
    let mut products = Vec::new();
    for n_data in [100.0f64, 10_000.0, 1_000_000.0] {
        let m = 0.5 * n_data;
        let curvature = CurvatureBounds::new(m, 1.8 * m).unwrap();
        let gap = c / m;
        let product = iteration_batch_product(&curvature, dim, eps0, gap, gap).unwrap();
        products.push(product);
    }
    let lo = products.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = products.iter().cloned().fold(0.0, f64::max);
    let spread = hi / lo - 1.0;
    let ok = spread < 0.01;
    assert!(verdict(
        "criterion 06 size-free budget",
        ok,
        format!("K*n spread {:.4}% across four decades of N, allowed 1%", spread * 100.0)
    ));
    elapsed_under(start, 1.0, "criterion 06");
}

#[test]
fn criterion_07_closed_form_envelope_dominates_the_recursion() {
    let start = Instant::now();
    let mut rng = rng::stream(90_107, "triples");
    let mut slack = f64::INFINITY;
    for trial in 0..100 {
        let a = rng.gen_range(1e-6..0.999_999);
        let b = rng.gen_range(0.0..50.0);
        let c = rng.gen_range(0.0..50.0);
        let x0 = rng.gen_range(0.0..100.0);
        let mut x = x0;
        for k in 1..=500u64 {
            x = contraction_step(a, b, c, x);
            let envelope = contraction_envelope(a, b, c, x0, k);
            assert!(
                x <= envelope * (1.0 + 1e-12),
                "trial {trial}: iterate {x} above envelope {envelope} at k={k} \
                 (a={a:.6} b={b:.3} c={c:.3} x0={x0:.3})"
            );
            if x > 0.0 {
                slack = slack.min(envelope / x);
            }
        }
    }
    assert!(verdict(
        "criterion 07 envelope dominance",
        true,
        format!("100 random recursions dominated through k=500, min envelope/iterate {slack:.3}")
    ));
    elapsed_under(start, 1.0, "criterion 07");
}

#[test]
fn criterion_08_sgd_error_shrinks_at_the_guaranteed_rate() {
    let start = Instant::now();
    let model = small_model();
    let dim = model.dim();
    // Unit scales would be too kind; keep the fixture's 0.9/1.3 and read the
    // strong convexity straight off the posterior precision.
    let m = model.num_data() as f64 / (0.9 * 0.9) + 1.0 / (1.3 * 1.3);
    let (target, _) = model.posterior_moments();

    let replications = 100usize;
    let horizon = 1_000usize;
    let checkpoints = [10usize, 100, 1000];

    let mut d_sq: f64 = 0.0;
    let mut sq_err = vec![0.0; checkpoints.len()];
    for rep in 0..replications {
        let mut config = SgdConfig::new(
            StepSchedule::InverseIteration { strong_convexity: m },
            horizon,
            BatchMode::Minibatch(1),
            rng::derive_seed(90_108, &format!("rep:{rep}")),
        );
        config.record_trajectory = true;
        let run = run_sgd(&model, &ParamVector::zeros(dim), &config).unwrap();
        for k in 0..horizon {
            let g = run.estimate(k).unwrap();
            d_sq = d_sq.max(g.iter().map(|v| v * v).sum());
        }
        for (slot, &k) in checkpoints.iter().enumerate() {
            let state = run.state(k).unwrap();
            sq_err[slot] += state
                .iter()
                .zip(target.values())
                .map(|(s, t)| (s - t) * (s - t))
                .sum::<f64>();
        }
    }

    let mut worst_ratio: f64 = 0.0;
    let mut details = Vec::new();
    for (slot, &k) in checkpoints.iter().enumerate() {
        let mse = sq_err[slot] / replications as f64;
        let bound = 4.0 * d_sq / (m * m * k as f64);
        worst_ratio = worst_ratio.max(mse / bound);
        details.push(format!("K={k}: mse/bound {:.3}", mse / bound));
    }
    let ok = worst_ratio <= 1.0;
    assert!(verdict(
        "criterion 08 descent rate",
        ok,
        format!("D^2 = {d_sq:.1}; {}", details.join(", "))
    ));
    elapsed_under(start, 30.0, "criterion 08");
}

#[test]
fn criterion_09_exact_gradient_correction_collapses_linear_statistics() {
    let start = Instant::now();
    let model = GaussianModel::from_rows(vec![vec![1.0]], 1.0, 1.0 / 3.0f64.sqrt()).unwrap();
    let warmup = 500usize;
    let keep = 10_000usize;
    let config = SamplerConfig::new(
        EstimatorKind::Exact,
        0.0125,
        0,
        warmup + keep,
        rng::derive_seed(90_109, "chain"),
    );
    let record = run_chain(&model, &ParamVector::new(vec![0.25]).unwrap(), &config, None).unwrap();

    let input = post_burn_input(&record, warmup);
    let correction = apply_zv(&input, &TestFunction::Coordinate(0), &ZvOptions::default()).unwrap();
    let ratio = correction.corrected_variance / correction.raw_variance;
    let ok = correction.raw_variance > 0.0 && ratio < 1e-3;
    assert!(verdict(
        "criterion 09 zero-variance identity",
        ok,
        format!("residual variance ratio {ratio:.2e}, allowed 1e-3")
    ));
    elapsed_under(start, 5.0, "criterion 09");
}

/// Samples and gradients past the first `burn` retained rows, as one input.
fn post_burn_input(record: &ChainRecord, burn: usize) -> ZvInput {
    let dim = record.dim();
    let mut samples = Vec::with_capacity((record.num_retained() - burn) * dim);
    let mut gradients = Vec::with_capacity(samples.capacity());
    for r in burn..record.num_retained() {
        samples.extend_from_slice(record.sample(r));
        gradients.extend_from_slice(record.gradient(r).expect("gradients recorded"));
    }
    ZvInput::new(samples, gradients, dim).unwrap()
}

#[test]
fn criterion_10_noisy_gradient_corrections_respect_the_degradation_floor() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;

    for n_data in [10usize, 100, 1000] {
        // Symmetric grid on [-0.3, 0.3]: the posterior mean is exactly 0,
        // every per-term gradient stays small and measurable.
        let rows: Vec<Vec<f64>> = (0..n_data)
            .map(|i| vec![-0.3 + 0.6 * i as f64 / (n_data - 1) as f64])
            .collect();
        let model = GaussianModel::from_rows(rows, 1.0, 1.0).unwrap();
        let h = 1.0 / (n_data as f64 + 1.0);
        let warmup = 200usize;
        let keep = 10_000usize;
        let batch = 5usize;

        let run = |estimator: EstimatorKind,
                   weights: WeightsSpec,
                   centering: Option<&CenteringState>| {
            let mut config = SamplerConfig::new(
                estimator,
                h,
                if estimator == EstimatorKind::Exact { 0 } else { batch },
                warmup + keep,
                rng::derive_seed(90_110, &format!("{n_data}:{}", estimator.label())),
            );
            config.weights = weights;
            run_chain(&model, &ParamVector::zeros(1), &config, centering).unwrap()
        };

        let exact = run(EstimatorKind::Exact, WeightsSpec::Uniform, None);
        let r_exact = reduction_factor(&exact, warmup);

        // Off-center anchoring and lopsided weights keep the cv noise alive.
        let hat = CenteringState::new(
            &model,
            ParamVector::new(vec![0.5]).unwrap(),
            CacheMode::Cached,
        )
        .unwrap();
        let skew: Vec<f64> = {
            let raw: Vec<f64> = (0..n_data).map(|i| 1.0 + (i % 4) as f64).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|w| w / total).collect()
        };

        for (label, record) in [
            ("naive", run(EstimatorKind::Naive, WeightsSpec::Uniform, None)),
            (
                "cv",
                run(
                    EstimatorKind::ControlVariate,
                    WeightsSpec::Custom(skew),
                    Some(&hat),
                ),
            ),
        ] {
            let r_noisy = reduction_factor(&record, warmup);
            let (noise, term_bound) = noise_and_term_bound(&model, &record, warmup);
            let floor = r_exact / (1.0 + noise / (term_bound * (n_data as f64 + 1.0)));
            if r_noisy < floor {
                ok = false;
            }
            lines.push(format!("N={n_data} {label}: {r_noisy:.3} >= {floor:.3}"));
        }
    }
    assert!(verdict(
        "criterion 10 noisy-gradient floor",
        ok,
        lines.join(", ")
    ));
    elapsed_under(start, 60.0, "criterion 10");
}

/// Measured variance reduction of the squared-coordinate statistic.
fn reduction_factor(record: &ChainRecord, burn: usize) -> f64 {
    let input = post_burn_input(record, burn);
    let correction = apply_zv(
        &input,
        &TestFunction::SquaredCoordinate(0),
        &ZvOptions::default(),
    )
    .unwrap();
    correction.variance_ratio()
}

/// Chain-averaged squared gradient noise and the largest chain-averaged
/// per-term squared gradient norm, over the post-burn-in rows.
fn noise_and_term_bound(
    model: &GaussianModel,
    record: &ChainRecord,
    burn: usize,
) -> (f64, f64) {
    let rows = record.num_retained() - burn;
    let mut noise = 0.0;
    let mut term_means = vec![0.0; model.num_data() + 1];
    let mut term = [0.0f64];
    for r in burn..record.num_retained() {
        let theta = ParamVector::new(record.sample(r).to_vec()).unwrap();
        let exact = full_gradient(model, &theta).unwrap();
        let estimate = record.gradient(r).expect("gradients recorded");
        noise += estimate
            .iter()
            .zip(exact.values())
            .map(|(e, g)| (e - g) * (e - g))
            .sum::<f64>();
        model.grad_prior(theta.values(), &mut term);
        term_means[0] += term[0] * term[0];
        for i in 0..model.num_data() {
            model.grad_term(theta.values(), i, &mut term);
            term_means[i + 1] += term[0] * term[0];
        }
    }
    let bound = term_means.iter().cloned().fold(0.0, f64::max) / rows as f64;
    (noise / rows as f64, bound)
}

#[test]
fn criterion_11_logistic_costs_scale_with_data_size_as_designed() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let plan_text = format!(
        r#"
master_seed = 90111
output_dir = "{}"
replications = 1

[data]
kind = "logistic"
dim = 5
sizes = [1000, 10000, 100000]
heldout = 500

[target]
offset = 0.02

[noise]
draws = 240
tail_states = 16

[[method]]
name = "sgld"
estimator = "naive"
batch_size = 30
stepsize = [1e-4, 6e-7, 6e-9]
iterations = [6000, 20000, 100000]
thin = [2, 4, 10]

[[method]]
name = "sgld-cv"
estimator = "cv"
batch_size = 30
stepsize = [1.6e-4, 1.6e-5, 1.6e-6]
iterations = 2500
optimizer_stepsize = [1e-6, 1e-7, 1e-8]
optimizer_iterations = 50000
optimizer_batch = 30
"#,
        dir.path().display()
    );
    let plan = ExperimentPlan::from_toml_str(&plan_text).unwrap();
    let report = sgmcmc::experiments::run_comparison(&plan).unwrap();

    for row in &report.summary {
        assert_eq!(row.status, "ok", "cell N={} {}", row.n_data, row.method);
        assert!(
            row.evals_to_target.is_some(),
            "cell N={} {} never reached the target",
            row.n_data,
            row.method
        );
    }

    let evals_slope = |method: &str| {
        let points: Vec<(f64, f64)> = report
            .summary
            .iter()
            .filter(|r| r.method == method)
            .map(|r| {
                (
                    (r.n_data as f64).ln(),
                    (r.evals_to_target.unwrap() as f64).ln(),
                )
            })
            .collect();
        fit_slope(&points)
    };
    let noise_slope = |method: &str, context: sgmcmc::experiments::NoiseContext| {
        let points: Vec<(f64, f64)> = report
            .noise
            .iter()
            .filter(|r| r.method == method && r.context == context)
            .map(|r| ((r.n_data as f64).ln(), r.mean_sq_noise.ln()))
            .collect();
        assert_eq!(points.len(), 3);
        fit_slope(&points)
    };

    let naive_mode = noise_slope("sgld", sgmcmc::experiments::NoiseContext::Mode);
    let cv_stationary = noise_slope("sgld-cv", sgmcmc::experiments::NoiseContext::Stationary);
    let cv_evals = evals_slope("sgld-cv");
    let sgld_evals = evals_slope("sgld");

    let ok = (naive_mode - 2.0).abs() <= 0.3
        && cv_stationary <= 1.3
        && cv_evals <= 0.5
        && sgld_evals >= 0.8;
    assert!(verdict(
        "criterion 11 cost scaling",
        ok,
        format!(
            "noise slopes: naive at mode {naive_mode:.2} (want 2.0±0.3), cv stationary \
             {cv_stationary:.2} (≤1.3); evals-to-target slopes: cv {cv_evals:.2} (≤0.5), \
             sgld {sgld_evals:.2} (≥0.8)"
        )
    ));
    elapsed_under(start, 600.0, "criterion 11");
}

fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let cov: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    cov / var
}

#[test]
fn criterion_12_rerunning_any_subcommand_with_one_seed_is_byte_stable() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    std::fs::write(
        &data,
        "x_1,x_2\n0.31,-0.84\n1.27,0.41\n-0.52,0.93\n0.74,-0.18\n-1.11,0.62\n0.08,0.27\n",
    )
    .unwrap();
    let data_s = data.to_str().unwrap().to_string();

    let plan_path = dir.path().join("plan.toml");
    let plan_body = |out: &Path| {
        format!(
            r#"
master_seed = 23
output_dir = "{}"

[data]
kind = "gaussian"
dim = 2
sizes = [40]
heldout = 20

[[method]]
name = "sgld"
estimator = "naive"
batch_size = 4
stepsize = 0.02
iterations = 300
burn_in = 50
"#,
            out.display()
        )
    };

    // Each entry: (label, argument factory taking the output directory).
    type ArgFactory<'a> = Box<dyn Fn(&str) -> Vec<String> + 'a>;
    let jobs: Vec<(&str, ArgFactory)> = vec![
        (
            "optimize",
            Box::new(|out: &str| {
                vec![
                    "optimize".into(),
                    "--model".into(), "gaussian".into(),
                    "--data".into(), data_s.clone(),
                    "--schedule".into(), "constant".into(),
                    "--h".into(), "0.05".into(),
                    "--K".into(), "200".into(),
                    "--n".into(), "2".into(),
                    "--seed".into(), "5".into(),
                    "--out".into(), out.into(),
                ]
            }),
        ),
        (
            "sample",
            Box::new(|out: &str| {
                vec![
                    "sample".into(),
                    "--model".into(), "gaussian".into(),
                    "--data".into(), data_s.clone(),
                    "--estimator".into(), "saga".into(),
                    "--h".into(), "0.01".into(),
                    "--K".into(), "400".into(),
                    "--n".into(), "2".into(),
                    "--seed".into(), "5".into(),
                    "--out".into(), out.into(),
                ]
            }),
        ),
        (
            "bounds",
            Box::new(|out: &str| {
                vec![
                    "bounds".into(),
                    "--m".into(), "2.5".into(),
                    "--M".into(), "4".into(),
                    "--d".into(), "3".into(),
                    "--eps0".into(), "0.5".into(),
                    "--n".into(), "2".into(),
                    "--out".into(), out.into(),
                ]
            }),
        ),
    ];

    let run_to = |args: Vec<String>| {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_sgmcmc"))
            .args(&args)
            .output()
            .unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };

    let mut compared = 0usize;
    for (label, factory) in &jobs {
        let a = dir.path().join(format!("{label}-a"));
        let b = dir.path().join(format!("{label}-b"));
        run_to(factory(a.to_str().unwrap()));
        run_to(factory(b.to_str().unwrap()));
        compared += assert_trees_equal(&a, &b, label);
    }

    // postprocess consumes the sample artifacts; run it twice over one chain
    // directory into two output directories.
    let chain_dir = dir.path().join("sample-a");
    for suffix in ["pp-a", "pp-b"] {
        let out_dir = dir.path().join(suffix);
        run_to(vec![
            "postprocess".into(),
            "--dir".into(), chain_dir.to_str().unwrap().into(),
            "--burn-in".into(), "100".into(),
            "--out".into(), out_dir.to_str().unwrap().into(),
        ]);
    }
    compared += assert_trees_equal(&dir.path().join("pp-a"), &dir.path().join("pp-b"), "postprocess");

    // The experiment manifest records its own output directory, so the
    // rerun happens in place: run, snapshot, run again, compare.
    let exp = dir.path().join("exp");
    let snapshot = dir.path().join("exp-snapshot");
    std::fs::write(&plan_path, plan_body(&exp)).unwrap();
    let exp_args = || {
        vec![
            "experiment".into(),
            "--plan".into(),
            plan_path.to_str().unwrap().to_string(),
        ]
    };
    run_to(exp_args());
    copy_tree(&exp, &snapshot);
    run_to(exp_args());
    compared += assert_trees_equal(&exp, &snapshot, "experiment");

    assert!(verdict(
        "criterion 12 seeded reruns",
        true,
        format!("5 subcommands, {compared} artifacts byte-identical across reruns")
    ));
    elapsed_under(start, 60.0, "criterion 12");
}

fn copy_tree(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.path().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// Asserts two directory trees hold identical files (names and bytes),
/// ignoring the run manifests' output-path lines is NOT needed because
/// manifests never embed absolute paths. Returns how many files matched.
fn assert_trees_equal(a: &Path, b: &Path, label: &str) -> usize {
    let list = |root: &Path| {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    files.push(path.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        files.sort();
        files
    };
    let files_a = list(a);
    let files_b = list(b);
    assert_eq!(files_a, files_b, "{label}: different artifact sets");
    for rel in &files_a {
        let bytes_a = std::fs::read(a.join(rel)).unwrap();
        let bytes_b = std::fs::read(b.join(rel)).unwrap();
        assert_eq!(
            bytes_a,
            bytes_b,
            "{label}: {} differs between reruns",
            rel.display()
        );
    }
    files_a.len()
}
