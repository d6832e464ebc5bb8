//! Exhaustive-enumeration oracles for the gradient estimators.
//!
//! Batches are drawn i.i.d. with replacement, so the law of an estimator is
//! a finite sum over all N^n index tuples. For small N and n that sum is
//! computable exactly, which pins down means and variances with no Monte
//! Carlo slack at all.

use sgmcmc::estimators::{
    cv_estimate, naive_estimate, CacheMode, CenteringState, SagaState,
};
use sgmcmc::model::{full_gradient, GaussianModel, GradientModel, ParamVector};

fn fixture() -> GaussianModel {
    GaussianModel::from_rows(
        vec![
            vec![1.3, -0.4],
            vec![0.2, 0.9],
            vec![-1.1, 0.5],
            vec![2.0, -1.7],
        ],
        0.8,
        1.5,
    )
    .unwrap()
}

/// Visits every batch of `n` indices over `0..num_data` together with its
/// probability under independent draws from `probs`.
fn for_each_batch(num_data: usize, n: usize, probs: &[f64], mut visit: impl FnMut(&[usize], f64)) {
    let mut batch = vec![0usize; n];
    let total = num_data.pow(n as u32);
    for code in 0..total {
        let mut rest = code;
        let mut weight = 1.0;
        for slot in batch.iter_mut() {
            *slot = rest % num_data;
            rest /= num_data;
            weight *= probs[*slot];
        }
        visit(&batch, weight);
    }
}

fn enumerated_moments<F>(
    num_data: usize,
    n: usize,
    probs: &[f64],
    dim: usize,
    mut estimate: F,
) -> (Vec<f64>, f64)
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    let mut mean = vec![0.0; dim];
    let mut second = 0.0;
    for_each_batch(num_data, n, probs, |batch, weight| {
        let est = estimate(batch);
        for (m, e) in mean.iter_mut().zip(&est) {
            *m += weight * e;
        }
        second += weight * est.iter().map(|e| e * e).sum::<f64>();
    });
    let mean_sq: f64 = mean.iter().map(|m| m * m).sum();
    (mean, second - mean_sq)
}

fn assert_close(actual: &[f64], expected: &[f64], tol: f64, what: &str) {
    for (j, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "{what}: coordinate {j} is {a}, expected {e}"
        );
    }
}

#[test]
fn naive_estimates_average_to_the_full_gradient() {
    let model = fixture();
    let n_data = model.num_data();
    let uniform = vec![1.0 / n_data as f64; n_data];
    let theta = ParamVector::new(vec![0.7, -0.3]).unwrap();
    let truth = full_gradient(&model, &theta).unwrap();
    for n in 1..=3 {
        let (mean, _) = enumerated_moments(n_data, n, &uniform, 2, |batch| {
            naive_estimate(&model, &theta, batch).unwrap().value.values().to_vec()
        });
        assert_close(&mean, truth.values(), 1e-12, "naive mean");
    }
}

#[test]
fn skew_weighted_cv_estimates_average_to_the_full_gradient() {
    let model = fixture();
    let n_data = model.num_data();
    let raw = [1.0, 2.0, 3.0, 4.0];
    let total: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|w| w / total).collect();

    let centering = CenteringState::new(
        &model,
        ParamVector::new(vec![0.1, 0.2]).unwrap(),
        CacheMode::Cached,
    )
    .unwrap();
    let theta = ParamVector::new(vec![-0.6, 1.1]).unwrap();
    let truth = full_gradient(&model, &theta).unwrap();
    for n in 1..=3 {
        let (mean, _) = enumerated_moments(n_data, n, &probs, 2, |batch| {
            cv_estimate(&model, &theta, &centering, batch, &probs)
                .unwrap()
                .value
                .values()
                .to_vec()
        });
        assert_close(&mean, truth.values(), 1e-12, "cv mean");
    }
}

#[test]
fn cv_variance_scales_as_one_over_batch_size() {
    // Single-draw terms are i.i.d., so the batch average has exactly 1/n of
    // the single-draw variance. Enumeration confirms the implementation
    // shares that structure (no accidental cross-draw coupling).
    let model = fixture();
    let n_data = model.num_data();
    let raw = [4.0, 1.0, 2.0, 1.0];
    let total: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let centering = CenteringState::new(
        &model,
        ParamVector::new(vec![0.4, -0.8]).unwrap(),
        CacheMode::Recompute,
    )
    .unwrap();
    let theta = ParamVector::new(vec![1.9, 0.6]).unwrap();

    let variance_at = |n: usize| {
        enumerated_moments(n_data, n, &probs, 2, |batch| {
            cv_estimate(&model, &theta, &centering, batch, &probs)
                .unwrap()
                .value
                .values()
                .to_vec()
        })
        .1
    };
    let v1 = variance_at(1);
    assert!(v1 > 1e-6, "fixture should produce genuine noise, got {v1}");
    for n in 2..=3 {
        let vn = variance_at(n);
        assert!(
            (vn - v1 / n as f64).abs() <= 1e-12 * v1,
            "variance at n={n} is {vn}, expected {}",
            v1 / n as f64
        );
    }
}

#[test]
fn cv_noise_vanishes_at_the_centering_point() {
    let model = fixture();
    let n_data = model.num_data();
    let uniform = vec![1.0 / n_data as f64; n_data];
    let at = ParamVector::new(vec![0.25, -0.5]).unwrap();
    let centering = CenteringState::new(&model, at.clone(), CacheMode::Cached).unwrap();
    let (mean, variance) = enumerated_moments(n_data, 2, &uniform, 2, |batch| {
        cv_estimate(&model, &at, &centering, batch, &uniform)
            .unwrap()
            .value
            .values()
            .to_vec()
    });
    let truth = full_gradient(&model, &at).unwrap();
    assert_close(&mean, truth.values(), 1e-13, "cv mean at centering");
    assert!(variance.abs() <= 1e-26, "variance {variance} should vanish");
}

#[test]
fn saga_estimates_are_unbiased_for_any_table_contents() {
    let model = fixture();
    let n_data = model.num_data();
    let uniform = vec![1.0 / n_data as f64; n_data];

    // Scramble the table away from its fill point before enumerating, so
    // the oracle exercises the general case, not the fresh-table identity.
    let mut state = SagaState::init(&model, &ParamVector::new(vec![0.3, 0.1]).unwrap()).unwrap();
    state.update(&model, &ParamVector::new(vec![-1.0, 0.7]).unwrap(), &[0, 2]);
    state.update(&model, &ParamVector::new(vec![0.9, -0.2]).unwrap(), &[3]);

    let theta = ParamVector::new(vec![0.5, 1.4]).unwrap();
    let truth = full_gradient(&model, &theta).unwrap();
    for n in 1..=3 {
        let (mean, _) = enumerated_moments(n_data, n, &uniform, 2, |batch| {
            state.estimate(&model, &theta, batch).unwrap().value.values().to_vec()
        });
        assert_close(&mean, truth.values(), 1e-12, "saga mean");
    }
}
