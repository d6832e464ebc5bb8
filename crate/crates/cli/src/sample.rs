//! `sample`: run one Langevin chain and record it as `samples.csv` plus,
//! unless suppressed, `gradients.csv`.

use std::path::PathBuf;

use clap::Args;
use sgmcmc::estimators::{CacheMode, CenteringState};
use sgmcmc::io::{read_centering_csvs, write_gradients_csv, write_samples_csv};
use sgmcmc::model::{GradientModel, ParamVector};
use sgmcmc::rng;
use sgmcmc::sampler::{run_chain, EstimatorKind, SamplerConfig, WeightsSpec};
use sgmcmc::{Error, Result};

use crate::common::{
    self, build_model, centering_paths, load_config, pick, require, setting, ModelKind, Setting,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsKind {
    Uniform,
    Lipschitz,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// TOML file supplying defaults for any flag left unset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Training data CSV (header row, one record per line).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    prior_scale: Option<f64>,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorCli>,
    /// Stepsize.
    #[arg(long)]
    h: Option<f64>,
    /// Chain length in transitions.
    #[arg(long = "K")]
    iterations: Option<usize>,
    /// Minibatch size.
    #[arg(long = "n")]
    batch: Option<usize>,
    /// Keep every thin-th state.
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long, value_enum)]
    weights: Option<WeightsKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Centering artifact for the cv estimator; defaults to
    /// `<out>/theta_hat.csv` as written by a prior `optimize`.
    #[arg(long)]
    theta_hat: Option<PathBuf>,
    /// Starting point, comma-separated; defaults to the centering point for
    /// cv and to the origin otherwise.
    #[arg(long)]
    init: Option<String>,
    /// Skip writing gradients.csv.
    #[arg(long)]
    no_gradients: bool,
    /// Recompute centering-term gradients instead of caching them (cv).
    #[arg(long)]
    recompute_centering: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorCli {
    Exact,
    Naive,
    Cv,
    Saga,
}

impl From<EstimatorCli> for EstimatorKind {
    fn from(e: EstimatorCli) -> Self {
        match e {
            EstimatorCli::Exact => EstimatorKind::Exact,
            EstimatorCli::Naive => EstimatorKind::Naive,
            EstimatorCli::Cv => EstimatorKind::ControlVariate,
            EstimatorCli::Saga => EstimatorKind::Saga,
        }
    }
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleFile {
    model: Option<ModelKind>,
    data: Option<PathBuf>,
    noise_scale: Option<f64>,
    prior_scale: Option<f64>,
    estimator: Option<EstimatorCli>,
    h: Option<f64>,
    #[serde(rename = "K")]
    iterations: Option<usize>,
    #[serde(rename = "n")]
    batch: Option<usize>,
    thin: Option<usize>,
    weights: Option<WeightsKind>,
    seed: Option<u64>,
    theta_hat: Option<PathBuf>,
    init: Option<String>,
    no_gradients: Option<bool>,
    recompute_centering: Option<bool>,
    out: Option<PathBuf>,
}

pub fn run(args: SampleArgs) -> Result<()> {
    let file: SampleFile = load_config(args.config.as_deref())?;
    let model_kind = require(pick(args.model, file.model), "--model")?;
    let data = require(pick(args.data, file.data), "--data")?;
    let out = require(pick(args.out, file.out), "--out")?;
    let estimator: EstimatorKind =
        require(pick(args.estimator, file.estimator), "--estimator")?.into();
    let h = require(pick(args.h, file.h), "--h")?;
    let iterations = require(pick(args.iterations, file.iterations), "--K")?;
    let noise_scale = pick(args.noise_scale, file.noise_scale).unwrap_or(1.0);
    let prior_scale = pick(args.prior_scale, file.prior_scale).unwrap_or(1.0);
    let batch = pick(args.batch, file.batch).unwrap_or(1);
    let thin = pick(args.thin, file.thin).unwrap_or(1);
    let weights = pick(args.weights, file.weights).unwrap_or(WeightsKind::Uniform);
    let seed = pick(args.seed, file.seed).unwrap_or(0);
    let init = pick(args.init, file.init);
    let record_gradients = !(args.no_gradients || file.no_gradients.unwrap_or(false));
    let recompute = args.recompute_centering || file.recompute_centering.unwrap_or(false);

    let model = build_model(model_kind, &data, noise_scale, prior_scale)?;

    let centering = if estimator == EstimatorKind::ControlVariate {
        let (theta_path, grad_path) = centering_paths(&out, args.theta_hat.as_deref().or(file.theta_hat.as_deref()))?;
        let (theta_hat, grad_full) = read_centering_csvs(&theta_path, &grad_path)?;
        let cache = if recompute {
            CacheMode::Recompute
        } else {
            CacheMode::Cached
        };
        Some(CenteringState::from_parts(&model, theta_hat, grad_full, cache)?)
    } else {
        None
    };

    let initial = match &init {
        Some(text) => {
            let values = common::parse_init(text)?;
            if values.len() != model.dim() {
                return Err(Error::Config(format!(
                    "--init has {} entries, model dimension is {}",
                    values.len(),
                    model.dim()
                )));
            }
            ParamVector::new(values)?
        }
        None => match &centering {
            Some(c) => c.theta_hat().clone(),
            None => ParamVector::zeros(model.dim()),
        },
    };

    let mut config = SamplerConfig::new(
        estimator,
        h,
        batch,
        iterations,
        rng::derive_seed(seed, "chain:0"),
    );
    config.thin = thin;
    config.weights = match weights {
        WeightsKind::Uniform => WeightsSpec::Uniform,
        WeightsKind::Lipschitz => WeightsSpec::Lipschitz,
    };
    config.record_gradients = record_gradients;

    let record = run_chain(&model, &initial, &config, centering.as_ref())?;

    common::ensure_dir(&out)?;
    write_samples_csv(&out.join("samples.csv"), &record)?;
    let mut artifacts = vec!["samples.csv"];
    if record_gradients {
        write_gradients_csv(&out.join("gradients.csv"), &record)?;
        artifacts.push("gradients.csv");
    }
    let settings: Vec<Setting> = vec![
        setting("model", format_args!("{model_kind:?}").to_string().to_lowercase()),
        setting("data", data.display()),
        setting("noise_scale", noise_scale),
        setting("prior_scale", prior_scale),
        setting("estimator", estimator),
        setting("h", h),
        setting("K", iterations),
        setting("n", batch),
        setting("thin", thin),
        setting(
            "weights",
            match weights {
                WeightsKind::Uniform => "uniform",
                WeightsKind::Lipschitz => "lipschitz",
            },
        ),
        setting("record_gradients", record_gradients),
        setting("init", init.as_deref().unwrap_or("default")),
    ];
    common::write_manifest(&out, "sample", Some(seed), &artifacts, &settings)?;
    println!(
        "{} states written to {} ({} gradient evaluations)",
        record.num_retained(),
        out.join("samples.csv").display(),
        record.grad_evals()
    );
    Ok(())
}
