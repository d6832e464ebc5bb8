//! `optimize`: run stochastic gradient descent and persist the centering
//! point as the `theta_hat.csv` / `grad_hat.csv` pair that `sample
//! --estimator cv` consumes.

use std::path::PathBuf;

use clap::Args;
use sgmcmc::estimators::CacheMode;
use sgmcmc::io::write_centering_csvs;
use sgmcmc::model::{GradientModel, ParamVector};
use sgmcmc::optimizer::{find_centering, BatchMode, SgdConfig, StepSchedule};
use sgmcmc::rng;
use sgmcmc::{Error, Result};

use crate::common::{
    self, build_model, load_config, pick, require, setting, ModelKind, Setting,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Fixed stepsize `--h`.
    Constant,
    /// `h_k = 1/(m k)`; needs the strong-convexity constant `--m`.
    InverseIteration,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
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
    schedule: Option<ScheduleKind>,
    /// Stepsize for the constant schedule.
    #[arg(long)]
    h: Option<f64>,
    /// Strong-convexity constant for the inverse-iteration schedule.
    #[arg(long)]
    m: Option<f64>,
    /// Descent iterations.
    #[arg(long = "K")]
    iterations: Option<usize>,
    /// Minibatch size; omit for full-batch descent.
    #[arg(long = "n")]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Starting point, comma-separated; defaults to the origin.
    #[arg(long)]
    init: Option<String>,
    /// Output directory for the centering artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizeFile {
    model: Option<ModelKind>,
    data: Option<PathBuf>,
    noise_scale: Option<f64>,
    prior_scale: Option<f64>,
    schedule: Option<ScheduleKind>,
    h: Option<f64>,
    m: Option<f64>,
    #[serde(rename = "K")]
    iterations: Option<usize>,
    #[serde(rename = "n")]
    batch: Option<usize>,
    seed: Option<u64>,
    init: Option<String>,
    out: Option<PathBuf>,
}

pub fn run(args: OptimizeArgs) -> Result<()> {
    let file: OptimizeFile = load_config(args.config.as_deref())?;
    let model_kind = require(pick(args.model, file.model), "--model")?;
    let data = require(pick(args.data, file.data), "--data")?;
    let out = require(pick(args.out, file.out), "--out")?;
    let iterations = require(pick(args.iterations, file.iterations), "--K")?;
    let noise_scale = pick(args.noise_scale, file.noise_scale).unwrap_or(1.0);
    let prior_scale = pick(args.prior_scale, file.prior_scale).unwrap_or(1.0);
    let schedule_kind = pick(args.schedule, file.schedule).unwrap_or(ScheduleKind::Constant);
    let seed = pick(args.seed, file.seed).unwrap_or(0);
    let batch = pick(args.batch, file.batch);
    let init = pick(args.init, file.init);

    let schedule = match schedule_kind {
        ScheduleKind::Constant => {
            StepSchedule::Constant(require(pick(args.h, file.h), "--h (constant schedule)")?)
        }
        ScheduleKind::InverseIteration => StepSchedule::InverseIteration {
            strong_convexity: require(
                pick(args.m, file.m),
                "--m (inverse-iteration schedule)",
            )?,
        },
    };
    let batch_mode = match batch {
        None | Some(0) => BatchMode::Full,
        Some(n) => BatchMode::Minibatch(n),
    };

    let model = build_model(model_kind, &data, noise_scale, prior_scale)?;
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
        None => ParamVector::zeros(model.dim()),
    };

    let config = SgdConfig::new(
        schedule,
        iterations,
        batch_mode,
        rng::derive_seed(seed, "optimize"),
    );
    let run = find_centering(&model, &initial, &config, CacheMode::Recompute)?;

    common::ensure_dir(&out)?;
    write_centering_csvs(
        &out.join("theta_hat.csv"),
        &out.join("grad_hat.csv"),
        &run.centering,
    )?;
    let settings: Vec<Setting> = vec![
        setting("model", format_args!("{model_kind:?}").to_string().to_lowercase()),
        setting("data", data.display()),
        setting("noise_scale", noise_scale),
        setting("prior_scale", prior_scale),
        setting(
            "schedule",
            match schedule_kind {
                ScheduleKind::Constant => "constant",
                ScheduleKind::InverseIteration => "inverse-iteration",
            },
        ),
        setting(
            "h",
            match schedule {
                StepSchedule::Constant(h) => h.to_string(),
                _ => "schedule-driven".to_string(),
            },
        ),
        setting("K", iterations),
        setting("n", batch.map_or("full".to_string(), |n| n.to_string())),
        setting("init", init.as_deref().unwrap_or("origin")),
    ];
    common::write_manifest(
        &out,
        "optimize",
        Some(seed),
        &["theta_hat.csv", "grad_hat.csv"],
        &settings,
    )?;
    println!(
        "centering point written to {} ({} gradient evaluations)",
        out.join("theta_hat.csv").display(),
        run.grad_evals
    );
    Ok(())
}
