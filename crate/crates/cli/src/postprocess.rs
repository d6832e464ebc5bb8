//! `postprocess`: read a recorded chain, fit the zero-variance correction
//! for the requested statistics and write `zv_report.csv` plus the
//! corrected series.

use std::path::PathBuf;

use clap::Args;
use sgmcmc::io::{read_sample_table, write_corrected_csv, write_zv_report_csv};
use sgmcmc::zv::{apply_zv, TestFunction, ZvCorrection, ZvInput, ZvOptions};
use sgmcmc::{Error, Result};

use crate::common::{self, load_config, pick, require, setting, Setting};

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    /// TOML file supplying defaults for any flag left unset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding samples.csv and gradients.csv from `sample`.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Retained rows to drop from the front before fitting.
    #[arg(long)]
    burn_in: Option<usize>,
    /// Comma-separated statistics, e.g. `theta_1,theta_2_squared`;
    /// defaults to every coordinate.
    #[arg(long)]
    functions: Option<String>,
    /// Stabilize a near-singular covariance instead of failing.
    #[arg(long)]
    ridge: bool,
    /// Output directory; defaults to --dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct PostprocessFile {
    dir: Option<PathBuf>,
    burn_in: Option<usize>,
    functions: Option<String>,
    ridge: Option<bool>,
    out: Option<PathBuf>,
}

pub fn run(args: PostprocessArgs) -> Result<()> {
    let file: PostprocessFile = load_config(args.config.as_deref())?;
    let dir = require(pick(args.dir, file.dir), "--dir")?;
    let out = pick(args.out, file.out).unwrap_or_else(|| dir.clone());
    let burn_in = pick(args.burn_in, file.burn_in).unwrap_or(0);
    let ridge = args.ridge || file.ridge.unwrap_or(false);
    let functions_text = pick(args.functions, file.functions);

    let samples = read_sample_table(&dir.join("samples.csv"), "theta")?;
    let gradients = read_sample_table(&dir.join("gradients.csv"), "g")?;
    if samples.dim != gradients.dim || samples.rows() != gradients.rows() {
        return Err(Error::Format {
            path: dir.display().to_string(),
            message: format!(
                "samples.csv is {}×{} but gradients.csv is {}×{}",
                samples.rows(),
                samples.dim,
                gradients.rows(),
                gradients.dim
            ),
        });
    }
    if burn_in >= samples.rows() {
        return Err(Error::Config(format!(
            "burn-in {burn_in} swallows all {} recorded rows",
            samples.rows()
        )));
    }
    let dim = samples.dim;
    let keep = |table: &sgmcmc::io::SampleTable| table.values[burn_in * dim..].to_vec();
    let input = ZvInput::new(keep(&samples), keep(&gradients), dim)?;

    let functions: Vec<TestFunction> = match &functions_text {
        Some(text) => text
            .split(',')
            .map(|name| name.trim().parse())
            .collect::<Result<_>>()?,
        None => (0..dim).map(TestFunction::Coordinate).collect(),
    };
    if functions.is_empty() {
        return Err(Error::Config("no statistics requested".into()));
    }

    let options = ZvOptions { ridge };
    let mut report: Vec<(TestFunction, ZvCorrection)> = Vec::with_capacity(functions.len());
    for function in &functions {
        report.push((*function, apply_zv(&input, function, &options)?));
    }

    common::ensure_dir(&out)?;
    write_zv_report_csv(&out.join("zv_report.csv"), &report)?;
    let columns: Vec<(String, &[f64])> = report
        .iter()
        .map(|(f, c)| (f.to_string(), c.corrected.as_slice()))
        .collect();
    write_corrected_csv(&out.join("corrected.csv"), &columns)?;

    let settings: Vec<Setting> = vec![
        setting("dir", dir.display()),
        setting("burn_in", burn_in),
        setting(
            "functions",
            functions
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        setting("ridge", ridge),
    ];
    common::write_manifest(
        &out,
        "postprocess",
        None,
        &["zv_report.csv", "corrected.csv"],
        &settings,
    )?;
    for (function, correction) in &report {
        println!(
            "{function}: variance {:.6e} -> {:.6e}",
            correction.raw_variance, correction.corrected_variance
        );
    }
    Ok(())
}
