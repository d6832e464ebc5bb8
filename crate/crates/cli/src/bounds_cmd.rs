//! `bounds`: turn curvature constants into the stepsize ceiling, a
//! conforming (h, K, n) budget and the contraction envelope it implies.

use std::path::PathBuf;

use clap::Args;
use sgmcmc::bounds::{bound_report, BoundReport, CurvatureBounds};
use sgmcmc::io::write_bound_report_csv;
use sgmcmc::Result;

use crate::common::{self, load_config, pick, require, setting, Setting};

#[derive(Debug, Args)]
pub struct BoundsArgs {
    /// TOML file supplying defaults for any flag left unset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Strong convexity of the summed objective.
    #[arg(long)]
    m: Option<f64>,
    /// Smoothness of the summed objective.
    #[arg(long = "M")]
    smoothness: Option<f64>,
    /// Parameter dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Accuracy target; the guarantee is eps0/sqrt(m).
    #[arg(long)]
    eps0: Option<f64>,
    /// Minibatch size the stepsize ceiling is quoted for.
    #[arg(long = "n")]
    batch: Option<usize>,
    /// Squared distance from the chain start to the minimizer.
    #[arg(long)]
    start_gap_sq: Option<f64>,
    /// Squared distance from the centering point to the minimizer.
    #[arg(long)]
    centering_gap_sq: Option<f64>,
    /// Also write bounds.csv and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsFile {
    m: Option<f64>,
    #[serde(rename = "M")]
    smoothness: Option<f64>,
    d: Option<usize>,
    eps0: Option<f64>,
    #[serde(rename = "n")]
    batch: Option<usize>,
    start_gap_sq: Option<f64>,
    centering_gap_sq: Option<f64>,
    out: Option<PathBuf>,
}

fn print_report(report: &BoundReport) {
    println!("h_max = {}", report.stepsize_cap);
    println!(
        "budget: h = {}, K = {}, n = {}",
        report.budget.stepsize, report.budget.iterations, report.budget.batch_size
    );
    println!(
        "contraction: A = {}, B = {}, C = {}",
        report.triple.a, report.triple.b, report.triple.c
    );
    println!("initial distance = {}", report.initial_distance);
    println!("envelope at budget = {}", report.envelope_at_budget);
    println!("guarantee = {}", report.guarantee);
    println!("K*n = {}", report.iteration_batch_product);
}

pub fn run(args: BoundsArgs) -> Result<()> {
    let file: BoundsFile = load_config(args.config.as_deref())?;
    let m = require(pick(args.m, file.m), "--m")?;
    let smoothness = require(pick(args.smoothness, file.smoothness), "--M")?;
    let d = require(pick(args.d, file.d), "--d")?;
    let eps0 = require(pick(args.eps0, file.eps0), "--eps0")?;
    let batch = require(pick(args.batch, file.batch), "--n")?;
    let start_gap_sq = pick(args.start_gap_sq, file.start_gap_sq).unwrap_or(0.0);
    let centering_gap_sq = pick(args.centering_gap_sq, file.centering_gap_sq).unwrap_or(0.0);

    let curvature = CurvatureBounds::new(m, smoothness)?;
    let report = bound_report(&curvature, d, eps0, batch, start_gap_sq, centering_gap_sq)?;
    print_report(&report);

    if let Some(out) = pick(args.out, file.out) {
        common::ensure_dir(&out)?;
        write_bound_report_csv(&out.join("bounds.csv"), &report)?;
        let settings: Vec<Setting> = vec![
            setting("m", m),
            setting("M", smoothness),
            setting("d", d),
            setting("eps0", eps0),
            setting("n", batch),
            setting("start_gap_sq", start_gap_sq),
            setting("centering_gap_sq", centering_gap_sq),
        ];
        common::write_manifest(&out, "bounds", None, &["bounds.csv"], &settings)?;
    }
    Ok(())
}
