//! `experiment`: execute a TOML experiment plan, either the method
//! comparison or the before/after variance study, depending on the plan's
//! `mode`.

use std::path::PathBuf;

use clap::Args;
use sgmcmc::experiments::{run_comparison, run_zv_comparison, ExperimentMode, ExperimentPlan};
use sgmcmc::Result;

use crate::common::{self, setting, Setting};

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment plan TOML.
    #[arg(long)]
    plan: PathBuf,
    /// Overrides the plan's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the plan's master_seed.
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run(args: ExperimentArgs) -> Result<()> {
    let mut plan = ExperimentPlan::from_path(&args.plan)?;
    if let Some(out) = args.out {
        plan.output_dir = out;
    }
    if let Some(seed) = args.seed {
        plan.master_seed = seed;
    }

    let (artifacts, printed): (Vec<&str>, String) = match plan.mode {
        ExperimentMode::Comparison => {
            let report = run_comparison(&plan)?;
            let ok = report.summary.iter().filter(|r| r.status == "ok").count();
            (
                vec!["summary.csv", "noise.csv"],
                format!(
                    "{} of {} cells ok; summary at {}",
                    ok,
                    report.summary.len(),
                    plan.output_dir.join("summary.csv").display()
                ),
            )
        }
        ExperimentMode::Zv => {
            let rows = run_zv_comparison(&plan)?;
            (
                vec!["zv_summary.csv"],
                format!(
                    "{} corrected chains; summary at {}",
                    rows.len(),
                    plan.output_dir.join("zv_summary.csv").display()
                ),
            )
        }
    };

    let settings: Vec<Setting> = vec![
        setting("plan", args.plan.display()),
        setting(
            "mode",
            match plan.mode {
                ExperimentMode::Comparison => "comparison",
                ExperimentMode::Zv => "zv",
            },
        ),
        setting("replications", plan.replications),
        setting("output_dir", plan.output_dir.display()),
    ];
    common::write_manifest(
        &plan.output_dir,
        "experiment",
        Some(plan.master_seed),
        &artifacts,
        &settings,
    )?;
    println!("{printed}");
    Ok(())
}
