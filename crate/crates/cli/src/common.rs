//! Plumbing shared by the subcommands: config-file merging, model
//! construction and the run manifest.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use sgmcmc::io::read_dataset_csv;
use sgmcmc::model::BuiltinModel;
use sgmcmc::{Error, Result};

/// Model family named on the command line or in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Gaussian location model; every CSV column is a feature.
    Gaussian,
    /// Logistic regression; the last CSV column is the ±1 label.
    Logistic,
}

/// Loads the optional `--config` TOML. Flags always win over file values;
/// the file only fills in what the command line left unset.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    toml::from_str(&text).map_err(|e| {
        Error::Format { path: path.display().to_string(), message: e.to_string() }
    })
}

/// `flag.or(config)`, the one merge rule every option follows.
pub fn pick<T>(flag: Option<T>, config: Option<T>) -> Option<T> {
    flag.or(config)
}

pub fn require<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| {
        Error::Config(format!("{what} is required (flag or config file)"))
    })
}

pub fn build_model(
    kind: ModelKind,
    data_path: &Path,
    noise_scale: f64,
    prior_scale: f64,
) -> Result<BuiltinModel> {
    let data = read_dataset_csv(data_path)?;
    Ok(match kind {
        ModelKind::Gaussian => BuiltinModel::Gaussian(
            sgmcmc::model::GaussianModel::from_dataset(&data, noise_scale, prior_scale)?,
        ),
        ModelKind::Logistic => {
            BuiltinModel::Logistic(sgmcmc::model::LogisticModel::from_dataset(&data)?)
        }
    })
}

pub fn parse_init(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("--init entry `{f}` is not a number")))
        })
        .collect()
}

/// One resolved setting destined for the manifest, already rendered.
pub struct Setting(pub &'static str, pub String);

pub fn setting(key: &'static str, value: impl Display) -> Setting {
    Setting(key, value.to_string())
}

/// Writes `run_manifest.txt`: the subcommand, the seed it ran under, the
/// schema version of every artifact it produced, and the fully resolved
/// configuration. Deliberately carries no clock or host state, so reruns
/// produce identical bytes.
pub fn write_manifest(
    dir: &Path,
    subcommand: &str,
    seed: Option<u64>,
    artifacts: &[&str],
    settings: &[Setting],
) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!("subcommand: {subcommand}\n"));
    match seed {
        Some(s) => text.push_str(&format!("seed: {s}\n")),
        None => text.push_str("seed: none\n"),
    }
    for artifact in artifacts {
        text.push_str(&format!("schema: {artifact} v1\n"));
    }
    text.push_str("config:\n");
    for Setting(key, value) in settings {
        text.push_str(&format!("  {key} = {value}\n"));
    }
    let path = dir.join("run_manifest.txt");
    std::fs::write(&path, text)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io { path: dir.display().to_string(), source: e })
}

/// Resolves the centering artifact pair for control-variate sampling:
/// `--theta-hat` names the point file explicitly (its gradient sibling sits
/// next to it as `grad_hat.csv`), otherwise a prior `optimize` run is
/// expected to have left the pair in the output directory.
pub fn centering_paths(out: &Path, theta_hat: Option<&Path>) -> Result<(PathBuf, PathBuf)> {
    let theta_path = theta_hat
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("theta_hat.csv"));
    let grad_path = theta_path.with_file_name("grad_hat.csv");
    for p in [&theta_path, &grad_path] {
        if !p.is_file() {
            return Err(Error::Config(format!(
                "control-variate sampling needs a centering artifact; missing {} \
                 (run `optimize` into this directory first, or point --theta-hat at one)",
                p.display()
            )));
        }
    }
    Ok((theta_path, grad_path))
}
