//! JSON configuration files and their merge with command-line flags.
//!
//! Precedence: a flag given on the command line wins over the same field in
//! the config file, which wins over the built-in default. Relative paths in
//! a config file are resolved against the directory holding that file;
//! relative paths given as flags are resolved against the working directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use scc_mediate::design::Value;
use scc_mediate::fit::Method;
use scc_mediate::mle::MlOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorChoice {
    M,
    Ml,
    W,
    All,
}

impl EstimatorChoice {
    pub fn methods(self) -> Vec<Method> {
        match self {
            EstimatorChoice::M => vec![Method::M],
            EstimatorChoice::Ml => vec![Method::Ml],
            EstimatorChoice::W => vec![Method::Weighting],
            EstimatorChoice::All => Method::ALL.to_vec(),
        }
    }
}

/// Contents of a `fit` config file. Every field may also come from a flag
/// where one exists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub data: Option<PathBuf>,
    pub outcome: Option<String>,
    pub mediator: Option<String>,
    pub stratum: Option<String>,
    /// Columns always read as categorical.
    pub categorical: Vec<String>,
    pub outcome_formula: Option<String>,
    pub mediator_formula: Option<String>,
    /// Population prevalence per stratum, in stratum order.
    pub pi: Vec<f64>,
    pub estimator: Option<EstimatorChoice>,
    pub ml: Option<MlOptions>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Fully resolved and validated `fit` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub outcome: String,
    pub mediator: String,
    pub stratum: Option<String>,
    pub categorical: Vec<String>,
    pub outcome_formula: String,
    pub mediator_formula: String,
    pub pi: Vec<f64>,
    pub estimators: Vec<Method>,
    pub ml: MlOptions,
    pub out: PathBuf,
}

/// Flags shared by the subcommands; `None` leaves the config value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub estimator: Option<EstimatorChoice>,
    pub pi: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn relative_to(base: Option<&Path>, p: PathBuf) -> PathBuf {
    match base {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p,
    }
}

fn config_dir(path: &Path) -> Option<&Path> {
    path.parent().filter(|d| !d.as_os_str().is_empty())
}

pub fn check_pi(pi: &[f64]) -> Result<()> {
    for (b, &v) in pi.iter().enumerate() {
        if !(v > 0.0 && v < 1.0) {
            bail!("prevalence for stratum {} is {v}; it must lie in (0, 1)", b + 1);
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn resolve(config: Option<&Path>, flags: Overrides) -> Result<RunConfig> {
        let (file, base) = match config {
            Some(p) => (read_json::<FitConfig>(p)?, config_dir(p)),
            None => (FitConfig::default(), None),
        };
        let data = match (flags.data, file.data) {
            (Some(d), _) => d,
            (None, Some(d)) => relative_to(base, d),
            (None, None) => bail!("no data file: pass --data or set `data` in the config"),
        };
        if !data.is_file() {
            bail!("data file {} does not exist", data.display());
        }
        let mediator = file
            .mediator
            .context("config must name the `mediator` column")?;
        let outcome_formula = file
            .outcome_formula
            .context("config must give `outcome_formula`")?;
        let mediator_formula = file
            .mediator_formula
            .context("config must give `mediator_formula`")?;
        let pi = flags.pi.unwrap_or(file.pi);
        if pi.is_empty() {
            bail!("no prevalence: pass --pi or set `pi` in the config");
        }
        check_pi(&pi)?;
        let estimators = flags.estimator.or(file.estimator).unwrap_or(EstimatorChoice::All).methods();
        let mut ml = file.ml.unwrap_or_default();
        if let Some(seed) = flags.seed.or(file.seed) {
            ml.seed = seed;
        }
        let out = match (flags.out, file.out) {
            (Some(o), _) => o,
            (None, Some(o)) => relative_to(base, o),
            (None, None) => PathBuf::from("."),
        };
        Ok(RunConfig {
            data,
            outcome: file.outcome.unwrap_or_else(|| "y".into()),
            mediator,
            stratum: file.stratum,
            categorical: file.categorical,
            outcome_formula,
            mediator_formula,
            pi,
            estimators,
            ml,
            out,
        })
    }
}

/// One requested effect: `variable` moved from `reference` to `level` with
/// the other covariates at `at` (reference levels and zero by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastSpec {
    pub variable: String,
    pub level: Value,
    pub reference: Value,
    #[serde(default)]
    pub at: BTreeMap<String, Value>,
    #[serde(default)]
    pub stratum: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectsConfig {
    /// Fit artifact written by `fit`.
    pub fit: Option<PathBuf>,
    pub estimator: Option<EstimatorChoice>,
    /// Empty means every non-reference level of each categorical exposure
    /// in the mediator model against its reference.
    pub contrasts: Vec<ContrastSpec>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectsRun {
    pub fit: PathBuf,
    pub estimators: Option<Vec<Method>>,
    pub contrasts: Vec<ContrastSpec>,
    pub out: PathBuf,
}

impl EffectsRun {
    pub fn resolve(config: Option<&Path>, fit: Option<PathBuf>, flags: Overrides) -> Result<EffectsRun> {
        let (file, base) = match config {
            Some(p) => (read_json::<EffectsConfig>(p)?, config_dir(p)),
            None => (EffectsConfig::default(), None),
        };
        let fit = match (fit, file.fit) {
            (Some(f), _) => f,
            (None, Some(f)) => relative_to(base, f),
            (None, None) => bail!("no fit artifact: pass --fit or set `fit` in the config"),
        };
        if !fit.is_file() {
            bail!("fit artifact {} does not exist", fit.display());
        }
        let out = match (flags.out, file.out) {
            (Some(o), _) => o,
            (None, Some(o)) => relative_to(base, o),
            (None, None) => PathBuf::from("."),
        };
        Ok(EffectsRun {
            fit,
            estimators: flags.estimator.or(file.estimator).map(EstimatorChoice::methods),
            contrasts: file.contrasts,
            out,
        })
    }
}
