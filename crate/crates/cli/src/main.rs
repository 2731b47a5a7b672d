//! `scc-mediate`: fit joint outcome/mediator models to case-control data,
//! compute natural effects from a saved fit, and run simulation scenarios.
//!
//! Exit status: 0 when every artifact was written and every requested
//! estimator converged, 1 when an estimator failed or did not converge
//! (artifacts still hold the other estimators' results), 2 for invalid
//! input or configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use scc_mediate::sim::SimScenario;

use commands::{cmd_effects, cmd_fit, cmd_simulate, SimulateRun};
use config::{read_json, EffectsRun, EstimatorChoice, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "scc-mediate", version, about = "Mediation analysis for case-control samples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. They override the config file.
#[derive(Debug, Args)]
struct Common {
    /// JSON config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Estimators to run.
    #[arg(long, value_enum)]
    estimator: Option<EstimatorChoice>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the outcome and mediator models from a CSV file.
    Fit {
        #[command(flatten)]
        common: Common,
        /// CSV data file.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Population prevalence per stratum.
        #[arg(long, value_name = "FLOAT[,FLOAT...]", value_delimiter = ',')]
        pi: Option<Vec<f64>>,
        /// Seed of the ML multi-start perturbations.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Natural direct and indirect effects from a saved fit.
    Effects {
        #[command(flatten)]
        common: Common,
        /// Fit artifact written by `fit`.
        #[arg(long, value_name = "PATH")]
        fit: Option<PathBuf>,
    },
    /// Run a simulation scenario.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Built-in scenario name, used when no config is given.
        #[arg(long, default_value = "scenario1")]
        scenario: String,
        /// Population of 30 million with the unshifted intercepts (built-in
        /// scenarios only).
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicates: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Fit { common, data, pi, seed } => {
            let run = RunConfig::resolve(
                common.config.as_deref(),
                Overrides {
                    data,
                    estimator: common.estimator,
                    pi,
                    seed,
                    out: common.out,
                },
            )?;
            cmd_fit(&run)
        }
        Command::Effects { common, fit } => {
            let run = EffectsRun::resolve(
                common.config.as_deref(),
                fit,
                Overrides {
                    estimator: common.estimator,
                    out: common.out,
                    ..Overrides::default()
                },
            )?;
            cmd_effects(&run)
        }
        Command::Simulate {
            common,
            scenario,
            paper_scale,
            seed,
            replicates,
        } => {
            let mut scn = match &common.config {
                Some(path) => {
                    if paper_scale {
                        bail!("--paper-scale applies to built-in scenarios only");
                    }
                    read_json::<SimScenario>(path)?
                }
                None => match SimScenario::builtin(&scenario, paper_scale) {
                    Some(s) => s,
                    None => bail!("unknown scenario `{scenario}`; built-in scenarios are scenario1 and scenario2"),
                },
            };
            if let Some(seed) = seed {
                scn.seed = seed;
            }
            if let Some(r) = replicates {
                scn.n_replicates = r;
            }
            let run = SimulateRun {
                scenario: scn,
                estimators: common.estimator.unwrap_or(EstimatorChoice::All).methods(),
                out: common.out.unwrap_or_else(|| PathBuf::from(".")),
            };
            cmd_simulate(&run)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
