//! `structgp`: fit, compare and check sparse GP bounds from the command line.
//!
//! Exit codes: 0 on success, 1 on a run-time failure or a failed
//! verification, 2 on an invalid configuration.

mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use structgp::verify::{run_all, Scale, VerifyConfig};

use config::{ExperimentConfig, Overrides};
use output::{ser_f64, Stamp};

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration; the message starts with the offending field.
    Config(String),
    Run(String),
    /// Verification ran and some criteria failed.
    Failed(Vec<String>),
}

#[derive(Parser)]
#[command(name = "structgp", version, about = "Sparse GP regression with structured variational bounds and Power-EP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method and write model.json, trace.csv, report.json (and curve.csv for 1-D data).
    Fit(Overrides),
    /// Train several methods from one initialization and write a comparison table.
    Compare(Overrides),
    /// Run the invariant suites on seeded random instances.
    Verify(VerifyArgs),
    /// Predict with a saved model.
    Predict(PredictArgs),
}

#[derive(clap::Args)]
struct VerifyArgs {
    /// `small` or `full`.
    #[arg(long, default_value = "small")]
    scale: Scale,
    #[arg(long, value_name = "INT", default_value_t = 0)]
    seed: u64,
    /// Also write verify.json here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Test hook: offset added to every T-SGPR value in the ordering suite.
    #[arg(long, hide = true, allow_hyphen_values = true)]
    tamper_tsgpr: Option<f64>,
}

#[derive(clap::Args)]
struct PredictArgs {
    /// model.json written by `fit` or `compare`.
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Predict on every row of this configuration's data instead of the saved split.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Defaults to `predict/` next to the model file.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct VerifyRow {
    id: u32,
    name: String,
    passed: bool,
    cases: usize,
    failures: usize,
    #[serde(serialize_with = "ser_f64")]
    worst: f64,
    first_failure: Option<String>,
}

#[derive(Serialize)]
struct VerifyFile {
    version: String,
    seed: u64,
    scale: Scale,
    passed: bool,
    criteria: Vec<VerifyRow>,
}

fn verify(a: &VerifyArgs) -> Result<(), CliError> {
    let rep = run_all(&VerifyConfig { scale: a.scale, seed: a.seed, tamper_tsgpr: a.tamper_tsgpr });
    print!("{}", rep.render());
    if let Some(dir) = &a.out {
        let criteria = rep
            .results
            .iter()
            .map(|r| VerifyRow {
                id: r.id,
                name: r.name.clone(),
                passed: r.passed(),
                cases: r.cases,
                failures: r.failures,
                worst: r.worst,
                first_failure: r.first_failure.clone(),
            })
            .collect();
        let file = VerifyFile { version: structgp::VERSION.into(), seed: a.seed, scale: a.scale, passed: rep.passed(), criteria };
        output::write_json(&dir.join("verify.json"), &file)?;
    }
    if rep.passed() {
        Ok(())
    } else {
        Err(CliError::Failed(rep.failed_names()))
    }
}

fn summary(stamp: &Stamp, r: &run::Report) -> String {
    format!(
        "{:<22} objective={:.6} rmse={:.6} mean_ll={:.6} sigma2={:.6} ({} {})",
        r.method,
        r.objective,
        r.rmse,
        r.mean_ll,
        r.sigma2,
        r.metrics_on,
        &stamp.config_hash[..12]
    )
}

fn stamp_of(r: &run::Report) -> Stamp {
    Stamp { version: r.version.clone(), config_hash: r.config_hash.clone(), seed: r.seed }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit(o) => {
            let cfg = ExperimentConfig::resolve(&o, false)?;
            let r = run::cmd_fit(&cfg)?;
            println!("{}", summary(&stamp_of(&r), &r));
            println!("wrote {}", cfg.out.display());
        }
        Command::Compare(o) => {
            let cfg = ExperimentConfig::resolve(&o, true)?;
            for r in run::cmd_compare(&cfg)? {
                println!("{}", summary(&stamp_of(&r), &r));
            }
            println!("wrote {}", cfg.out.display());
        }
        Command::Verify(a) => verify(&a)?,
        Command::Predict(a) => {
            let data = a.config.as_deref().map(ExperimentConfig::from_file).transpose()?;
            let out = a.out.clone().unwrap_or_else(|| run::default_predict_out(&a.model));
            let r = run::cmd_predict(&a.model, data.as_ref(), &out)?;
            println!("{}", summary(&stamp_of(&r), &r));
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: invalid configuration: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Failed(names)) => {
            eprintln!("verification failed: {}", names.join(", "));
            ExitCode::from(1)
        }
    }
}
