//! Command-line surface: argument definitions, dispatch, and the mapping
//! from error categories to exit codes.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use ppate_core::{Error, Result};

use crate::commands::{cmd_plan, cmd_report, cmd_run, cmd_simulate, summary_table};
use crate::config::{ExperimentConfig, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "ppate",
    version,
    about = "Privacy accounting and voting simulation for teacher ensembles \
             with per-point budgets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Worker threads for repetitions (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

/// Config file plus per-field overrides, shared by the config-driven
/// subcommands.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML experiment config; omitted means the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub overrides: Overrides,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        self.overrides.apply(&mut config)?;
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Resolve the group plan (duplicates, frequencies, or weights) and
    /// write it as JSON.
    Plan {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output path (default: <output dir>/plan.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit a synthetic vote matrix with ground truth.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output path (default: <output dir>/votes.txt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the voting experiment: per-repetition history files plus an
    /// aggregate summary.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Flatten history files into one plot-ready long-format CSV.
    Report {
        /// History files, in the run order they should be numbered with.
        #[arg(required = true)]
        histories: Vec<PathBuf>,
        /// Output path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit code for an error category; 0 is success. Stable so scripts can
/// branch on the outcome without parsing stderr.
pub fn exit_code(category: &str) -> i32 {
    match category {
        "invalid-parameter" => 2,
        "plan-infeasible" => 3,
        "dimension-mismatch" => 4,
        "parse" => 5,
        "io" => 6,
        "invalid-vote" => 7,
        "grid-mismatch" => 8,
        "empty-curve" => 9,
        _ => 1,
    }
}

/// A one-line remedy for errors where the fix is not obvious from the
/// message alone.
pub fn remedy_hint(error: &Error) -> Option<&'static str> {
    match error {
        Error::PlanInfeasible(_) => Some(
            "bring the budgets closer to small integer ratios, raise \
             --duplicate-cap, loosen --upsampling-precision, or give every \
             group a larger data share",
        ),
        _ => None,
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Plan { config, out } => {
            let config = config.resolve()?;
            let path = out
                .clone()
                .unwrap_or_else(|| config.output.directory.join("plan.json"));
            let plan = cmd_plan(&config, &path)?;
            println!(
                "wrote plan for {} group(s) to {}",
                plan.groups.len(),
                path.display()
            );
        }
        Command::Simulate { config, out } => {
            let config = config.resolve()?;
            let path = out
                .clone()
                .unwrap_or_else(|| config.output.directory.join("votes.txt"));
            let votes = cmd_simulate(&config, &path)?;
            println!(
                "wrote {} queries from {} teachers to {}",
                votes.num_queries(),
                votes.teachers(),
                path.display()
            );
        }
        Command::Run { config } => {
            let config = config.resolve()?;
            let output = cmd_run(&config)?;
            print!("{}", summary_table(config.variant.as_str(), &output.summary));
            println!(
                "wrote {} history file(s) to {}",
                output.histories.len(),
                config.output.directory.display()
            );
        }
        Command::Report { histories, out } => {
            let csv = cmd_report(histories)?;
            match out {
                Some(path) => {
                    let tmp = path.with_extension("tmp");
                    std::fs::write(&tmp, csv.as_bytes())?;
                    std::fs::rename(&tmp, path)?;
                    println!("wrote report to {}", path.display());
                }
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

/// Runs a parsed invocation and returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    if let Some(jobs) = cli.jobs {
        // repetitions are collected in order, so the thread count never
        // changes results; a second configuration attempt in-process is a
        // no-op and fine to ignore
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(error) => {
            eprintln!("error[{}]: {error}", error.category());
            if let Some(hint) = remedy_hint(&error) {
                eprintln!("hint: {hint}");
            }
            exit_code(error.category())
        }
    }
}
