//! Command-line front end: `gen`, `train`, `run` and `compare` over one
//! experiment config.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on missing
//! artifacts, 1 otherwise.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsim::config::ExperimentConfig;
use fedsim::experiment;

#[derive(Parser)]
#[command(
    name = "fedsim",
    about = "Trace-driven federated-learning simulator with MARL client selection",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Mutually exclusive with --preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset: desk, paper-lenet, paper-vgg6.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory for all artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate dataset, shards, profiles and latency traces.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the MARL client-selection policy.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate one policy over a list of seeds.
    Run {
        #[command(flatten)]
        common: Common,
        /// select_all | random_drop | top_half_speed | probing_loss_reject | fedmarl
        #[arg(long)]
        policy: String,
        /// Comma-separated evaluation seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Evaluate several policies over the same seeds and merge summaries.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
}

fn resolve_config(common: &Common) -> fedsim::Result<ExperimentConfig> {
    if let Some(path) = &common.config {
        return ExperimentConfig::load(path);
    }
    let name = common.preset.as_deref().unwrap_or("desk");
    ExperimentConfig::preset(name)
        .ok_or_else(|| fedsim::Error::InvalidConfig(format!("unknown preset '{name}'")))
}

fn run(cli: Cli) -> fedsim::Result<()> {
    match cli.cmd {
        Cmd::Gen { common } => {
            let cfg = resolve_config(&common)?;
            let paths = experiment::cmd_gen(&cfg, &common.out)?;
            for p in paths.all() {
                println!("{}", p.display());
            }
        }
        Cmd::Train { common } => {
            let cfg = resolve_config(&common)?;
            let paths = experiment::cmd_train(&cfg, &common.out)?;
            println!("{}", paths.policy_stem.with_extension("bin").display());
            println!("{}", paths.policy_stem.with_extension("json").display());
            println!("{}", paths.train_log.display());
        }
        Cmd::Run {
            common,
            policy,
            seeds,
        } => {
            let cfg = resolve_config(&common)?;
            let paths = experiment::cmd_run(&cfg, &common.out, &policy, &seeds)?;
            for p in &paths.records {
                println!("{}", p.display());
            }
            println!("{}", paths.summary.display());
        }
        Cmd::Compare {
            common,
            policies,
            seeds,
        } => {
            let cfg = resolve_config(&common)?;
            let path = experiment::cmd_compare(&cfg, &common.out, &policies, &seeds)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn exit_code(err: &fedsim::Error) -> u8 {
    use fedsim::Error::*;
    match err {
        InvalidConfig(_) | Malformed { .. } | UnknownPolicy(_) | Infeasible(_) => 2,
        MissingArtifact(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
