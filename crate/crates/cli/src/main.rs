//! `contramix` command-line front end.
//!
//! Exit codes: 0 on success, 1 for configuration or usage errors, 2 for
//! failures while loading data or training.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use contramix::config::{Arm, ExperimentConfig};
use contramix::experiment::{execute, Command};
use contramix::Error;

#[derive(Parser)]
#[command(name = "contramix", version, about = "Semi-supervised tabular learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured arm across all seeds.
    Run(Common),
    /// Run the ablation ladder (supervised, self_sl, self_sl_pl, full, random_mix_ablation).
    Ablate(Common),
    /// Sweep the labeled-set size with the test set held fixed.
    Curve {
        #[command(flatten)]
        common: Common,
        /// Labeled counts, overriding `curve.labeled_counts`.
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
    /// Print the resolved config (defaults applied) as TOML.
    Inspect(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Arm override.
    #[arg(long)]
    arm: Option<String>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (seeds run in parallel); recorded in the manifest.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(arm) = &self.arm {
            cfg.arm = arm.parse::<Arm>()?;
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Errors while reading or resolving the config exit with 1, the rest with 2.
enum Failure {
    Config(Error),
    Runtime(Error),
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (cfg, command) = match &cli.command {
        Cmd::Inspect(common) => {
            let cfg = common.resolve().map_err(Failure::Config)?;
            print!("{}", cfg.to_toml_string().map_err(Failure::Runtime)?);
            return Ok(());
        }
        Cmd::Run(common) => (common.resolve().map_err(Failure::Config)?, Command::Run),
        Cmd::Ablate(common) => (common.resolve().map_err(Failure::Config)?, Command::Ablate),
        Cmd::Curve { common, counts } => {
            let mut cfg = common.resolve().map_err(Failure::Config)?;
            if !counts.is_empty() {
                cfg.curve.labeled_counts = counts.clone();
            }
            (cfg, Command::Curve)
        }
    };
    let (result, paths) = execute(&cfg, command).map_err(|e| match e {
        Error::Config(_) => Failure::Config(e),
        e => Failure::Runtime(e),
    })?;
    print!("{}", result.report_csv());
    eprintln!("wrote {}", paths.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
