use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lorentz_core::harness::{self, Experiment, ExperimentConfig};

/// Inelastic Lorentz gas experiments.
#[derive(Debug, Parser)]
#[command(name = "lorentz", version)]
struct Cli {
    /// simulate, adjoint, converge, haff, lemmas or compare
    experiment: Experiment,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: LORENTZ_THREADS, else all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Run a check suite instead of the experiment.
    #[arg(long)]
    check: Option<String>,
    /// Override a config key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn load(cli: &Cli) -> lorentz_core::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.experiment = cli.experiment;
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let problems = harness::validate(&cfg);
    if !problems.is_empty() {
        for p in problems {
            eprintln!("invalid config: {p}");
        }
        return ExitCode::from(2);
    }
    if let Some(suite) = &cli.check {
        return match harness::check_mode(&cfg, suite) {
            Ok(results) => {
                for r in &results {
                    println!("{r}");
                }
                if results.iter().all(|r| r.passed) {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        };
    }
    match harness::run(&cfg) {
        Ok(out) => {
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            println!("{}", serde_json::to_string_pretty(&out.summary).unwrap());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
