use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use notbary::cli::{
    compute_metrics, gaussian_oracle_report, load_checkpoint, parse_config, run_experiment,
};

/// Weak optimal-transport barycenter experiments.
#[derive(Parser)]
#[command(name = "notbary", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more experiment configs end to end.
    Run {
        /// JSON config files.
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Override the output directory (single config only).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run up to J configs in parallel child processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a checkpoint against its config and print metrics JSON.
    Eval {
        /// Checkpoint stem (path without the .json/.bin extension).
        checkpoint: PathBuf,
        /// The config the checkpoint was trained under.
        config: PathBuf,
    },
    /// Closed-form oracles.
    Oracle {
        #[command(subcommand)]
        what: OracleCommand,
    },
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Print the fixed-point barycenter and Monge maps of a Gaussian
    /// instance as JSON.
    Gaussian {
        /// Instance JSON: {"dists": [{"mean": [...], "cov": [[...]]}],
        /// "weights": [...], "tol"?, "max_iter"?}
        instance: PathBuf,
    },
}

fn apply_overrides(
    path: &PathBuf,
    out: &Option<PathBuf>,
    seed: Option<u64>,
) -> notbary::Result<notbary::cli::ExperimentConfig> {
    let mut cfg = parse_config(path)?;
    if let Some(out) = out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_single(path: &PathBuf, out: &Option<PathBuf>, seed: Option<u64>) -> notbary::Result<()> {
    let cfg = apply_overrides(path, out, seed)?;
    let artifacts = run_experiment(&cfg)?;
    eprintln!(
        "{}: artifacts in {}",
        cfg.experiment.tag(),
        artifacts.out_dir.display()
    );
    println!("{}", serde_json::to_string_pretty(&artifacts.report).expect("report serializes"));
    Ok(())
}

/// Runs configs in up to `jobs` child processes (one process per config, no
/// shared state).
fn run_parallel(configs: &[PathBuf], seed: Option<u64>, jobs: usize) -> notbary::Result<bool> {
    let exe = std::env::current_exe()?;
    let mut pending = configs.iter();
    let mut active: Vec<(std::process::Child, PathBuf)> = Vec::new();
    let mut all_ok = true;
    loop {
        while active.len() < jobs {
            match pending.next() {
                Some(cfg) => {
                    let mut cmd = std::process::Command::new(&exe);
                    cmd.arg("run").arg(cfg);
                    if let Some(seed) = seed {
                        cmd.arg("--seed").arg(seed.to_string());
                    }
                    active.push((cmd.spawn()?, cfg.clone()));
                }
                None => break,
            }
        }
        if active.is_empty() {
            break;
        }
        let (child, cfg) = &mut active[0];
        let status = child.wait()?;
        if !status.success() {
            eprintln!("config {} failed with {status}", cfg.display());
            all_ok = false;
        }
        active.remove(0);
    }
    Ok(all_ok)
}

fn real_main() -> notbary::Result<bool> {
    // accepted for interface compatibility: linear algebra here is
    // single-threaded, so the cap is trivially satisfied
    let _ = std::env::var("NOTBARY_THREADS");

    let cli = Cli::parse();
    match cli.command {
        Command::Run { configs, out, seed, jobs } => {
            if configs.len() > 1 && out.is_some() {
                return Err(notbary::Error::Config(
                    "--out applies to a single config".to_string(),
                ));
            }
            if configs.len() > 1 && jobs > 1 {
                run_parallel(&configs, seed, jobs)
            } else {
                for cfg in &configs {
                    run_single(cfg, &out, seed)?;
                }
                Ok(true)
            }
        }
        Command::Eval { checkpoint, config } => {
            let cfg = parse_config(&config)?;
            let loaded = load_checkpoint(&checkpoint, &cfg)?;
            let report = compute_metrics(&loaded.state, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(true)
        }
        Command::Oracle { what } => match what {
            OracleCommand::Gaussian { instance } => {
                let text = std::fs::read_to_string(&instance)?;
                println!("{}", gaussian_oracle_report(&text)?);
                Ok(true)
            }
        },
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
