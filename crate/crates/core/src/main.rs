//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error
//! (bad config file, bad arguments, or a run that could not be set up).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nucfw::error::Error;
use nucfw::harness::{
    cli_generate, cli_replay_check, cli_run, cli_speedup, cli_sweep, rerun_manifest,
    verify_suite, BackendConfig, ExperimentConfig, SweepConfig,
};

#[derive(Parser)]
#[command(name = "nucfw", version, about = "Projection-free Frank-Wolfe over nuclear-norm balls")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a problem instance and save it to a directory.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Run one configured experiment; writes trace.csv, manifest.json,
    /// summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the algorithm seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the threaded live executor instead of the simulator.
        #[arg(long)]
        live: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Re-run the experiment recorded in a manifest.json.
    Rerun {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Run a sweep over workers, p, tau, or c.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Run verification suites (gradients, lmo, replay, rates, variance).
    Verify {
        /// Suites to run; all five when omitted.
        suites: Vec<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Build a speedup table from a workers-axis sweep directory.
    Speedup {
        /// Sweep output directory containing point_*/trace.csv.
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Relative-error target.
        #[arg(long, default_value_t = 0.002)]
        target: f64,
        #[arg(long)]
        quiet: bool,
    },
    /// Run a config, then verify its update log replays to the final
    /// iterate (and that the naive variant agrees, where applicable).
    ReplayCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
}

fn dispatch(cli: Cli) -> Result<bool, Error> {
    match cli.cmd {
        Cmd::Generate { config, out, quiet } => {
            let cfg = ExperimentConfig::load(&config)?;
            cli_generate(&cfg, &out, quiet)?;
            Ok(true)
        }
        Cmd::Run { config, out, seed, live, quiet } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.algorithm.algo_seed = s;
            }
            if live && !matches!(cfg.backend, BackendConfig::Live { .. }) {
                cfg.backend = BackendConfig::Live {
                    delay_p: None,
                    delay_unit_micros: None,
                    wall_budget_secs: None,
                };
            }
            cli_run(&cfg, &out, quiet)?;
            Ok(true)
        }
        Cmd::Rerun { config, out, quiet } => {
            rerun_manifest(&config, &out, quiet)?;
            Ok(true)
        }
        Cmd::Sweep { config, out, quiet } => {
            let sweep = SweepConfig::load(&config)?;
            let points = cli_sweep(&sweep, &out, quiet)?;
            Ok(points.iter().all(|p| p.ok))
        }
        Cmd::Verify { suites, quiet } => {
            let names: Vec<String> = if suites.is_empty() {
                ["gradients", "lmo", "replay", "rates", "variance"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect()
            } else {
                suites
            };
            let mut all_ok = true;
            for name in &names {
                let report = verify_suite(name)?;
                if !quiet {
                    println!("== suite {name} ==");
                }
                report.print(quiet);
                all_ok &= report.passed();
            }
            Ok(all_ok)
        }
        Cmd::Speedup { dir, out, target, quiet } => {
            let rows = cli_speedup(&dir, target, &out)?;
            if !quiet {
                for r in &rows {
                    match r.speedup {
                        Some(s) => println!("W={}: speedup {s:.3}", r.workers),
                        None => println!("W={}: target unreachable", r.workers),
                    }
                }
            }
            Ok(true)
        }
        Cmd::ReplayCheck { config, quiet } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = cli_replay_check(&cfg, quiet)?;
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::from(0),
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
