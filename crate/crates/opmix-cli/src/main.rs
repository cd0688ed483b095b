//! `opmix`: run mixture-strategy experiments, report them, audit them.
//!
//! Exit code 0 on success; on failure a machine-readable error record goes
//! to stderr (and, for `run`, into the output directory) before a nonzero
//! exit.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use opmix_cli::config::ExperimentConfig;
use opmix_cli::inspect::{audit_run, sweep_run, InspectArgs};
use opmix_cli::report::{report, to_csv, to_table};
use opmix_cli::runner;

#[derive(Parser)]
#[command(name = "opmix", about = "Mixture-strategy experiment harness", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute every strategy x ordering x seed cell of a config.
    Run {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a run directory into a comparison table and report.csv.
    Report {
        /// Run directory produced by `opmix run`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Three-surface gap-bound audit of selected stages of one cell.
    Audit {
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated 1-based stages (default: every stage from 2 on).
        #[arg(long)]
        stages: Option<String>,
        /// Ordering index within the run.
        #[arg(long, default_value_t = 0)]
        ordering: usize,
        /// Seed index within the run's seed list.
        #[arg(long, default_value_t = 0)]
        seed_index: usize,
        /// Grid points per audited stage.
        #[arg(long, default_value_t = 11)]
        grid: usize,
    },
    /// Grid regret sweep of the realized mixtures of one cell.
    Sweep {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        stages: Option<String>,
        #[arg(long, default_value_t = 0)]
        ordering: usize,
        #[arg(long, default_value_t = 0)]
        seed_index: usize,
        #[arg(long, default_value_t = 11)]
        grid: usize,
    },
}

fn parse_stages(text: Option<String>) -> opmix::Result<Option<Vec<usize>>> {
    match text {
        None => Ok(None),
        Some(s) => s
            .split(',')
            .map(|part| {
                part.trim()
                    .parse::<usize>()
                    .map_err(|_| opmix::Error::invalid(format!("bad stage number {part:?}")))
            })
            .collect::<opmix::Result<Vec<_>>>()
            .map(Some),
    }
}

fn dispatch(cli: Cli) -> opmix::Result<()> {
    match cli.cmd {
        Cmd::Run { config, out } => {
            let (cfg, raw) = ExperimentConfig::load(&config)?;
            let out_dir = match out.or_else(|| cfg.out_dir.clone()) {
                Some(d) => d,
                None => {
                    return Err(opmix::Error::invalid(
                        "no output directory: set out_dir in the config or pass --out",
                    ))
                }
            };
            let outcome = runner::run(&cfg, &raw, &out_dir)?;
            println!(
                "ran {} cells into {} (config {})",
                outcome.cells,
                outcome.run_dir.display(),
                &outcome.config_sha256[..12]
            );
            Ok(())
        }
        Cmd::Report { run } => {
            let rep = report(&run)?;
            let csv = to_csv(&rep);
            std::fs::write(run.join("report.csv"), &csv)?;
            print!("{}", to_table(&rep));
            println!("wrote {}", run.join("report.csv").display());
            Ok(())
        }
        Cmd::Audit {
            run,
            stages,
            ordering,
            seed_index,
            grid,
        } => {
            let args = InspectArgs {
                stages: parse_stages(stages)?,
                ordering,
                seed_index,
                grid_points: grid,
            };
            let written = audit_run(&run, &args)?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Cmd::Sweep {
            run,
            stages,
            ordering,
            seed_index,
            grid,
        } => {
            let args = InspectArgs {
                stages: parse_stages(stages)?,
                ordering,
                seed_index,
                grid_points: grid,
            };
            let path = sweep_run(&run, &args)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
