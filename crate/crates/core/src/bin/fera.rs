use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fera_sim::harness::{self, ExperimentConfig, SweepAxis};

#[derive(Parser)]
#[command(name = "fera", about = "Federated backdoor-detection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the grid spanned by one or more `--axis name=v1,v2,...`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "axis", required = true)]
        axes: Vec<SweepAxis>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the fast metric path with the slow oracle on a smoke run.
    OracleCheck {
        /// Defaults to the desk benchmark.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        rounds: usize,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("fera-out"))
}

fn run(cli: Cli) -> fera_sim::Result<bool> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(&cfg, out);
            let summary = harness::run_to_dir(&cfg, &dir)?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
            eprintln!("wrote {}", dir.display());
            Ok(true)
        }
        Command::Sweep { config, axes, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(&cfg, out);
            for (cell, s) in harness::run_sweep(&cfg, &axes, &dir)? {
                println!(
                    "{}\tfinal_ma={:.4}\tfinal_ba={:.4}\tprecision={:?}\ttpr={:?}\tfpr={:?}",
                    cell.label, s.final_ma, s.final_ba, s.mean_precision, s.mean_tpr, s.mean_fpr
                );
            }
            Ok(true)
        }
        Command::OracleCheck {
            config,
            rounds,
            tolerance,
        } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::desk_benchmark(0),
            };
            let reports = harness::oracle_check(&cfg, rounds)?;
            let mut ok = true;
            for (t, r) in reports.iter().enumerate() {
                let worst = r.max();
                let pass = worst <= tolerance;
                ok &= pass;
                println!("round {t:3}  max rel err {worst:.3e}  {}", if pass { "ok" } else { "FAIL" });
            }
            println!("{}", if ok { "oracle-check passed" } else { "oracle-check FAILED" });
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
