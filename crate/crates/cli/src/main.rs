use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser};
use pszeros_cli::{run_with_workers, CliError, Scenario};

/// Runs partition-function zero scenarios and writes their results.
#[derive(Parser, Debug)]
#[command(name = "pszeros", version)]
struct Args {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Built-in scenario: zeros-ising, bijection-check, blume-capel, contour-check, residual-ising.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; does not change the results.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let scenario = match (&args.scenario, &args.preset) {
        (Some(p), None) => Scenario::load(p),
        (None, Some(name)) => Scenario::preset(name),
        (Some(_), Some(_)) => Err(CliError::Config("give either --scenario or --preset, not both".into())),
        (None, None) => {
            let _ = Args::command().print_help();
            return ExitCode::from(2);
        }
    };
    let result = scenario.and_then(|sc| {
        let seed = args.seed.unwrap_or(sc.seed);
        let workers = args
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        run_with_workers(&sc, &args.out, seed, workers)
    });
    match result {
        Ok(summary) => {
            for c in &summary.checks {
                println!("{} {}: {}", if c.pass { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            println!(
                "{}: {} files in {}, {} cap activations",
                summary.scenario,
                summary.files.len(),
                args.out.display(),
                summary.cap_activations
            );
            if summary.pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
