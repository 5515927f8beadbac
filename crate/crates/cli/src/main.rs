use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use slicesim::runner::{run_source, sweep, RunnerError};
use slicesim::scenario::{ScenarioError, ScenarioSource};
use slicesim::world::RunOptions;

#[derive(Parser)]
#[command(name = "slicesim", version, about = "Discrete-event simulator of sliced 5G access and core networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a scenario file and print diagnostics.
    Validate { file: PathBuf },
    /// Run one scenario and write metrics and reports.
    Run {
        file: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated duration in ms, overriding the scenario.
        #[arg(long)]
        duration: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Enable runtime invariant checks and recompute the report from the CSV.
        #[arg(long)]
        audit: bool,
    },
    /// Run one scenario per value of a parameter, each into its own subdirectory.
    Sweep {
        file: PathBuf,
        /// Dotted path into the scenario, e.g. `slices[0].pool_weight` or `flows[*].local_fraction`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 1, allow_hyphen_values = true)]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        audit: bool,
    },
}

fn print_scenario_error(e: &ScenarioError) {
    match e {
        ScenarioError::Invalid(diags) => {
            for d in diags {
                eprintln!("error: {d}");
            }
            eprintln!("{} problem(s) found", diags.len());
        }
        other => eprintln!("error: {other}"),
    }
}

fn report(e: &RunnerError) {
    match e {
        RunnerError::Scenario(s) => print_scenario_error(s),
        other => eprintln!("error: {other}"),
    }
}

fn options(seed: Option<u64>, duration: Option<u64>, audit: bool) -> RunOptions {
    RunOptions {
        seed,
        duration_ms: duration,
        audit: audit.then_some(true),
    }
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Validate { file } => match ScenarioSource::read(&file).and_then(|s| s.scenario()) {
            Ok(sc) => {
                println!(
                    "ok: {} ({} slices, {} nodes, {} flows)",
                    sc.name,
                    sc.slices.len(),
                    sc.nodes.len(),
                    sc.flows.len()
                );
                Ok(ExitCode::SUCCESS)
            }
            Err(e) => {
                print_scenario_error(&e);
                Ok(ExitCode::from(2))
            }
        },
        Cmd::Run {
            file,
            seed,
            duration,
            out,
            audit,
        } => {
            let res = ScenarioSource::read(&file)
                .map_err(RunnerError::from)
                .and_then(|src| run_source(&src, options(seed, duration, audit), &out, audit));
            match res {
                Ok(a) => {
                    println!(
                        "{}: {} events, {} metric rows, written to {}",
                        a.output.scenario,
                        a.output.events,
                        a.output.records.len(),
                        a.dir.display()
                    );
                    if audit {
                        println!(
                            "audit ok: {} scheduled subframes checked, report matches metrics.csv",
                            a.output.audit.subframes_checked
                        );
                    }
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    report(&e);
                    Ok(ExitCode::from(1))
                }
            }
        }
        Cmd::Sweep {
            file,
            param,
            values,
            seed,
            duration,
            out,
            audit,
        } => {
            let values: Vec<String> = values.into_iter().filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                println!("no values given, nothing to run");
                return Ok(ExitCode::SUCCESS);
            }
            let res = ScenarioSource::read(&file)
                .map_err(RunnerError::from)
                .and_then(|src| sweep(&src, &param, &values, options(seed, duration, audit), &out, audit));
            match res {
                Ok(runs) => {
                    let mut failed = false;
                    for (v, r) in runs {
                        match r {
                            Ok(a) => println!("{param}={v}: {}", a.dir.display()),
                            Err(e) => {
                                failed = true;
                                eprint!("{param}={v}: ");
                                report(&e);
                            }
                        }
                    }
                    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
                }
                Err(e) => {
                    report(&e);
                    Ok(ExitCode::from(2))
                }
            }
        }
    }
}
