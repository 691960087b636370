use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use olala_cli::config::schema;
use olala_cli::{parse_config, run_checks, run_experiment, run_sweep, CliError, Overrides, SEED_ENV};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Verb {
    /// One federated experiment: rounds.csv, lattices.jsonl, model.bin.
    Run,
    /// All theory checks: checks.json; exit status 1 if any check fails.
    Checks,
    /// Every (quantizer, rate) pair: sweep.csv plus per-entry files.
    Sweep,
    /// Print the configuration keys and exit.
    Keys,
}

/// Adaptive lattice quantization for federated learning.
#[derive(Debug, Parser)]
#[command(name = "olala-sim", version)]
struct Args {
    verb: Verb,
    /// Extra `key=value` overrides, applied after --set.
    assignments: Vec<String>,
    /// Flat key=value config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed; beats every other source.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    parallel: Option<usize>,
}

fn execute(args: Args) -> Result<ExitCode, CliError> {
    if args.verb == Verb::Keys {
        print!("{}", schema());
        return Ok(ExitCode::SUCCESS);
    }
    let mut o = Overrides::default();
    for s in args.set.iter().chain(&args.assignments) {
        o.push_assignment(s)?;
    }
    if let Some(d) = &args.out {
        o.push("out", d.to_string_lossy());
    }
    if let Some(p) = args.parallel {
        o.push("parallel", p.to_string());
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = parse_config(args.config.as_deref(), &o, env_seed.as_deref(), args.seed)?;
    env_logger::Builder::new()
        .filter_level(cfg.verbosity)
        .parse_default_env()
        .init();
    match args.verb {
        Verb::Run => {
            let s = run_experiment(&cfg)?;
            println!("final accuracy {:.4}", s.final_accuracy);
            for f in s.files {
                println!("wrote {}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Verb::Checks => {
            let (reports, passed) = run_checks(&cfg)?;
            for r in &reports {
                let tag = match (r.pass, r.negative_control) {
                    (true, _) => "pass",
                    (false, true) => "fail (negative control, expected)",
                    (false, false) => "FAIL",
                };
                println!("{:<44} {tag}", r.name);
            }
            println!("wrote {}", cfg.out.join("checks.json").display());
            Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Verb::Sweep => {
            let rows = run_sweep(&cfg)?;
            println!("{:<16} {:>5} {:>10} {:>10} {:>10}", "quantizer", "R", "accuracy", "std", "snr_db");
            for r in rows {
                println!(
                    "{:<16} {:>5} {:>10.4} {:>10.4} {:>10.2}",
                    r.quantizer, r.rate, r.accuracy_mean, r.accuracy_std, r.snr_db_mean
                );
            }
            println!("wrote {}", cfg.out.join("sweep.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Verb::Keys => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match execute(Args::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("olala-sim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
