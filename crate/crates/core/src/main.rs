use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dssfn::experiment::{run, validate_config, ExperimentSpec, Mode};
use dssfn::Error;

/// Decentralized SSFN training with consensus ADMM.
///
/// Exit codes: 0 success, 1 invalid configuration, 2 failed verdict,
/// 3 runtime abort.
#[derive(Parser)]
#[command(name = "dssfn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the config's mode (centralized or decentralized).
    Train(RunArgs),
    /// Train both ways and compare per-layer solutions.
    Equivalence(RunArgs),
    /// Decentralized training over a range of circular-topology degrees.
    SweepDegree(RunArgs),
    /// Check a config and list every problem found.
    Validate(SpecArgs),
}

#[derive(Args)]
struct SpecArgs {
    /// Flat TOML config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Comma-separated seed list, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// `key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Output directory.
    #[arg(short, long, default_value = "runs/latest")]
    out: PathBuf,
}

fn load(args: &SpecArgs, forced: Option<Mode>) -> Result<ExperimentSpec, ExitCode> {
    let mut sets = args.sets.clone();
    if let Some(mode) = forced {
        sets.push(format!("mode=\"{}\"", mode.name()));
    }
    match ExperimentSpec::load(args.config.as_deref(), args.seeds.as_deref(), &sets) {
        Ok(spec) => Ok(spec),
        Err(e) => {
            eprintln!("{e}");
            Err(ExitCode::from(if matches!(e, Error::Config(_)) {
                1
            } else {
                3
            }))
        }
    }
}

fn execute(args: &RunArgs, forced: Option<Mode>) -> ExitCode {
    let spec = match load(&args.spec, forced) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if forced.is_none() && !matches!(spec.mode, Mode::Centralized | Mode::Decentralized) {
        eprintln!(
            "mode: {:?} runs through the equivalence or sweep-degree subcommand",
            spec.mode.name()
        );
        return ExitCode::from(1);
    }
    match run(&spec, &args.out) {
        Ok(report) => {
            println!(
                "wrote {} (config {})",
                args.out.display(),
                &report.config_hash[..12]
            );
            for row in &report.rows {
                println!(
                    "{:>13} seed {:<4} degree {:<4} train {:>7.3}%  test {:>8}  error {:>8.2} dB  rounds {}",
                    row.mode.name(),
                    row.seed,
                    row.degree.map_or("-".to_string(), |d| d.to_string()),
                    row.train_accuracy,
                    row.test_accuracy.map_or("-".to_string(), |a| format!("{a:.3}%")),
                    row.train_error_db,
                    row.consensus_rounds
                );
            }
            match report.verdict {
                Some(false) => {
                    println!("equivalence verdict: fail");
                    ExitCode::from(2)
                }
                Some(true) => {
                    println!("equivalence verdict: pass");
                    ExitCode::SUCCESS
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("aborted: {e}");
            ExitCode::from(3)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(a) => execute(a, None),
        Command::Equivalence(a) => execute(a, Some(Mode::EquivalenceCheck)),
        Command::SweepDegree(a) => execute(a, Some(Mode::DegreeSweep)),
        Command::Validate(a) => {
            let spec = match load(a, None) {
                Ok(s) => s,
                Err(code) => return code,
            };
            let diags = validate_config(&spec);
            if diags.is_empty() {
                println!("ok (config {})", &spec.config_hash()[..12]);
                ExitCode::SUCCESS
            } else {
                for d in &diags {
                    println!("{d}");
                }
                ExitCode::from(1)
            }
        }
    }
}
