use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use consensus_sa::config::ExperimentConfig;
use consensus_sa::experiment::{self, RunOptions};
use consensus_sa::Error;

#[derive(Parser, Debug)]
#[command(name = "consensus-sa", version, about = "Distributed stochastic approximation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check every modelling assumption the config depends on.
    Validate(Flags),
    /// Run replicas and write a trajectory of replica 0.
    Simulate(Flags),
    /// Compare per-epoch tracking error with its bound.
    Track(Flags),
    /// Estimate the trapping probability and compare with the theoretical bound.
    Trap(Flags),
    /// Tabulate the theoretical bound over an n0 sweep.
    Bound(Flags),
}

#[derive(Args, Debug)]
struct Flags {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Worker threads (default: machine parallelism).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

impl Flags {
    fn options(&self) -> RunOptions {
        RunOptions {
            out: self.out.clone(),
            seed: self.seed,
            replicas: self.replicas,
            horizon: self.horizon,
        }
    }
}

/// Exit code 1 for problems with the inputs, 2 for failures while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::NotSquare { .. }
        | Error::Empty
        | Error::NotStochastic { .. }
        | Error::Reducible { .. }
        | Error::SpectralViolation { .. }
        | Error::Inadmissible(_)
        | Error::InvalidProblem(_)
        | Error::NonPositiveMargin(_)
        | Error::DimensionMismatch(_) => 1,
        _ => 2,
    }
}

fn run(command: &Command) -> Result<bool, Error> {
    let flags = match command {
        Command::Validate(f)
        | Command::Simulate(f)
        | Command::Track(f)
        | Command::Trap(f)
        | Command::Bound(f) => f,
    };
    if let Some(w) = flags.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Error::Config(format!("workers: {e}")))?;
    }
    let cfg = ExperimentConfig::load(&flags.config)?;
    let opts = flags.options();
    match command {
        Command::Validate(_) => {
            let report = experiment::cmd_validate(&cfg);
            print!("{}", report.render());
            Ok(report.all_pass())
        }
        Command::Simulate(_) => {
            let s = experiment::cmd_simulate(&cfg, &opts)?;
            println!(
                "replicas {}  bounded {}  final disagreement <= {:e}: {}",
                s.replicas, s.bounded, s.consensus_tolerance, s.below_tolerance
            );
            Ok(true)
        }
        Command::Track(_) => {
            let s = experiment::cmd_track(&cfg, &opts)?;
            println!(
                "replicas {}  epochs {}  max rho {:.6e}  violations {} ({} past burn-in epoch {})",
                s.replicas,
                s.epochs_checked,
                s.max_rho,
                s.violations,
                s.violations_past_burn_in,
                s.burn_in_epoch
                    .map_or_else(|| "none".to_string(), |k| k.to_string())
            );
            Ok(true)
        }
        Command::Trap(_) => {
            let r = experiment::cmd_trap(&cfg, &opts)?;
            println!(
                "empirical {:.6} [{:.6}, {:.6}]  theoretical {:.6e} ({:?}{})  conditioned {}/{}",
                r.empirical_frequency,
                r.ci_low,
                r.ci_high,
                r.theoretical_bound,
                r.branch,
                if r.vacuous { ", vacuous" } else { "" },
                r.conditioned,
                r.replicas_total
            );
            Ok(true)
        }
        Command::Bound(_) => {
            let rows = experiment::cmd_bound(&cfg, &opts)?;
            for r in &rows {
                println!(
                    "n0 {:>8}  delta~ {:.6e}  {:?}  bound {:.6e}{}",
                    r.n0,
                    r.delta_tilde,
                    r.branch,
                    r.bound,
                    if r.vacuous { "  (vacuous)" } else { "" }
                );
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
