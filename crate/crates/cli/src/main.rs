use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use biload_cli::{parse_config, run, CliError, Command};

#[derive(Parser)]
#[command(name = "biload", about = "Forward, co-state and gradient solvers for biloaded control problems")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// Configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides [output] dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for directions, probes and random profiles; overrides [verify] seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Solve the forward system and write the state fields.
    Solve,
    /// Evaluate the reduced cost.
    Cost,
    /// Compare co-state, finite-difference and discrete-adjoint gradients.
    GradCheck,
    /// Projected gradient descent on the controls.
    Optimize,
    /// Summation-by-parts residuals under refinement.
    IbpDemo,
    /// Skew-adjointness of the periodic curve difference.
    CurveDemo,
    /// Observed convergence orders of a metric.
    Refine,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Command {
        match s {
            Sub::Solve => Command::Solve,
            Sub::Cost => Command::Cost,
            Sub::GradCheck => Command::GradCheck,
            Sub::Optimize => Command::Optimize,
            Sub::IbpDemo => Command::IbpDemo,
            Sub::CurveDemo => Command::CurveDemo,
            Sub::Refine => Command::Refine,
        }
    }
}

fn execute(cli: &Cli) -> Result<i32, CliError> {
    let cmd = Command::from(cli.command);
    let mut spec = match &cli.config {
        Some(path) => Some(parse_config(&std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?)?),
        None => None,
    };
    if let (Some(s), Some(seed)) = (spec.as_mut(), cli.seed) {
        s.verify.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| spec.as_ref().map(|s| s.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    let seed = cli.seed.or_else(|| spec.as_ref().map(|s| s.verify.seed)).unwrap_or(0);
    let outcome = run(spec.as_ref(), cmd, &out, seed)?;
    for l in &outcome.lines {
        println!("{l}");
    }
    Ok(outcome.exit_code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{}", e.machine_line());
            ExitCode::from(2)
        }
    }
}
