mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowik::odeint::SolverConfig;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_ABORT: u8 = 3;
pub const EXIT_DISCONTINUOUS: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "flowik",
    version,
    about = "Inverse kinematics with conditional continuous normalizing flows"
)]
struct Cli {
    /// Worker threads for batch evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a flow model; writes model.json, metrics.csv and manifest.json into --out.
    Train(TrainArgs),
    /// Print error statistics of a model on freshly sampled reachable targets.
    Evaluate(EvaluateArgs),
    /// Sample IK solutions for every row of a target CSV.
    Solve(SolveArgs),
    /// Convert a Cartesian path CSV into a continuous joint path.
    Path(PathArgs),
    /// Accuracy and throughput report, optionally against the DLS baseline.
    Bench(BenchArgs),
    /// Print the end-effector poses of a joint configuration.
    Fk(FkArgs),
    /// Write a CSV of reachable targets sampled within the joint limits.
    Targets(TargetsArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub robot: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many total iterations, keeping the full schedule.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub robot: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub targets: usize,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the checkpoint's inference solver, e.g. `rk4:32` or `dopri5:1e-5:1e-5`.
    #[arg(long, value_parser = parse_solver)]
    pub solver: Option<SolverConfig>,
    /// Also write the summary JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub robot: PathBuf,
    /// Target CSV: `px,py,pz,qw,qx,qy,qz` per end effector.
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_solver)]
    pub solver: Option<SolverConfig>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PathArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub robot: PathBuf,
    /// Waypoint CSV in the target format.
    #[arg(long)]
    pub path: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub retries: usize,
    /// Largest allowed joint change between waypoints (rad or m).
    #[arg(long, default_value_t = flowik::iksolver::DEFAULT_STEP_THRESHOLD)]
    pub step_threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_solver)]
    pub solver: Option<SolverConfig>,
    /// Directory for path_report.json, path_joints.csv and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, required_unless_present = "architecture", requires = "robot")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub robot: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub targets: usize,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_solver)]
    pub solver: Option<SolverConfig>,
    /// Also time damped least squares from random initial guesses on the same targets.
    #[arg(long)]
    pub baseline: bool,
    /// Report only the parameter count of `STATE:CONDITION:W1,W2,...`.
    #[arg(long, conflicts_with = "model")]
    pub architecture: Option<String>,
    /// Also write the report as `metric,value` CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FkArgs {
    #[arg(long)]
    pub robot: PathBuf,
    /// Comma-separated joint values.
    #[arg(long, allow_hyphen_values = true)]
    pub q: String,
    /// Print shortest round-trip values instead of 9 significant digits.
    #[arg(long)]
    pub full: bool,
}

#[derive(Args, Debug)]
pub struct TargetsArgs {
    #[arg(long)]
    pub robot: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_solver(text: &str) -> Result<SolverConfig, String> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number"));
    let cfg = match parts.as_slice() {
        ["rk4", steps] => SolverConfig::rk4(steps.parse().map_err(|_| format!("`{steps}` is not a step count"))?),
        ["dopri5"] => SolverConfig::inference_default(),
        ["dopri5", tol] => SolverConfig::dopri5(num(tol)?, num(tol)?),
        ["dopri5", rel, abs] => SolverConfig::dopri5(num(rel)?, num(abs)?),
        _ => return Err("expected `rk4:STEPS` or `dopri5[:REL[:ABS]]`".into()),
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Maps an error to the exit code contract: 3 for an aborted training run,
/// 1 for numerical failures, 2 for everything caused by inputs.
fn exit_code(err: &anyhow::Error) -> u8 {
    use flowik::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::TrainingAborted { .. } => EXIT_ABORT,
                E::Ode(_) | E::NonFiniteSample { .. } => 1,
                _ => EXIT_INPUT,
            };
        }
    }
    EXIT_INPUT
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Solve(a) => commands::solve(&a),
        Command::Path(a) => commands::path(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Fk(a) => commands::fk(&a),
        Command::Targets(a) => commands::targets(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowik::odeint::Method;

    #[test]
    fn solver_specs_parse() {
        assert_eq!(parse_solver("rk4:16").unwrap(), SolverConfig::rk4(16));
        assert_eq!(parse_solver("dopri5").unwrap(), SolverConfig::inference_default());
        let d = parse_solver("dopri5:1e-6:1e-7").unwrap();
        assert_eq!(d.method, Method::Dopri5);
        assert_eq!((d.rel_tol, d.abs_tol), (1e-6, 1e-7));
        assert!(parse_solver("rk4:0").is_err());
        assert!(parse_solver("euler:3").is_err());
    }

    #[test]
    fn abort_maps_to_three_and_inputs_to_two() {
        let abort = anyhow::Error::new(flowik::Error::TrainingAborted {
            iteration: 1,
            skips: 3,
            reason: "nan".into(),
        });
        assert_eq!(exit_code(&abort), EXIT_ABORT);
        let csv = anyhow::Error::new(flowik::Error::Csv {
            row: 2,
            reason: "x".into(),
        })
        .context("loading");
        assert_eq!(exit_code(&csv), EXIT_INPUT);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
