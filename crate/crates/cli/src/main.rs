//! `rensynth`: synthesize, certify, simulate, train, and identify.
//!
//! Exit statuses: 0 on success, 2 when inputs fail to parse (including
//! usage errors), 3 when a feasibility program has no solution, 4 when the
//! numerical solver breaks down, and 5 when a certificate check fails
//! (envelope or inequality violation).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ren_synth::error::Error;

use ren_synth_cli::commands;

const EXIT_PARSE: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_SOLVER: u8 = 4;
const EXIT_CERTIFICATE: u8 = 5;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Parse(_)
        | Error::Io(_)
        | Error::Invalid(_)
        | Error::DimensionMismatch(_) => EXIT_PARSE,
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        Error::SolverFailure(_)
        | Error::SingularMatrix(_)
        | Error::EquilibriumDiverged { .. } => EXIT_SOLVER,
        Error::CertificateViolation { .. } | Error::EnvelopeViolation { .. } => EXIT_CERTIFICATE,
    }
}

#[derive(Parser)]
#[command(
    name = "rensynth",
    version,
    about = "Recurrent-equilibrium-network controller synthesis with stability certificates"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Project lifted parameters onto the stabilizing set and recover a
    /// certified controller.
    Project(ProjectCli),
    /// Search for a stability certificate for a fixed plant/controller pair.
    Certify(CertifyCli),
    /// Roll out the closed loop and optionally check the decay envelope.
    Simulate(SimulateCli),
    /// Run projected policy-gradient training from a config file.
    Train(TrainCli),
    /// Fit an implicit neural plant model to transition data.
    Sysid(SysidCli),
}

#[derive(Args)]
struct ProjectCli {
    /// Plant artifact (any stored kind).
    #[arg(long)]
    plant: PathBuf,
    /// Lifted-parameter artifact to project.
    #[arg(long, conflicts_with = "sample_seed")]
    theta: Option<PathBuf>,
    /// Draw a random target and project it instead of reading --theta.
    #[arg(long)]
    sample_seed: Option<u64>,
    /// Certified decay rate in (0, 1).
    #[arg(long)]
    rho: f64,
    /// Feasibility strictness (margin the projected point must clear).
    #[arg(long)]
    eps: Option<f64>,
    /// Controller nonlinearity channels (only with --sample-seed).
    #[arg(long, default_value_t = 2)]
    n_phi: usize,
    /// Controller activation: tanh, relu, leaky_relu, v_minus_sin.
    #[arg(long, default_value = "tanh")]
    activation: String,
    /// Slope parameter for leaky_relu.
    #[arg(long)]
    activation_param: Option<f64>,
    /// Fixed plant-side multipliers, comma separated (default: all ones).
    #[arg(long)]
    lambda_delta: Option<String>,
    /// Interior-point tolerance.
    #[arg(long, default_value_t = 1e-9)]
    solver_tol: f64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CertifyCli {
    #[arg(long)]
    plant: PathBuf,
    #[arg(long)]
    controller: PathBuf,
    /// Decay rate to certify.
    #[arg(long)]
    rho: f64,
    /// Strict-feasibility slack on the inequality.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 1e-9)]
    solver_tol: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateCli {
    #[arg(long)]
    plant: PathBuf,
    #[arg(long)]
    controller: PathBuf,
    /// Certificate to check the decay envelope against.
    #[arg(long)]
    certificate: Option<PathBuf>,
    /// Initial plant state, comma separated; repeatable.
    #[arg(long)]
    x0: Vec<String>,
    /// Also sample an N-by-N grid of initial states (two-state plants).
    #[arg(long)]
    grid: Option<usize>,
    /// Grid box as "lo,hi;lo,hi" (default: -pi,pi;-8,8).
    #[arg(long)]
    x0_box: Option<String>,
    /// Number of steps to simulate.
    #[arg(long, default_value_t = 500)]
    horizon: usize,
    /// Equilibrium solve tolerance.
    #[arg(long, default_value_t = 1e-10)]
    solver_tol: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCli {
    /// Training configuration file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's decay rate.
    #[arg(long)]
    rho: Option<f64>,
    /// Override the config's feasibility strictness.
    #[arg(long)]
    eps: Option<f64>,
    /// Override the config's rollout horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Override the config's iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Override the gradient mode: analytic or finite-difference.
    #[arg(long)]
    grad_mode: Option<String>,
}

#[derive(Args)]
struct SysidCli {
    /// Transition dataset CSV (x, u, x_next columns).
    #[arg(long)]
    data: PathBuf,
    /// Identification configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's shuffling seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn run(cli: Cli) -> ren_synth::Result<()> {
    match cli.cmd {
        Cmd::Project(a) => commands::cmd_project(&commands::ProjectArgs {
            plant: a.plant,
            theta: a.theta,
            sample_seed: a.sample_seed,
            rho: a.rho,
            eps: a.eps,
            n_phi: a.n_phi,
            activation: a.activation,
            activation_param: a.activation_param,
            lambda_delta: a.lambda_delta,
            solver_tol: a.solver_tol,
            out: a.out,
        }),
        Cmd::Certify(a) => commands::cmd_certify(&commands::CertifyArgs {
            plant: a.plant,
            controller: a.controller,
            rho: a.rho,
            eps: a.eps,
            solver_tol: a.solver_tol,
            out: a.out,
        }),
        Cmd::Simulate(a) => commands::cmd_simulate(&commands::SimulateArgs {
            plant: a.plant,
            controller: a.controller,
            certificate: a.certificate,
            x0: a.x0,
            grid: a.grid,
            x0_box: a.x0_box,
            horizon: a.horizon,
            solver_tol: a.solver_tol,
            out: a.out,
        }),
        Cmd::Train(a) => commands::cmd_train(&commands::TrainArgs {
            config: a.config,
            out: a.out,
            seed: a.seed,
            rho: a.rho,
            eps: a.eps,
            horizon: a.horizon,
            iterations: a.iterations,
            grad_mode: a.grad_mode,
        }),
        Cmd::Sysid(a) => commands::cmd_sysid(&commands::SysidArgs {
            data: a.data,
            config: a.config,
            seed: a.seed,
            out: a.out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
