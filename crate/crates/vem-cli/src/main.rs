use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vem_cli::{describe, exit_code_for, run, MethodArg, RunConfig};

#[derive(Parser)]
#[command(
    name = "vem",
    about = "Variation-evolving solvers for variational and optimal control benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodFlag {
    Rk45,
    Stiff,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a built-in case and write snapshots, diagnostics, and a summary.
    Run {
        /// Case name (example1, example2, example3).
        #[arg(long)]
        case: String,
        /// Number of grid nodes (case default when omitted).
        #[arg(long)]
        n_points: Option<usize>,
        /// Flow gains: one value broadcast to all components, or the full
        /// comma-separated diagonal.
        #[arg(long, value_delimiter = ',')]
        gain_k: Option<Vec<f64>>,
        /// Terminal-time gain (free-horizon cases).
        #[arg(long)]
        gain_ktf: Option<f64>,
        /// Integration method.
        #[arg(long, value_enum)]
        method: Option<MethodFlag>,
        #[arg(long)]
        rel_tol: Option<f64>,
        #[arg(long)]
        abs_tol: Option<f64>,
        /// Virtual-time horizon.
        #[arg(long)]
        tau_max: Option<f64>,
        /// Early-termination threshold on the optimality residual.
        #[arg(long)]
        residual_tol: Option<f64>,
        /// τ interval between snapshots/diagnostics rows.
        #[arg(long)]
        snapshot_every: Option<f64>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the definition and defaults of a built-in case.
    Describe { case: String },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            case,
            n_points,
            gain_k,
            gain_ktf,
            method,
            rel_tol,
            abs_tol,
            tau_max,
            residual_tol,
            snapshot_every,
            out,
        } => {
            let config = RunConfig {
                case,
                n_points,
                gain_k,
                gain_ktf,
                method: method.map(|m| match m {
                    MethodFlag::Rk45 => MethodArg::Rk45,
                    MethodFlag::Stiff => MethodArg::Stiff,
                }),
                rel_tol,
                abs_tol,
                tau_max,
                residual_tol,
                snapshot_every,
                out,
            };
            match run(&config) {
                Ok(summary) => {
                    println!(
                        "{}: {} after {} steps at tau = {} (residual {:.3e})",
                        summary.case,
                        summary.termination,
                        summary.steps,
                        summary.final_tau,
                        summary.final_residual
                    );
                    if let Some(tf) = summary.final_tf {
                        println!("terminal time: {tf}");
                    }
                    if let Some(err) = summary.max_error_vs_reference {
                        println!("max error vs reference: {err:.3e}");
                    }
                    ExitCode::from(exit_code_for(&summary) as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Describe { case } => match describe(&case) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}
