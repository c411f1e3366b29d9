//! Library half of the command-line front end: resolve a run configuration
//! against a built-in case, drive the solver, and emit plot-ready files.
//!
//! Outputs per run, under the chosen directory:
//! - `snapshots.csv` — one row per snapshot per node: tau, node index,
//!   physical time, then every solution component.
//! - `diagnostics.csv` — per-snapshot scalars: tau, J, J1, residual norm,
//!   tf, descent flag.
//! - `summary.json` — final scalars, the boundary specification, and timing.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use vem::builtins::{self, BenchmarkCase, CaseProblem};
use vem::cov::CovGains;
use vem::grid::{Profile, TimeGrid};
use vem::integrate::{
    evolve_ocp, evolve_variational, DiagnosticsRecord, EvolveOptions, Method, Termination,
};
use vem::problem::{BoundarySpec, TerminalTime};
use vem::zs::{terminal_defect, FlowState};
use vem::VemError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodArg {
    Rk45,
    Stiff,
}

/// Everything a `run` invocation can control. Unset fields fall back to the
/// case defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub case: String,
    pub n_points: Option<usize>,
    pub gain_k: Option<Vec<f64>>,
    pub gain_ktf: Option<f64>,
    pub method: Option<MethodArg>,
    pub rel_tol: Option<f64>,
    pub abs_tol: Option<f64>,
    pub tau_max: Option<f64>,
    pub residual_tol: Option<f64>,
    pub snapshot_every: Option<f64>,
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    UnknownCase(String),
    BadConfig(String),
    Output { path: PathBuf, source: std::io::Error },
    Solver(VemError),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownCase(name) => write!(
                f,
                "unknown case '{name}' (available: {})",
                builtins::names().join(", ")
            ),
            Self::BadConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Self::Output { path, source } => {
                write!(f, "cannot write output at {}: {source}", path.display())
            }
            Self::Solver(e) => write!(f, "solver failed: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<VemError> for CliError {
    fn from(e: VemError) -> Self {
        Self::Solver(e)
    }
}

/// Boundary information of the solved problem, embedded in the summary so
/// downstream tooling can recover the exact specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CaseBoundary {
    Variational {
        boundary: BoundarySpec,
        t0: f64,
        tf: f64,
    },
    Ocp {
        x0: Vec<f64>,
        terminal_time: TerminalTime,
        terminal_state: Vec<vem::problem::BoundaryCondition>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub case: String,
    pub n_points: usize,
    pub method: String,
    /// Size of the τ-IVP: every nodal value plus tf when free.
    pub flow_dimension: usize,
    pub termination: String,
    /// True when the optimality residual dropped below `residual_tol`.
    pub converged: bool,
    pub steps: usize,
    pub final_tau: f64,
    pub final_residual: f64,
    pub final_j: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_j1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_tf: Option<f64>,
    /// |tf − reference| when the case ships a reference terminal time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tf_error: Option<f64>,
    /// |H(tf) + φ_tf| at termination, free-horizon cases only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transversality_residual: Option<f64>,
    /// Max nodal error against the closed-form reference, when one exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_error_vs_reference: Option<f64>,
    pub max_step_rise: f64,
    pub descent_ok: bool,
    pub boundary: CaseBoundary,
    pub wall_time_s: f64,
}

/// Exit code of a finished run: 0 when the run completed its horizon or
/// converged, 2 when the step budget ran out first.
pub fn exit_code_for(summary: &RunSummary) -> i32 {
    if summary.termination == "max_steps" {
        2
    } else {
        0
    }
}

fn resolve_options(case: &BenchmarkCase, config: &RunConfig) -> Result<EvolveOptions, CliError> {
    let mut opts = case.default_options();
    if let Some(m) = config.method {
        opts.method = match m {
            MethodArg::Rk45 => Method::ExplicitRk45,
            MethodArg::Stiff => Method::ImplicitStiff,
        };
    }
    if let Some(v) = config.rel_tol {
        opts.rel_tol = v;
    }
    if let Some(v) = config.abs_tol {
        opts.abs_tol = v;
    }
    if let Some(v) = config.tau_max {
        opts.tau_max = v;
    }
    if let Some(v) = config.residual_tol {
        opts.residual_tol = v;
    }
    if let Some(v) = config.snapshot_every {
        opts.snapshot_every = v;
    }
    Ok(opts)
}

fn broadcast_gains(requested: &[f64], expected: usize) -> Result<Vec<f64>, CliError> {
    if requested.len() == 1 {
        Ok(vec![requested[0]; expected])
    } else if requested.len() == expected {
        Ok(requested.to_vec())
    } else {
        Err(CliError::BadConfig(format!(
            "--gain-k wants 1 or {expected} values, got {}",
            requested.len()
        )))
    }
}

/// Executes one run and writes the three output files.
pub fn run(config: &RunConfig) -> Result<RunSummary, CliError> {
    let case = builtins::by_name(&config.case)
        .ok_or_else(|| CliError::UnknownCase(config.case.clone()))?;
    let n = config.n_points.unwrap_or(case.default_n);
    let grid = case.grid(n)?;
    let opts = resolve_options(&case, config)?;
    let labels = case.component_labels();

    fs::create_dir_all(&config.out).map_err(|e| CliError::Output {
        path: config.out.clone(),
        source: e,
    })?;

    let started = Instant::now();
    let summary = match &case.problem {
        CaseProblem::Variational(p) => {
            let gains = match &config.gain_k {
                Some(k) => CovGains::new(
                    broadcast_gains(k, p.n())?,
                    vem::cov::CovVariant::Asymptotic,
                )?,
                None => case
                    .cov_gains()
                    .expect("variational case carries gains")
                    .clone(),
            };
            let initial = case
                .initial_variational(&grid)
                .expect("variational case carries a guess");
            let out = evolve_variational(p, &initial, &grid, &gains, &opts)?;
            write_profile_snapshots(&config.out, &grid, &labels, &out.snapshots)?;
            write_diagnostics(&config.out, &out.diagnostics)?;
            let max_error = case.max_error_profile(&out.state, &grid);
            RunSummary {
                case: case.name.to_string(),
                n_points: n,
                method: method_name(opts.method),
                flow_dimension: out.state.values().len(),
                termination: termination_name(out.termination),
                converged: out.termination == Termination::ResidualTol,
                steps: out.steps,
                final_tau: out.diagnostics.last().map(|r| r.tau).unwrap_or(0.0),
                final_residual: out
                    .diagnostics
                    .last()
                    .map(|r| r.residual_norm)
                    .unwrap_or(f64::NAN),
                final_j: out.diagnostics.last().map(|r| r.j).unwrap_or(f64::NAN),
                final_j1: None,
                final_tf: None,
                tf_error: None,
                transversality_residual: None,
                max_error_vs_reference: max_error,
                max_step_rise: out.max_step_rise,
                descent_ok: out.diagnostics.iter().all(|r| r.descent_ok),
                boundary: CaseBoundary::Variational {
                    boundary: p.boundary().clone(),
                    t0: p.t0(),
                    tf: p.tf(),
                },
                wall_time_s: started.elapsed().as_secs_f64(),
            }
        }
        CaseProblem::Ocp(p) => {
            let gains = match &config.gain_k {
                Some(k) => {
                    let ktf = config.gain_ktf.unwrap_or(1.0);
                    vem::zs::ZsGains::new(broadcast_gains(k, 2 * p.n() + p.m())?, ktf)?
                }
                None => {
                    let mut g = case
                        .zs_gains()
                        .expect("control case carries gains")
                        .clone();
                    if let Some(ktf) = config.gain_ktf {
                        g = vem::zs::ZsGains::new(g.k().to_vec(), ktf)?;
                    }
                    g
                }
            };
            let initial = case
                .initial_ocp(&grid)
                .expect("control case carries a guess");
            let out = evolve_ocp(p, &initial, &grid, &gains, &opts)?;
            write_flow_snapshots(&config.out, &grid, &labels, &out.snapshots)?;
            write_diagnostics(&config.out, &out.diagnostics)?;
            let max_error = case.max_error_flow(&out.state, &out.grid);
            let final_tf = out.state.tf;
            let transversality = if p.terminal_time().is_free() {
                Some(terminal_defect(p, &out.state, &out.grid)?.abs())
            } else {
                None
            };
            RunSummary {
                case: case.name.to_string(),
                n_points: n,
                method: method_name(opts.method),
                flow_dimension: out.state.flow_dimension(),
                termination: termination_name(out.termination),
                converged: out.termination == Termination::ResidualTol,
                steps: out.steps,
                final_tau: out.diagnostics.last().map(|r| r.tau).unwrap_or(0.0),
                final_residual: out
                    .diagnostics
                    .last()
                    .map(|r| r.residual_norm)
                    .unwrap_or(f64::NAN),
                final_j: out.diagnostics.last().map(|r| r.j).unwrap_or(f64::NAN),
                final_j1: out.diagnostics.last().and_then(|r| r.j1),
                final_tf,
                tf_error: match (final_tf, case.reference_tf) {
                    (Some(tf), Some(reference)) => Some((tf - reference).abs()),
                    _ => None,
                },
                transversality_residual: transversality,
                max_error_vs_reference: max_error,
                max_step_rise: out.max_step_rise,
                descent_ok: out.diagnostics.iter().all(|r| r.descent_ok),
                boundary: CaseBoundary::Ocp {
                    x0: p.x0().to_vec(),
                    terminal_time: p.terminal_time(),
                    terminal_state: p.terminal_state().to_vec(),
                },
                wall_time_s: started.elapsed().as_secs_f64(),
            }
        }
    };

    let path = config.out.join("summary.json");
    let json =
        serde_json::to_string_pretty(&summary).expect("summary serialization cannot fail");
    fs::write(&path, json + "\n").map_err(|e| CliError::Output { path, source: e })?;
    Ok(summary)
}

fn method_name(m: Method) -> String {
    match m {
        Method::ExplicitRk45 => "rk45".into(),
        Method::ImplicitStiff => "stiff".into(),
        Method::FixedStep { dtau } => format!("fixed({dtau})"),
    }
}

fn termination_name(t: Termination) -> String {
    match t {
        Termination::ResidualTol => "residual_tol".into(),
        Termination::TauMax => "tau_max".into(),
        Termination::MaxSteps => "max_steps".into(),
    }
}

fn create(path: &Path) -> Result<fs::File, CliError> {
    fs::File::create(path).map_err(|e| CliError::Output {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Output {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_profile_snapshots(
    dir: &Path,
    grid: &TimeGrid,
    labels: &[String],
    snapshots: &[(f64, Profile)],
) -> Result<(), CliError> {
    let path = dir.join("snapshots.csv");
    let mut f = std::io::BufWriter::new(create(&path)?);
    let mut do_write = || -> std::io::Result<()> {
        writeln!(f, "tau,node_index,t,{}", labels.join(","))?;
        for (tau, profile) in snapshots {
            for i in 0..profile.n_nodes() {
                write!(f, "{tau},{i},{}", grid.time_at(i))?;
                for c in 0..profile.dim() {
                    write!(f, ",{}", profile.value(i, c))?;
                }
                writeln!(f)?;
            }
        }
        f.flush()
    };
    do_write().map_err(|e| write_err(&path, e))
}

fn write_flow_snapshots(
    dir: &Path,
    grid: &TimeGrid,
    labels: &[String],
    snapshots: &[(f64, FlowState)],
) -> Result<(), CliError> {
    let path = dir.join("snapshots.csv");
    let mut f = std::io::BufWriter::new(create(&path)?);
    let mut do_write = || -> std::io::Result<()> {
        writeln!(f, "tau,node_index,t,{}", labels.join(","))?;
        for (tau, state) in snapshots {
            // Free-horizon snapshots carry their own tf; node times follow.
            let g = match state.tf {
                Some(tf) => grid.with_tf(tf).expect("snapshot tf stays above t0"),
                None => *grid,
            };
            for i in 0..state.n_nodes() {
                write!(f, "{tau},{i},{}", g.time_at(i))?;
                for c in 0..state.x.dim() {
                    write!(f, ",{}", state.x.value(i, c))?;
                }
                for c in 0..state.lam.dim() {
                    write!(f, ",{}", state.lam.value(i, c))?;
                }
                for c in 0..state.u.dim() {
                    write!(f, ",{}", state.u.value(i, c))?;
                }
                writeln!(f)?;
            }
        }
        f.flush()
    };
    do_write().map_err(|e| write_err(&path, e))
}

fn write_diagnostics(dir: &Path, records: &[DiagnosticsRecord]) -> Result<(), CliError> {
    let path = dir.join("diagnostics.csv");
    let mut f = std::io::BufWriter::new(create(&path)?);
    let mut do_write = || -> std::io::Result<()> {
        writeln!(f, "tau,J,J1,residual_norm,tf,descent_ok")?;
        for r in records {
            write!(f, "{},{},", r.tau, r.j)?;
            match r.j1 {
                Some(v) => write!(f, "{v}")?,
                None => {}
            }
            write!(f, ",{},", r.residual_norm)?;
            match r.tf {
                Some(v) => write!(f, "{v}")?,
                None => {}
            }
            writeln!(f, ",{}", r.descent_ok)?;
        }
        f.flush()
    };
    do_write().map_err(|e| write_err(&path, e))
}

/// Human-readable description of a built-in case.
pub fn describe(case_name: &str) -> Result<String, CliError> {
    let case = builtins::by_name(case_name)
        .ok_or_else(|| CliError::UnknownCase(case_name.to_string()))?;
    let mut out = String::new();
    let push = |out: &mut String, line: String| {
        out.push_str(&line);
        out.push('\n');
    };
    push(&mut out, format!("case: {}", case.name));
    match &case.problem {
        CaseProblem::Variational(p) => {
            push(&mut out, "kind: calculus of variations".into());
            push(&mut out, format!("n: {}", p.n()));
            push(
                &mut out,
                format!("horizon: [{}, {}] (fixed)", p.t0(), p.tf()),
            );
            for (c, (s, e)) in p
                .boundary()
                .start
                .iter()
                .zip(&p.boundary().end)
                .enumerate()
            {
                push(
                    &mut out,
                    format!("y{}: start {}, end {}", c + 1, bc_text(s), bc_text(e)),
                );
            }
            let dim = case.default_n * p.n();
            push(
                &mut out,
                format!(
                    "flow dimension at N={}: {} integrated values ({}*{} = {})",
                    case.default_n,
                    dim,
                    case.default_n,
                    p.n(),
                    dim
                ),
            );
        }
        CaseProblem::Ocp(p) => {
            push(&mut out, "kind: optimal control (Bolza)".into());
            push(&mut out, format!("n: {}, m: {}", p.n(), p.m()));
            match p.terminal_time() {
                TerminalTime::Fixed(tf) => {
                    push(&mut out, format!("horizon: [{}, {tf}] (fixed tf)", p.t0()))
                }
                TerminalTime::Free { guess } => push(
                    &mut out,
                    format!("horizon: t0 = {}, tf free (initial guess {guess})", p.t0()),
                ),
            }
            push(&mut out, format!("x0: {:?}", p.x0()));
            for (c, b) in p.terminal_state().iter().enumerate() {
                push(&mut out, format!("x{}(tf): {}", c + 1, bc_text(b)));
            }
            let per_node = 2 * p.n() + p.m();
            let dim = case.default_n * per_node + usize::from(p.terminal_time().is_free());
            let tf_note = if p.terminal_time().is_free() {
                " (plus the free terminal time)"
            } else {
                ""
            };
            push(
                &mut out,
                format!(
                    "flow dimension at N={}: {} integrated values ({}*{} = {}){}",
                    case.default_n,
                    dim,
                    case.default_n,
                    per_node,
                    case.default_n * per_node,
                    tf_note
                ),
            );
        }
    }
    push(
        &mut out,
        format!(
            "defaults: N = {}, method = {}, tau_max = {}",
            case.default_n,
            method_name(case.default_method),
            case.default_tau_max
        ),
    );
    push(
        &mut out,
        match (case.reference_at(0.0).is_some(), case.reference_tf) {
            (true, _) => "reference: closed-form solution available".to_string(),
            (false, Some(tf)) => format!("reference: optimal terminal time {tf}"),
            (false, None) => "reference: none".to_string(),
        },
    );
    Ok(out)
}

fn bc_text(b: &vem::problem::BoundaryCondition) -> String {
    match b {
        vem::problem::BoundaryCondition::Fixed(v) => format!("fixed at {v}"),
        vem::problem::BoundaryCondition::Free => "free".into(),
    }
}
