//! Variation-evolving solvers for unconstrained calculus-of-variations
//! problems and indirect-form optimal control problems.
//!
//! The idea: instead of attacking the stationarity conditions as a boundary
//! value problem, attach a virtual evolution parameter τ to the candidate
//! solution and integrate an initial value problem in τ whose equilibrium is
//! the extremal. The governing functional acts as a Lyapunov function and
//! decreases monotonically along the flow, which the integration loop
//! verifies at every accepted step.
//!
//! The crate is organized around the pipeline:
//!
//! - [`grid`]: uniform time grids, second-order difference operators, and
//!   trapezoid quadrature, with a live terminal-time handle for free-horizon
//!   problems.
//! - [`problem`]: problem definitions with derivative bundles
//!   ([`VariationalProblem`], [`OcpProblem`]) and finite-difference
//!   verification of user-supplied partials.
//! - [`cov`]: the variation flow for calculus-of-variations problems
//!   (Euler–Lagrange residual descent, asymptotic and signed variants).
//! - [`zs`]: the flow for optimal control problems via the equivalent
//!   sum-of-squares functional over (x, λ, u), including every terminal
//!   boundary variant and the free-terminal-time rate.
//! - [`integrate`]: adaptive explicit and stiff implicit τ-steppers plus the
//!   [`evolve_variational`]/[`evolve_ocp`] drive loops with descent
//!   monitoring, snapshots, and diagnostics.
//! - [`builtins`]: the three shipped benchmark cases with analytic
//!   references.

pub mod builtins;
pub mod cov;
pub mod error;
pub mod fd;
pub mod grid;
pub mod integrate;
pub mod linalg;
pub mod problem;
pub mod zs;

pub use error::{Result, VemError};
pub use grid::{diff1, diff2, trapezoid, Profile, TimeGrid};
pub use integrate::{
    evolve_ocp, evolve_variational, DiagnosticsRecord, EvolveOptions, EvolveOutcome, Method,
    Termination,
};
pub use problem::{
    BoundaryCondition, BoundarySpec, OcpProblem, OcpSample, TerminalTime, VariationalProblem,
    VariationalSample,
};
pub use zs::FlowState;
