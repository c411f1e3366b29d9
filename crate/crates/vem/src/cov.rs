//! Variation flow for unconstrained calculus-of-variations problems.
//!
//! The candidate profile descends the functional along the virtual time τ:
//! interior nodes move against the Euler–Lagrange residual, endpoint nodes
//! either stay pinned (prescribed boundary values) or follow the natural
//! boundary conditions. A signed variant trades the asymptotic approach for
//! finite-time convergence at the price of chattering.

use crate::error::{Result, VemError};
use crate::grid::{diff1, trapezoid, Profile, TimeGrid};
use crate::problem::{BoundaryCondition, VariationalProblem};

/// Flow variant: smooth descent or the signed (finite-time) rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovVariant {
    Asymptotic,
    /// sign(·) applied to residuals; `epsilon > 0` smooths it to tanh(·/ε)
    /// so adaptive steppers are not stalled by chattering.
    SignFiniteTime { epsilon: f64 },
}

/// Per-component gains of the variation flow (diagonal K).
#[derive(Debug, Clone, PartialEq)]
pub struct CovGains {
    k: Vec<f64>,
    variant: CovVariant,
}

impl CovGains {
    pub fn new(k: Vec<f64>, variant: CovVariant) -> Result<Self> {
        if k.is_empty() || k.iter().any(|v| !(*v > 0.0)) {
            return Err(VemError::Usage(
                "variation gains must all be positive".into(),
            ));
        }
        if let CovVariant::SignFiniteTime { epsilon } = variant {
            if !(epsilon >= 0.0) {
                return Err(VemError::Usage("sign smoothing must be >= 0".into()));
            }
        }
        Ok(Self { k, variant })
    }

    pub fn asymptotic(k: Vec<f64>) -> Result<Self> {
        Self::new(k, CovVariant::Asymptotic)
    }

    pub fn uniform(n: usize, k: f64) -> Result<Self> {
        Self::new(vec![k; n], CovVariant::Asymptotic)
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }

    pub fn variant(&self) -> CovVariant {
        self.variant
    }

    /// Applies the variant's shaping to one residual entry.
    fn shape(&self, a: f64) -> f64 {
        match self.variant {
            CovVariant::Asymptotic => a,
            CovVariant::SignFiniteTime { epsilon } => {
                if epsilon > 0.0 {
                    (a / epsilon).tanh()
                } else if a == 0.0 {
                    0.0
                } else {
                    a.signum()
                }
            }
        }
    }
}

fn check_problem_shape(p: &VariationalProblem, y: &Profile, grid: &TimeGrid) -> Result<()> {
    if y.dim() != p.n() {
        return Err(VemError::Dimension {
            context: "variational profile dimension".into(),
            expected: p.n(),
            got: y.dim(),
        });
    }
    if y.n_nodes() != grid.n_nodes() {
        return Err(VemError::Dimension {
            context: "variational profile nodes".into(),
            expected: grid.n_nodes(),
            got: y.n_nodes(),
        });
    }
    Ok(())
}

fn eval_checked(
    vals: Vec<f64>,
    expected: usize,
    what: &str,
    node: usize,
) -> Result<Vec<f64>> {
    if vals.len() != expected {
        return Err(VemError::Dimension {
            context: format!("{what} output"),
            expected,
            got: vals.len(),
        });
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(VemError::Evaluation {
            context: what.to_string(),
            node: Some(node),
            tau: None,
        });
    }
    Ok(vals)
}

/// The residual F_y − d/dt(F_ydot) at every node, with the time derivative
/// taken by differencing the nodal samples of F_ydot.
pub fn euler_lagrange_residual(
    p: &VariationalProblem,
    y: &Profile,
    grid: &TimeGrid,
) -> Result<Profile> {
    let (residual, _) = el_parts(p, y, grid)?;
    Ok(residual)
}

/// Residual profile together with the F_ydot samples (needed again for the
/// natural boundary rates).
fn el_parts(
    p: &VariationalProblem,
    y: &Profile,
    grid: &TimeGrid,
) -> Result<(Profile, Profile)> {
    check_problem_shape(p, y, grid)?;
    let n = p.n();
    let nn = grid.n_nodes();
    let ydot = diff1(grid, y)?;

    let mut g = Profile::zeros("F_ydot", n, nn);
    for i in 0..nn {
        let t = grid.time_at(i);
        let vals = eval_checked(p.eval_f_ydot(y.node(i), ydot.node(i), t), n, "F_ydot", i)?;
        g.node_mut(i).copy_from_slice(&vals);
    }
    let dg = diff1(grid, &g)?;

    let mut res = Profile::zeros("el_residual", n, nn);
    for i in 0..nn {
        let t = grid.time_at(i);
        let fy = eval_checked(p.eval_f_y(y.node(i), ydot.node(i), t), n, "F_y", i)?;
        for c in 0..n {
            res.set(i, c, fy[c] - dg.value(i, c));
        }
    }
    Ok((res, g))
}

/// Full variation rate of the profile: −K·residual at interior nodes (signed
/// variant applies sign(·)/tanh(·/ε) first), zero at prescribed endpoint
/// components, ±K·F_ydot at free endpoint components.
pub fn cov_rhs(
    p: &VariationalProblem,
    y: &Profile,
    grid: &TimeGrid,
    gains: &CovGains,
) -> Result<Profile> {
    if gains.k.len() != p.n() {
        return Err(VemError::Dimension {
            context: "variation gains".into(),
            expected: p.n(),
            got: gains.k.len(),
        });
    }
    let (res, g) = el_parts(p, y, grid)?;
    let n = p.n();
    let nn = grid.n_nodes();
    let mut rate = Profile::zeros("cov_rate", n, nn);
    for i in 1..nn - 1 {
        for c in 0..n {
            rate.set(i, c, -gains.k[c] * gains.shape(res.value(i, c)));
        }
    }
    for c in 0..n {
        let r0 = match p.boundary().start[c] {
            BoundaryCondition::Fixed(_) => 0.0,
            BoundaryCondition::Free => gains.k[c] * gains.shape(g.value(0, c)),
        };
        rate.set(0, c, r0);
        let rf = match p.boundary().end[c] {
            BoundaryCondition::Fixed(_) => 0.0,
            BoundaryCondition::Free => -gains.k[c] * gains.shape(g.value(nn - 1, c)),
        };
        rate.set(nn - 1, c, rf);
    }
    Ok(rate)
}

/// Value of the governing functional ∫ F(y, ẏ, t) dt on the profile.
pub fn functional_j(p: &VariationalProblem, y: &Profile, grid: &TimeGrid) -> Result<f64> {
    check_problem_shape(p, y, grid)?;
    let ydot = diff1(grid, y)?;
    let mut f = Profile::zeros("F", 1, grid.n_nodes());
    for i in 0..grid.n_nodes() {
        let t = grid.time_at(i);
        let v = p.eval_f(y.node(i), ydot.node(i), t);
        if !v.is_finite() {
            return Err(VemError::Evaluation {
                context: "F".into(),
                node: Some(i),
                tau: None,
            });
        }
        f.set(i, 0, v);
    }
    trapezoid(grid, &f)
}

/// Optimality residual norm: max |EL residual| over interior nodes plus the
/// natural-boundary residual |F_ydot| for free endpoint components.
pub fn cov_residual_norm(
    p: &VariationalProblem,
    y: &Profile,
    grid: &TimeGrid,
) -> Result<f64> {
    let (res, g) = el_parts(p, y, grid)?;
    Ok(residual_from_parts(p, grid, &res, &g))
}

fn residual_from_parts(
    p: &VariationalProblem,
    grid: &TimeGrid,
    res: &Profile,
    g: &Profile,
) -> f64 {
    let nn = grid.n_nodes();
    let mut norm = 0.0f64;
    for i in 1..nn - 1 {
        for c in 0..p.n() {
            norm = norm.max(res.value(i, c).abs());
        }
    }
    for c in 0..p.n() {
        if !p.boundary().start[c].is_fixed() {
            norm = norm.max(g.value(0, c).abs());
        }
        if !p.boundary().end[c].is_fixed() {
            norm = norm.max(g.value(nn - 1, c).abs());
        }
    }
    norm
}

/// J and the residual norm in one evaluation pass (monitor fast path).
pub(crate) fn cov_measures(
    p: &VariationalProblem,
    y: &Profile,
    grid: &TimeGrid,
) -> Result<(f64, f64)> {
    check_problem_shape(p, y, grid)?;
    let n = p.n();
    let nn = grid.n_nodes();
    let ydot = diff1(grid, y)?;

    let mut g = Profile::zeros("F_ydot", n, nn);
    let mut f = Profile::zeros("F", 1, nn);
    for i in 0..nn {
        let t = grid.time_at(i);
        let vals = eval_checked(p.eval_f_ydot(y.node(i), ydot.node(i), t), n, "F_ydot", i)?;
        g.node_mut(i).copy_from_slice(&vals);
        let v = p.eval_f(y.node(i), ydot.node(i), t);
        if !v.is_finite() {
            return Err(VemError::Evaluation {
                context: "F".into(),
                node: Some(i),
                tau: None,
            });
        }
        f.set(i, 0, v);
    }
    let dg = diff1(grid, &g)?;

    let mut res = Profile::zeros("el_residual", n, nn);
    for i in 0..nn {
        let t = grid.time_at(i);
        let fy = eval_checked(p.eval_f_y(y.node(i), ydot.node(i), t), n, "F_y", i)?;
        for c in 0..n {
            res.set(i, c, fy[c] - dg.value(i, c));
        }
    }
    let j = trapezoid(grid, &f)?;
    Ok((j, residual_from_parts(p, grid, &res, &g)))
}
