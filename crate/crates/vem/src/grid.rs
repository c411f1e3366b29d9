//! Uniform time grids and discrete calculus over them.
//!
//! Nodes sit at fixed normalized positions σ_i = i/(N−1); physical node times
//! t_i = t0 + σ_i (tf − t0) stretch with the terminal time, so free-horizon
//! flows rescale the grid without re-meshing. Both difference operators are
//! second-order accurate everywhere: central stencils in the interior,
//! one-sided stencils of the same order at the two endpoints.

use crate::error::{Result, VemError};

/// Uniform grid over [t0, tf] with N ≥ 5 nodes. `tf` is a live handle: a
/// solve with a free terminal time mutates it between evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    tf: f64,
    n: usize,
}

impl TimeGrid {
    pub const MIN_NODES: usize = 5;

    pub fn new(t0: f64, tf: f64, n: usize) -> Result<Self> {
        if !(t0.is_finite() && tf.is_finite()) || tf <= t0 {
            return Err(VemError::InvalidGrid(format!(
                "need tf > t0, got t0 = {t0}, tf = {tf}"
            )));
        }
        if n < Self::MIN_NODES {
            return Err(VemError::InvalidGrid(format!(
                "need at least {} nodes, got {n}",
                Self::MIN_NODES
            )));
        }
        Ok(Self { t0, tf, n })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    /// Uniform step between adjacent nodes.
    pub fn h(&self) -> f64 {
        (self.tf - self.t0) / (self.n - 1) as f64
    }

    /// Normalized position of node i.
    pub fn sigma(&self, i: usize) -> f64 {
        i as f64 / (self.n - 1) as f64
    }

    /// Physical time of node i.
    pub fn time_at(&self, i: usize) -> f64 {
        if i == self.n - 1 {
            self.tf
        } else {
            self.t0 + self.sigma(i) * (self.tf - self.t0)
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.time_at(i))
    }

    /// Moves the terminal time, keeping nodes attached to their σ positions.
    pub fn set_tf(&mut self, tf: f64) -> Result<()> {
        if !tf.is_finite() || tf <= self.t0 {
            return Err(VemError::InvalidGrid(format!(
                "terminal time {tf} must stay above t0 = {}",
                self.t0
            )));
        }
        self.tf = tf;
        Ok(())
    }

    pub fn with_tf(&self, tf: f64) -> Result<Self> {
        let mut g = *self;
        g.set_tf(tf)?;
        Ok(g)
    }

    /// Composite-trapezoid weight of node i (h at interior nodes, h/2 at the
    /// two ends). Exposed for the discrete-gradient oracles.
    pub fn trapezoid_weight(&self, i: usize) -> f64 {
        if i == 0 || i == self.n - 1 {
            0.5 * self.h()
        } else {
            self.h()
        }
    }
}

/// Nodal samples of an n-vector variable: one row of `dim` values per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    dim: usize,
    values: Vec<f64>,
    label: String,
}

impl Profile {
    pub fn zeros(label: impl Into<String>, dim: usize, n_nodes: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; dim * n_nodes],
            label: label.into(),
        }
    }

    pub fn from_values(label: impl Into<String>, dim: usize, values: Vec<f64>) -> Result<Self> {
        let label = label.into();
        if dim == 0 || values.len() % dim != 0 {
            return Err(VemError::Dimension {
                context: format!("profile '{label}' storage"),
                expected: dim.max(1),
                got: values.len(),
            });
        }
        Ok(Self { dim, values, label })
    }

    /// Samples a vector-valued function of time on the grid nodes.
    pub fn sampled(
        label: impl Into<String>,
        dim: usize,
        grid: &TimeGrid,
        f: impl Fn(f64) -> Vec<f64>,
    ) -> Self {
        let mut values = Vec::with_capacity(dim * grid.n_nodes());
        for t in grid.times() {
            let row = f(t);
            assert_eq!(row.len(), dim, "sampled row has wrong dimension");
            values.extend_from_slice(&row);
        }
        Self {
            dim,
            values,
            label: label.into(),
        }
    }

    pub fn sampled_scalar(
        label: impl Into<String>,
        grid: &TimeGrid,
        f: impl Fn(f64) -> f64,
    ) -> Self {
        Self::sampled(label, 1, grid, |t| vec![f(t)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    #[inline]
    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn value(&self, node: usize, comp: usize) -> f64 {
        self.values[node * self.dim + comp]
    }

    #[inline]
    pub fn set(&mut self, node: usize, comp: usize, v: f64) {
        self.values[node * self.dim + comp] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Errors (naming the first offending node) if any entry is NaN/Inf.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for i in 0..self.n_nodes() {
            if self.node(i).iter().any(|v| !v.is_finite()) {
                return Err(VemError::Evaluation {
                    context: format!("{context} ({})", self.label),
                    node: Some(i),
                    tau: None,
                });
            }
        }
        Ok(())
    }
}

fn check_shape(grid: &TimeGrid, p: &Profile, op: &str) -> Result<()> {
    if p.n_nodes() != grid.n_nodes() {
        return Err(VemError::Dimension {
            context: format!("{op} on profile '{}'", p.label()),
            expected: grid.n_nodes(),
            got: p.n_nodes(),
        });
    }
    Ok(())
}

/// Second-order first derivative d/dt of the nodal samples. Central stencil
/// at interior nodes, 3-point one-sided stencils at the endpoints.
pub fn diff1(grid: &TimeGrid, p: &Profile) -> Result<Profile> {
    check_shape(grid, p, "diff1")?;
    let n = grid.n_nodes();
    let dim = p.dim();
    let h = grid.h();
    let mut out = Profile::zeros(p.label().to_string(), dim, n);
    for c in 0..dim {
        let v = |i: usize| p.value(i, c);
        out.set(0, c, (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h));
        for i in 1..n - 1 {
            out.set(i, c, (v(i + 1) - v(i - 1)) / (2.0 * h));
        }
        out.set(
            n - 1,
            c,
            (3.0 * v(n - 1) - 4.0 * v(n - 2) + v(n - 3)) / (2.0 * h),
        );
    }
    out.check_finite("diff1 output")?;
    Ok(out)
}

/// Second-order second derivative d²/dt². Central stencil at interior nodes,
/// 4-point one-sided stencils (exact on cubics) at the endpoints.
pub fn diff2(grid: &TimeGrid, p: &Profile) -> Result<Profile> {
    check_shape(grid, p, "diff2")?;
    let n = grid.n_nodes();
    let dim = p.dim();
    let h2 = grid.h() * grid.h();
    let mut out = Profile::zeros(p.label().to_string(), dim, n);
    for c in 0..dim {
        let v = |i: usize| p.value(i, c);
        out.set(0, c, (2.0 * v(0) - 5.0 * v(1) + 4.0 * v(2) - v(3)) / h2);
        for i in 1..n - 1 {
            out.set(i, c, (v(i + 1) - 2.0 * v(i) + v(i - 1)) / h2);
        }
        out.set(
            n - 1,
            c,
            (2.0 * v(n - 1) - 5.0 * v(n - 2) + 4.0 * v(n - 3) - v(n - 4)) / h2,
        );
    }
    out.check_finite("diff2 output")?;
    Ok(out)
}

/// Composite trapezoid quadrature of a scalar profile over [t0, tf].
pub fn trapezoid(grid: &TimeGrid, integrand: &Profile) -> Result<f64> {
    if integrand.dim() != 1 {
        return Err(VemError::Dimension {
            context: format!("trapezoid integrand '{}'", integrand.label()),
            expected: 1,
            got: integrand.dim(),
        });
    }
    check_shape(grid, integrand, "trapezoid")?;
    Ok(trapezoid_samples(grid, integrand.values()))
}

/// Trapezoid rule over raw nodal samples (one per node).
pub(crate) fn trapezoid_samples(grid: &TimeGrid, samples: &[f64]) -> f64 {
    let n = samples.len();
    let mut acc = 0.5 * (samples[0] + samples[n - 1]);
    for s in &samples[1..n - 1] {
        acc += s;
    }
    acc * grid.h()
}
