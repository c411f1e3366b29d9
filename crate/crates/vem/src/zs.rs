//! Variation flow for optimal control problems.
//!
//! A Bolza problem is recast as the minimization of the non-negative
//! functional
//!
//! J1 = (H(tf) + φ_tf)² [free tf only]
//!      + ∫ ‖ẋ − H_λ‖² + ‖λ̇ + H_x‖² + ‖H_u‖² dt
//!
//! over the stacked trajectory y = (x, λ, u). J1 vanishes exactly at the
//! first-order optimality conditions, so driving the profiles down its
//! (weighted) gradient in the virtual time τ lands on the extremal. The node
//! rates are assembled from the residual field r; the terminal node carries
//! one of four boundary variants depending on whether the horizon and each
//! terminal state component are prescribed, and a free horizon adds a scalar
//! rate for tf derived from the sensitivity of the discretized J1.

use crate::error::{Result, VemError};
use crate::grid::{diff1, diff2, trapezoid_samples, Profile, TimeGrid};
use crate::linalg::{dot, Mat};
use crate::problem::{BoundaryCondition, OcpProblem, TerminalTime};

/// Stacked solve state: state, costate, and control profiles on one grid,
/// plus the terminal time when it is free.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x: Profile,
    pub lam: Profile,
    pub u: Profile,
    pub tf: Option<f64>,
}

impl FlowState {
    pub fn new(x: Profile, lam: Profile, u: Profile, tf: Option<f64>) -> Result<Self> {
        if lam.dim() != x.dim() {
            return Err(VemError::Dimension {
                context: "costate profile dimension".into(),
                expected: x.dim(),
                got: lam.dim(),
            });
        }
        if lam.n_nodes() != x.n_nodes() || u.n_nodes() != x.n_nodes() {
            return Err(VemError::Dimension {
                context: "flow state node counts".into(),
                expected: x.n_nodes(),
                got: lam.n_nodes().min(u.n_nodes()),
            });
        }
        Ok(Self { x, lam, u, tf })
    }

    pub fn n_nodes(&self) -> usize {
        self.x.n_nodes()
    }

    /// Total number of evolving values in the τ-IVP: every nodal value of
    /// (x, λ, u) plus the terminal time when free. Pinned boundary values are
    /// counted here (they belong to the flow); the integrator excludes them
    /// from its packed vector internally.
    pub fn flow_dimension(&self) -> usize {
        self.x.values().len()
            + self.lam.values().len()
            + self.u.values().len()
            + usize::from(self.tf.is_some())
    }

    /// Default initial guess: states ramp linearly from x0 to any prescribed
    /// terminal values (flat otherwise), costates are zero with the terminal
    /// transversality values filled in, controls are zero.
    pub fn default_guess(p: &OcpProblem, grid: &TimeGrid) -> Self {
        let nn = grid.n_nodes();
        let (n, m) = (p.n(), p.m());
        let mut x = Profile::zeros("x", n, nn);
        for j in 0..n {
            let start = p.x0()[j];
            let end = match p.terminal_state()[j] {
                BoundaryCondition::Fixed(v) => v,
                BoundaryCondition::Free => start,
            };
            for i in 0..nn {
                let s = grid.sigma(i);
                x.set(i, j, start + s * (end - start));
            }
        }
        let lam = Profile::zeros("lam", n, nn);
        let u = Profile::zeros("u", m, nn);
        let tf = p.terminal_time().is_free().then(|| grid.tf());
        let mut state = Self { x, lam, u, tf };
        apply_pins(p, grid, &mut state);
        state
    }
}

/// Overwrites the pinned entries of a state: x(t0) = x0, prescribed terminal
/// state components, and λ(tf) = φ_x(tf) for free terminal components.
pub fn apply_pins(p: &OcpProblem, grid: &TimeGrid, s: &mut FlowState) {
    let last = s.n_nodes() - 1;
    for j in 0..p.n() {
        s.x.set(0, j, p.x0()[j]);
        if let BoundaryCondition::Fixed(v) = p.terminal_state()[j] {
            s.x.set(last, j, v);
        }
    }
    let tf = s.tf.unwrap_or_else(|| grid.tf());
    let phi_x = p.phi_x(s.x.node(last), tf);
    for j in 0..p.n() {
        if !p.terminal_state()[j].is_fixed() {
            s.lam.set(last, j, phi_x[j]);
        }
    }
}

/// Everything the flow needs about the Hamiltonian H = L + λᵀf at one point.
#[derive(Debug, Clone)]
pub struct HamiltonianBundle {
    pub h: f64,
    /// Explicit time derivative ∂H/∂t = L_t + λᵀ f_t.
    pub h_t: f64,
    /// Dynamics value; also H_λ.
    pub f: Vec<f64>,
    pub h_x: Vec<f64>,
    pub h_u: Vec<f64>,
    pub f_x: Mat,
    pub f_u: Mat,
    pub f_t: Vec<f64>,
    pub h_xx: Mat,
    pub h_xu: Mat,
    pub h_uu: Mat,
    pub h_xt: Vec<f64>,
    pub h_ut: Vec<f64>,
}

impl HamiltonianBundle {
    pub fn h_lam(&self) -> &[f64] {
        &self.f
    }
}

/// Evaluates the Hamiltonian bundle from the problem's derivative callbacks.
pub fn hamiltonian_bundle(
    p: &OcpProblem,
    x: &[f64],
    lam: &[f64],
    u: &[f64],
    t: f64,
) -> Result<HamiltonianBundle> {
    let f = (p.f)(x, u, t);
    let l = (p.l)(x, u, t);
    let f_x = (p.f_x)(x, u, t);
    let f_u = (p.f_u)(x, u, t);
    let f_t = (p.f_t)(x, u, t);
    let l_x = (p.l_x)(x, u, t);
    let l_u = (p.l_u)(x, u, t);
    let l_t = (p.l_t)(x, u, t);

    let h = l + dot(lam, &f);
    let h_t = l_t + dot(lam, &f_t);
    let mut h_x = l_x;
    for (g, v) in h_x.iter_mut().zip(f_x.matvec_t(lam)) {
        *g += v;
    }
    let mut h_u = l_u;
    for (g, v) in h_u.iter_mut().zip(f_u.matvec_t(lam)) {
        *g += v;
    }

    let bundle = HamiltonianBundle {
        h,
        h_t,
        f,
        h_x,
        h_u,
        f_x,
        f_u,
        f_t,
        h_xx: (p.h_xx)(x, u, t, lam),
        h_xu: (p.h_xu)(x, u, t, lam),
        h_uu: (p.h_uu)(x, u, t, lam),
        h_xt: (p.h_xt)(x, u, t, lam),
        h_ut: (p.h_ut)(x, u, t, lam),
    };
    let finite = bundle.h.is_finite()
        && bundle.h_t.is_finite()
        && bundle.f.iter().all(|v| v.is_finite())
        && bundle.h_x.iter().all(|v| v.is_finite())
        && bundle.h_u.iter().all(|v| v.is_finite())
        && bundle.f_x.is_finite()
        && bundle.f_u.is_finite()
        && bundle.f_t.iter().all(|v| v.is_finite())
        && bundle.h_xx.is_finite()
        && bundle.h_xu.is_finite()
        && bundle.h_uu.is_finite()
        && bundle.h_xt.iter().all(|v| v.is_finite())
        && bundle.h_ut.iter().all(|v| v.is_finite());
    if !finite {
        return Err(VemError::Evaluation {
            context: "Hamiltonian bundle".into(),
            node: None,
            tau: None,
        });
    }
    Ok(bundle)
}

/// A (2n+m)-vector partitioned into its x, λ, and u blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedVec {
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl StackedVec {
    pub fn from_blocks(x: &[f64], lam: &[f64], u: &[f64]) -> Self {
        let mut data = Vec::with_capacity(x.len() + lam.len() + u.len());
        data.extend_from_slice(x);
        data.extend_from_slice(lam);
        data.extend_from_slice(u);
        Self {
            n: x.len(),
            m: u.len(),
            data,
        }
    }

    pub fn x(&self) -> &[f64] {
        &self.data[..self.n]
    }

    pub fn lam(&self) -> &[f64] {
        &self.data[self.n..2 * self.n]
    }

    pub fn u(&self) -> &[f64] {
        &self.data[2 * self.n..]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        crate::linalg::max_abs(&self.data)
    }
}

/// The optimality vector v = [(H_x + λ̇); (f − ẋ); H_u]. Its norm measures
/// the distance from first-order optimality.
pub fn optimality_vector(
    bundle: &HamiltonianBundle,
    xdot: &[f64],
    lamdot: &[f64],
) -> StackedVec {
    let v1: Vec<f64> = bundle
        .h_x
        .iter()
        .zip(lamdot)
        .map(|(h, l)| h + l)
        .collect();
    let v2: Vec<f64> = bundle.f.iter().zip(xdot).map(|(f, x)| f - x).collect();
    StackedVec::from_blocks(&v1, &v2, &bundle.h_u)
}

/// The Hessian-like block matrix of the squared-residual integrand,
/// [[H_xx, f_xᵀ, H_xu], [f_x, 0, f_u], [H_ux, f_uᵀ, H_uu]]. Exposed mainly
/// for its symmetry invariant; the residual assembly works blockwise.
pub fn build_h_yy(b: &HamiltonianBundle) -> Mat {
    let n = b.f.len();
    let m = b.h_u.len();
    let dim = 2 * n + m;
    let mut hyy = Mat::zeros(dim, dim);
    for i in 0..n {
        for j in 0..n {
            hyy.set(i, j, b.h_xx.get(i, j));
            hyy.set(i, n + j, b.f_x.get(j, i));
            hyy.set(n + i, j, b.f_x.get(i, j));
        }
        for j in 0..m {
            hyy.set(i, 2 * n + j, b.h_xu.get(i, j));
            hyy.set(2 * n + j, i, b.h_xu.get(i, j));
            hyy.set(n + i, 2 * n + j, b.f_u.get(i, j));
            hyy.set(2 * n + j, n + i, b.f_u.get(i, j));
        }
    }
    for i in 0..m {
        for j in 0..m {
            hyy.set(2 * n + i, 2 * n + j, b.h_uu.get(i, j));
        }
    }
    hyy
}

/// The residual field r = H_yy v + M ẏ + [f_t; −H_xt; 0] − [ẍ; λ̈; 0],
/// partitioned into (r_x, r_λ, r_u). The interior flow is δy/δτ = −2K r.
pub fn assemble_r(
    bundle: &HamiltonianBundle,
    v: &StackedVec,
    ydot: &StackedVec,
    xddot: &[f64],
    lamddot: &[f64],
) -> StackedVec {
    let n = bundle.f.len();
    let m = bundle.h_u.len();
    debug_assert_eq!(v.n, n);
    debug_assert_eq!(v.m, m);

    let (v1, v2, v3) = (v.x(), v.lam(), v.u());
    let (xdot, lamdot, udot) = (ydot.x(), ydot.lam(), ydot.u());

    // r_x = H_xx v1 + f_xᵀ v2 + H_xu v3 + f_x ẋ + f_u u̇ + f_t − ẍ
    let mut r_x = bundle.h_xx.matvec(v1);
    for (r, v) in r_x.iter_mut().zip(bundle.f_x.matvec_t(v2)) {
        *r += v;
    }
    for (r, v) in r_x.iter_mut().zip(bundle.h_xu.matvec(v3)) {
        *r += v;
    }
    for (r, v) in r_x.iter_mut().zip(bundle.f_x.matvec(xdot)) {
        *r += v;
    }
    for (r, v) in r_x.iter_mut().zip(bundle.f_u.matvec(udot)) {
        *r += v;
    }
    for i in 0..n {
        r_x[i] += bundle.f_t[i] - xddot[i];
    }

    // r_λ = f_x v1 + f_u v3 − H_xx ẋ − f_xᵀ λ̇ − H_xu u̇ − H_xt − λ̈
    let mut r_l = bundle.f_x.matvec(v1);
    for (r, v) in r_l.iter_mut().zip(bundle.f_u.matvec(v3)) {
        *r += v;
    }
    for (r, v) in r_l.iter_mut().zip(bundle.h_xx.matvec(xdot)) {
        *r -= v;
    }
    for (r, v) in r_l.iter_mut().zip(bundle.f_x.matvec_t(lamdot)) {
        *r -= v;
    }
    for (r, v) in r_l.iter_mut().zip(bundle.h_xu.matvec(udot)) {
        *r -= v;
    }
    for i in 0..n {
        r_l[i] += -bundle.h_xt[i] - lamddot[i];
    }

    // r_u = H_ux v1 + f_uᵀ v2 + H_uu v3
    let mut r_u = bundle.h_xu.matvec_t(v1);
    for (r, v) in r_u.iter_mut().zip(bundle.f_u.matvec_t(v2)) {
        *r += v;
    }
    for (r, v) in r_u.iter_mut().zip(bundle.h_uu.matvec(v3)) {
        *r += v;
    }

    StackedVec::from_blocks(&r_x, &r_l, &r_u)
}

/// Flow gains: diagonal K over the stacked (x, λ, u) components plus the
/// terminal-time gain.
#[derive(Debug, Clone, PartialEq)]
pub struct ZsGains {
    k: Vec<f64>,
    k_tf: f64,
}

impl ZsGains {
    pub fn new(k: Vec<f64>, k_tf: f64) -> Result<Self> {
        if k.is_empty() || k.iter().any(|v| !(*v > 0.0)) || !(k_tf > 0.0) {
            return Err(VemError::Usage("flow gains must all be positive".into()));
        }
        Ok(Self { k, k_tf })
    }

    pub fn uniform(p: &OcpProblem, k: f64) -> Result<Self> {
        Self::new(vec![k; 2 * p.n() + p.m()], k)
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }

    pub fn k_tf(&self) -> f64 {
        self.k_tf
    }

    fn kx(&self, n: usize, j: usize) -> f64 {
        let _ = n;
        self.k[j]
    }

    fn klam(&self, n: usize, j: usize) -> f64 {
        self.k[n + j]
    }

    fn ku(&self, n: usize, j: usize) -> f64 {
        self.k[2 * n + j]
    }
}

/// Rates of every nodal value plus the terminal-time rate when free.
#[derive(Debug, Clone)]
pub struct ZsRates {
    pub x: Profile,
    pub lam: Profile,
    pub u: Profile,
    pub dtf: Option<f64>,
}

/// Rates of the three blocks at a single node.
#[derive(Debug, Clone)]
pub struct NodeRates {
    pub x: Vec<f64>,
    pub lam: Vec<f64>,
    pub u: Vec<f64>,
}

/// Per-node evaluation shared by the flow operations.
struct NodeEval {
    bundle: HamiltonianBundle,
    v: StackedVec,
    r: StackedVec,
    /// Integrand of the squared-residual functional at this node.
    f1: f64,
}

struct FlowEval {
    grid: TimeGrid,
    xdot: Profile,
    lamdot: Profile,
    udot: Profile,
    nodes: Vec<NodeEval>,
}

fn check_state(p: &OcpProblem, s: &FlowState, grid: &TimeGrid) -> Result<()> {
    if s.x.dim() != p.n() || s.lam.dim() != p.n() || s.u.dim() != p.m() {
        return Err(VemError::Dimension {
            context: "flow state dimensions".into(),
            expected: 2 * p.n() + p.m(),
            got: s.x.dim() + s.lam.dim() + s.u.dim(),
        });
    }
    if s.n_nodes() != grid.n_nodes() {
        return Err(VemError::Dimension {
            context: "flow state nodes".into(),
            expected: grid.n_nodes(),
            got: s.n_nodes(),
        });
    }
    match (p.terminal_time(), s.tf) {
        (TerminalTime::Fixed(_), Some(_)) => Err(VemError::Usage(
            "state carries a terminal time but the problem's horizon is fixed".into(),
        )),
        (TerminalTime::Free { .. }, None) => Err(VemError::Usage(
            "free-horizon problem needs the state to carry tf".into(),
        )),
        _ => Ok(()),
    }
}

/// Grid with the state's terminal time applied (free-horizon states own tf).
fn effective_grid(s: &FlowState, grid: &TimeGrid) -> Result<TimeGrid> {
    match s.tf {
        Some(tf) => grid.with_tf(tf),
        None => Ok(*grid),
    }
}

fn eval_flow(p: &OcpProblem, s: &FlowState, grid: &TimeGrid) -> Result<FlowEval> {
    check_state(p, s, grid)?;
    let grid = effective_grid(s, grid)?;
    let xdot = diff1(&grid, &s.x)?;
    let lamdot = diff1(&grid, &s.lam)?;
    let udot = diff1(&grid, &s.u)?;
    let xddot = diff2(&grid, &s.x)?;
    let lamddot = diff2(&grid, &s.lam)?;

    let mut nodes = Vec::with_capacity(grid.n_nodes());
    for i in 0..grid.n_nodes() {
        let t = grid.time_at(i);
        let bundle = hamiltonian_bundle(p, s.x.node(i), s.lam.node(i), s.u.node(i), t)
            .map_err(|e| attach_node(e, i))?;
        let v = optimality_vector(&bundle, xdot.node(i), lamdot.node(i));
        let ydot = StackedVec::from_blocks(xdot.node(i), lamdot.node(i), udot.node(i));
        let r = assemble_r(&bundle, &v, &ydot, xddot.node(i), lamddot.node(i));
        let f1 = crate::linalg::norm_sq(v.data());
        nodes.push(NodeEval { bundle, v, r, f1 });
    }
    Ok(FlowEval {
        grid,
        xdot,
        lamdot,
        udot,
        nodes,
    })
}

fn attach_node(e: VemError, i: usize) -> VemError {
    match e {
        VemError::Evaluation { context, tau, .. } => VemError::Evaluation {
            context,
            node: Some(i),
            tau,
        },
        other => other,
    }
}

/// Residual-descent rates −2K r at the interior nodes (boundary rows left
/// zero; see the dedicated boundary operations).
pub fn zs_interior_rhs(
    p: &OcpProblem,
    s: &FlowState,
    grid: &TimeGrid,
    gains: &ZsGains,
) -> Result<ZsRates> {
    check_gains(p, gains)?;
    let ev = eval_flow(p, s, grid)?;
    Ok(interior_rates(p, gains, &ev))
}

fn interior_rates(p: &OcpProblem, gains: &ZsGains, ev: &FlowEval) -> ZsRates {
    let (n, m) = (p.n(), p.m());
    let nn = ev.grid.n_nodes();
    let mut x = Profile::zeros("x_rate", n, nn);
    let mut lam = Profile::zeros("lam_rate", n, nn);
    let mut u = Profile::zeros("u_rate", m, nn);
    for i in 1..nn - 1 {
        let r = &ev.nodes[i].r;
        for j in 0..n {
            x.set(i, j, -2.0 * gains.kx(n, j) * r.x()[j]);
            lam.set(i, j, -2.0 * gains.klam(n, j) * r.lam()[j]);
        }
        for j in 0..m {
            u.set(i, j, -2.0 * gains.ku(n, j) * r.u()[j]);
        }
    }
    ZsRates {
        x,
        lam,
        u,
        dtf: None,
    }
}

/// Rates at the initial node: x(t0) is prescribed (zero rate), the costate
/// follows +2K(λ̇ + H_x), the control descends its residual row.
pub fn zs_initial_boundary_rhs(
    p: &OcpProblem,
    s: &FlowState,
    grid: &TimeGrid,
    gains: &ZsGains,
) -> Result<NodeRates> {
    check_gains(p, gains)?;
    let ev = eval_flow(p, s, grid)?;
    Ok(initial_rates(p, gains, &ev))
}

fn initial_rates(p: &OcpProblem, gains: &ZsGains, ev: &FlowEval) -> NodeRates {
    let (n, m) = (p.n(), p.m());
    let node = &ev.nodes[0];
    let x = vec![0.0; n];
    let lam = (0..n)
        .map(|j| 2.0 * gains.klam(n, j) * node.v.x()[j])
        .collect();
    let u = (0..m)
        .map(|j| -2.0 * gains.ku(n, j) * node.r.u()[j])
        .collect();
    NodeRates { x, lam, u }
}

/// Total rates of the terminal node, dispatched per component over the four
/// boundary variants (fixed/free horizon × fixed/free terminal state). When
/// the horizon is free these are the full rates of the σ = 1 node, which
/// rides the stretching grid.
pub fn zs_terminal_rhs(
    p: &OcpProblem,
    s: &FlowState,
    grid: &TimeGrid,
    gains: &ZsGains,
) -> Result<NodeRates> {
    check_gains(p, gains)?;
    let ev = eval_flow(p, s, grid)?;
    Ok(terminal_rates(p, gains, &ev, s))
}

/// Rate of the free terminal time: δtf/δτ = −k_tf G with G the exact
/// sensitivity of the discretized J1 to tf at fixed σ-attached profiles.
/// G is validated against a central difference of J1(tf) in the tests.
pub fn tf_rate(
    p: &OcpProblem,
    s: &FlowState,
    grid: &TimeGrid,
    gains: &ZsGains,
) -> Result<f64> {
    if !p.terminal_time().is_free() {
        return Err(VemError::Usage(
            "terminal-time rate requested for a fixed-horizon problem".into(),
        ));
    }
    check_gains(p, gains)?;
    let ev = eval_flow(p, s, grid)?;
    Ok(-gains.k_tf() * j1_tf_sensitivity(p, s, &ev))
}

/// d(J1)/d(tf) of the trapezoid-discretized functional with nodal values
/// held fixed on σ. Three contributions: the terminal defect term, the
/// stretching of the quadrature step, and the per-node change of the
/// integrand through ẋ, λ̇ ∝ 1/(tf − t0) and t_i = t0 + σ_i (tf − t0).
fn j1_tf_sensitivity(p: &OcpProblem, s: &FlowState, ev: &FlowEval) -> f64 {
    let grid = &ev.grid;
    let nn = grid.n_nodes();
    let last = nn - 1;
    let tf = grid.tf();
    let c = tf - grid.t0();

    let node = &ev.nodes[last];
    let eh = node.bundle.h + (p.phi_tf)(s.x.node(last), tf);
    let terminal = 2.0 * eh * (node.bundle.h_t + (p.phi_tf_tf)(s.x.node(last), tf));

    let mut integral = 0.0;
    let mut stretched = 0.0;
    for i in 0..nn {
        let w = grid.trapezoid_weight(i);
        let ne = &ev.nodes[i];
        integral += w * ne.f1;

        let xdot = ev.xdot.node(i);
        let lamdot = ev.lamdot.node(i);
        // d(ẋ)/d(tf) = −ẋ/c and d(λ̇)/d(tf) = −λ̇/c.
        let scale_term = -(2.0 / c)
            * (dot_residual(xdot, &ne.bundle.f, xdot) + dot_sum(lamdot, &ne.bundle.h_x, lamdot));
        // Explicit time dependence moves with the node: dt_i/d(tf) = σ_i.
        let df1_dt = -2.0 * dot_residual(xdot, &ne.bundle.f, &ne.bundle.f_t)
            + 2.0 * dot_sum(lamdot, &ne.bundle.h_x, &ne.bundle.h_xt)
            + 2.0 * dot(&ne.bundle.h_u, &ne.bundle.h_ut);
        stretched += w * (scale_term + grid.sigma(i) * df1_dt);
    }
    terminal + integral / c + stretched
}

/// (a − b)ᵀ c
fn dot_residual(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((a, b), c)| (a - b) * c)
        .sum()
}

/// (a + b)ᵀ c
fn dot_sum(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((a, b), c)| (a + b) * c)
        .sum()
}

/// Value of the equivalent functional: the integral of the squared
/// optimality residuals, plus the squared terminal defect when tf is free.
pub fn j1_value(p: &OcpProblem, s: &FlowState, grid: &TimeGrid) -> Result<f64> {
    let ev = eval_flow(p, s, grid)?;
    Ok(j1_from_eval(p, s, &ev))
}

fn j1_from_eval(p: &OcpProblem, s: &FlowState, ev: &FlowEval) -> f64 {
    let samples: Vec<f64> = ev.nodes.iter().map(|n| n.f1).collect();
    let mut j1 = trapezoid_samples(&ev.grid, &samples);
    if p.terminal_time().is_free() {
        let last = ev.grid.n_nodes() - 1;
        let eh = ev.nodes[last].bundle.h + (p.phi_tf)(s.x.node(last), ev.grid.tf());
        j1 += eh * eh;
    }
    j1
}

/// The transversality defect H(tf) + φ_tf at the terminal node.
pub fn terminal_defect(p: &OcpProblem, s: &FlowState, grid: &TimeGrid) -> Result<f64> {
    check_state(p, s, grid)?;
    let grid = effective_grid(s, grid)?;
    let last = grid.n_nodes() - 1;
    let tf = grid.tf();
    let bundle = hamiltonian_bundle(p, s.x.node(last), s.lam.node(last), s.u.node(last), tf)?;
    Ok(bundle.h + (p.phi_tf)(s.x.node(last), tf))
}

/// The Bolza cost φ(x(tf), tf) + ∫ L dt of the current profiles.
pub fn bolza_cost(p: &OcpProblem, s: &FlowState, grid: &TimeGrid) -> Result<f64> {
    check_state(p, s, grid)?;
    let grid = effective_grid(s, grid)?;
    let mut samples = Vec::with_capacity(grid.n_nodes());
    for i in 0..grid.n_nodes() {
        let v = p.running_cost(s.x.node(i), s.u.node(i), grid.time_at(i));
        if !v.is_finite() {
            return Err(VemError::Evaluation {
                context: "running cost".into(),
                node: Some(i),
                tau: None,
            });
        }
        samples.push(v);
    }
    let last = grid.n_nodes() - 1;
    Ok(p.terminal_cost(s.x.node(last), grid.tf()) + trapezoid_samples(&grid, &samples))
}

/// Optimality residual: max |v| over all nodes, plus the terminal defect
/// |H(tf) + φ_tf| when the horizon is free.
pub fn zs_residual_norm(p: &OcpProblem, s: &FlowState, grid: &TimeGrid) -> Result<f64> {
    let ev = eval_flow(p, s, grid)?;
    Ok(residual_from_eval(p, s, &ev))
}

/// J1 and the residual norm in one evaluation pass (monitor fast path).
pub(crate) fn flow_measures(
    p: &OcpProblem,
    s: &FlowState,
    grid: &TimeGrid,
) -> Result<(f64, f64)> {
    let ev = eval_flow(p, s, grid)?;
    Ok((j1_from_eval(p, s, &ev), residual_from_eval(p, s, &ev)))
}

fn residual_from_eval(p: &OcpProblem, s: &FlowState, ev: &FlowEval) -> f64 {
    let mut norm = 0.0f64;
    for n in &ev.nodes {
        norm = norm.max(n.v.max_abs());
    }
    if p.terminal_time().is_free() {
        let last = ev.grid.n_nodes() - 1;
        let eh = ev.nodes[last].bundle.h + (p.phi_tf)(s.x.node(last), ev.grid.tf());
        norm = norm.max(eh.abs());
    }
    norm
}

/// Assembles the complete rate set in one pass: interior residual descent,
/// both boundary nodes, and the terminal-time rate when free. With
/// `convective_correction` the interior nodes additionally account for their
/// σ-attached physical times moving as tf evolves (experimental, not part of
/// the plain flow).
pub fn zs_rates(
    p: &OcpProblem,
    s: &FlowState,
    grid: &TimeGrid,
    gains: &ZsGains,
    convective_correction: bool,
) -> Result<ZsRates> {
    check_gains(p, gains)?;
    let ev = eval_flow(p, s, grid)?;
    let mut rates = interior_rates(p, gains, &ev);
    let first = initial_rates(p, gains, &ev);
    let terminal = terminal_rates(p, gains, &ev, s);
    let nn = ev.grid.n_nodes();
    rates.x.node_mut(0).copy_from_slice(&first.x);
    rates.lam.node_mut(0).copy_from_slice(&first.lam);
    rates.u.node_mut(0).copy_from_slice(&first.u);
    rates.x.node_mut(nn - 1).copy_from_slice(&terminal.x);
    rates.lam.node_mut(nn - 1).copy_from_slice(&terminal.lam);
    rates.u.node_mut(nn - 1).copy_from_slice(&terminal.u);

    if p.terminal_time().is_free() {
        let dtf = -gains.k_tf() * j1_tf_sensitivity(p, s, &ev);
        if convective_correction {
            for i in 1..nn - 1 {
                let sig = ev.grid.sigma(i);
                for j in 0..p.n() {
                    let vx = rates.x.value(i, j) + ev.xdot.value(i, j) * sig * dtf;
                    rates.x.set(i, j, vx);
                    let vl = rates.lam.value(i, j) + ev.lamdot.value(i, j) * sig * dtf;
                    rates.lam.set(i, j, vl);
                }
                for j in 0..p.m() {
                    let vu = rates.u.value(i, j) + ev.udot.value(i, j) * sig * dtf;
                    rates.u.set(i, j, vu);
                }
            }
        }
        rates.dtf = Some(dtf);
    }
    Ok(rates)
}

fn check_gains(p: &OcpProblem, gains: &ZsGains) -> Result<()> {
    let expected = 2 * p.n() + p.m();
    if gains.k().len() != expected {
        return Err(VemError::Dimension {
            context: "flow gains".into(),
            expected,
            got: gains.k().len(),
        });
    }
    Ok(())
}

fn terminal_rates(
    p: &OcpProblem,
    gains: &ZsGains,
    ev: &FlowEval,
    s: &FlowState,
) -> NodeRates {
    let (n, m) = (p.n(), p.m());
    let last = ev.grid.n_nodes() - 1;
    let node = &ev.nodes[last];
    let tf = ev.grid.tf();
    let tf_free = p.terminal_time().is_free();

    // Terminal defect H + φ_tf and the cross derivative φ_x_tf; both only
    // enter the free-horizon rows.
    let eh = node.bundle.h + (p.phi_tf)(s.x.node(last), tf);
    let phi_x_tf = (p.phi_x_tf)(s.x.node(last), tf);

    let mut x = vec![0.0; n];
    let mut lam = vec![0.0; n];
    for j in 0..n {
        match p.terminal_state()[j] {
            BoundaryCondition::Fixed(_) => {
                // Prescribed terminal state: x rests, λ descends.
                let mut row = node.v.x()[j];
                if tf_free {
                    row += eh * node.bundle.f[j];
                }
                lam[j] = -2.0 * gains.klam(n, j) * row;
            }
            BoundaryCondition::Free => {
                // Free terminal state: λ(tf) stays pinned, x descends.
                let mut row = -node.v.lam()[j]; // ẋ − H_λ = −(f − ẋ)
                if tf_free {
                    row += eh * (node.bundle.h_x[j] + phi_x_tf[j]);
                }
                x[j] = -2.0 * gains.kx(n, j) * row;
            }
        }
    }
    let u = (0..m)
        .map(|j| {
            if tf_free {
                -2.0 * gains.ku(n, j) * eh * node.bundle.h_u[j]
            } else {
                -2.0 * gains.ku(n, j) * node.r.u()[j]
            }
        })
        .collect();
    NodeRates { x, lam, u }
}
