//! τ-integration engine: an adaptive embedded Runge–Kutta pair for benign
//! flows, a Newton-based implicit stepper for stiff ones, and the drive loop
//! that owns descent monitoring, pinned-value handling, diagnostics, and
//! termination.
//!
//! Pinned nodal values (prescribed initial/terminal states, pinned terminal
//! costates) are excluded from the packed integration vector entirely, which
//! keeps them bit-identical over the whole solve and shrinks the implicit
//! linear algebra.

use crate::cov::{cov_rhs, CovGains};
use crate::error::{Result, VemError};
use crate::grid::{Profile, TimeGrid};
use crate::linalg::{LuFactors, Mat};
use crate::problem::{BoundaryCondition, OcpProblem, VariationalProblem};
use crate::zs::{apply_pins, zs_rates, FlowState, ZsGains};

/// Integration method for the τ-IVP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Embedded Dormand–Prince 5(4) pair with PI step control.
    ExplicitRk45,
    /// Implicit (backward-difference) stepper with a finite-difference
    /// Jacobian, for flows the explicit pair cannot step stably.
    ImplicitStiff,
    /// Plain forward-Euler marching at a constant step; used for the signed
    /// flow variant, whose chattering defeats error estimators.
    FixedStep { dtau: f64 },
}

/// Options of one evolve run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolveOptions {
    pub method: Method,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Horizon of the virtual time.
    pub tau_max: f64,
    /// Terminate early once the optimality residual max-norm drops here.
    pub residual_tol: f64,
    /// τ interval between diagnostics records / state snapshots.
    pub snapshot_every: f64,
    pub max_steps: usize,
    /// Permitted per-step rise of the monitored functional.
    pub descent_slack: f64,
    /// Experimental: advect interior nodes with the stretching grid when the
    /// terminal time is free.
    pub convective_correction: bool,
    /// First trial step; chosen from the initial rate magnitude if absent.
    pub initial_dtau: Option<f64>,
}

impl EvolveOptions {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            rel_tol: 1e-6,
            abs_tol: 1e-8,
            tau_max: 1000.0,
            residual_tol: 1e-6,
            snapshot_every: 1.0,
            max_steps: 1_000_000,
            descent_slack: 1e-9,
            convective_correction: false,
            initial_dtau: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) {
            return Err(VemError::Usage("integration tolerances must be positive".into()));
        }
        if !(self.tau_max > 0.0) {
            return Err(VemError::Usage("tau_max must be positive".into()));
        }
        if !(self.snapshot_every > 0.0) {
            return Err(VemError::Usage("snapshot_every must be positive".into()));
        }
        if !(self.residual_tol >= 0.0) || !(self.descent_slack >= 0.0) {
            return Err(VemError::Usage(
                "residual_tol and descent_slack must be non-negative".into(),
            ));
        }
        if let Method::FixedStep { dtau } = self.method {
            if !(dtau > 0.0) {
                return Err(VemError::Usage("fixed step size must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One diagnostics row, emitted every `snapshot_every` of τ.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub tau: f64,
    /// Governing functional (the variational J, or the Bolza cost for OCPs).
    pub j: f64,
    /// Squared-residual functional; OCP solves only.
    pub j1: Option<f64>,
    pub residual_norm: f64,
    /// Terminal time; present when it is free.
    pub tf: Option<f64>,
    /// False if some accepted step since the previous record raised the
    /// monitored functional by more than the allowed slack.
    pub descent_ok: bool,
}

/// Why the drive loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Optimality residual reached `residual_tol`.
    ResidualTol,
    /// Integrated up to `tau_max`.
    TauMax,
    /// Ran out of steps first.
    MaxSteps,
}

/// Result of an evolve run.
#[derive(Debug, Clone)]
pub struct EvolveOutcome<S> {
    pub state: S,
    /// Grid at termination (carries the final terminal time).
    pub grid: TimeGrid,
    pub diagnostics: Vec<DiagnosticsRecord>,
    /// (τ, state) pairs at the diagnostics cadence, including τ = 0 and the
    /// final state.
    pub snapshots: Vec<(f64, S)>,
    pub termination: Termination,
    pub steps: usize,
    /// Largest observed per-step rise of the monitored functional.
    pub max_step_rise: f64,
}

type RhsFn<'a> = &'a mut dyn FnMut(f64, &[f64], &mut [f64]) -> Result<()>;

// ---------------------------------------------------------------------------
// Explicit Dormand–Prince 5(4)

const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 6] = [
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const DTAU_FLOOR: f64 = 1e-14;

/// Result of one accepted explicit step.
#[derive(Debug, Clone)]
pub struct Rk45Step {
    pub state: Vec<f64>,
    /// Step size actually taken.
    pub dtau_taken: f64,
    /// Proposal for the next step.
    pub dtau_next: f64,
    /// Scaled error estimate of the accepted step (≤ 1).
    pub error_estimate: f64,
}

pub(crate) struct Rk45Stepper {
    rel_tol: f64,
    abs_tol: f64,
    facold: f64,
}

impl Rk45Stepper {
    pub(crate) fn new(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            rel_tol,
            abs_tol,
            facold: 1e-4,
        }
    }

    /// Takes one accepted step, shrinking the trial size on rejections.
    pub(crate) fn step(
        &mut self,
        rhs: RhsFn<'_>,
        tau: f64,
        y: &[f64],
        dtau: f64,
    ) -> Result<Rk45Step> {
        const SAFE: f64 = 0.9;
        const BETA: f64 = 0.04;
        const EXPO1: f64 = 0.2 - BETA * 0.75;
        const FAC_MIN: f64 = 0.2; // max shrink per update
        const FAC_MAX: f64 = 10.0; // max growth per update

        let dim = y.len();
        let mut k = vec![vec![0.0; dim]; 7];
        let mut stage = vec![0.0; dim];
        let mut ynew = vec![0.0; dim];
        let mut h = dtau;

        loop {
            if h < DTAU_FLOOR {
                return Err(VemError::StiffnessSuspected { dtau: h });
            }
            rhs(tau, y, &mut k[0])?;
            for s in 1..7 {
                for i in 0..dim {
                    let mut acc = 0.0;
                    for (j, kj) in k.iter().enumerate().take(s.min(6)) {
                        let a = if s < 6 { DP_A[s - 1][j] } else { DP_B[j] };
                        acc += a * kj[i];
                    }
                    stage[i] = y[i] + h * acc;
                }
                if s == 6 {
                    ynew.copy_from_slice(&stage);
                }
                rhs(tau + DP_C[s] * h, &stage, &mut k[s])?;
            }

            // Scaled RMS of the embedded error.
            let mut err_acc = 0.0;
            for i in 0..dim {
                let mut e = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    e += DP_E[j] * kj[i];
                }
                e *= h;
                let sc = self.abs_tol + self.rel_tol * y[i].abs().max(ynew[i].abs());
                err_acc += (e / sc) * (e / sc);
            }
            let err = (err_acc / dim as f64).sqrt();

            let fac11 = err.powf(EXPO1);
            if err <= 1.0 {
                self.facold = err.max(1e-4);
                let fac = (fac11 / self.facold.powf(BETA) / SAFE)
                    .clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                return Ok(Rk45Step {
                    state: ynew,
                    dtau_taken: h,
                    dtau_next: h / fac,
                    error_estimate: err,
                });
            }
            h /= (fac11 / SAFE).min(1.0 / FAC_MIN);
        }
    }
}

/// One accepted adaptive explicit step: returns the new state, the step
/// actually taken, the proposal for the next step, and the error estimate.
pub fn step_rk45(
    rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    state: &[f64],
    tau: f64,
    dtau: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<Rk45Step> {
    Rk45Stepper::new(rel_tol, abs_tol).step(rhs, tau, state, dtau)
}

// ---------------------------------------------------------------------------
// Implicit stepper: one-step trapezoid/BDF2 composite with Newton iteration
// and a finite-difference Jacobian. Both implicit stages share one iteration
// matrix I − d·h·J, so the factorization is reused across stages and across
// steps until the step size drifts or Newton degrades.

/// Result of one implicit step.
#[derive(Debug, Clone)]
pub struct ImplicitStep {
    pub state: Vec<f64>,
    pub dtau_taken: f64,
    pub dtau_next: f64,
}

pub(crate) struct ImplicitStepper {
    rel_tol: f64,
    abs_tol: f64,
    /// Error-estimate driven step rejection; the drive loop wants it, the
    /// bare one-step operation only rejects on Newton failure.
    lte_control: bool,
    jac: Option<Mat>,
    lu: Option<LuFactors>,
    dh_factored: f64,
    jac_fresh: bool,
}

const NEWTON_MAX_ITERS: usize = 10;

// Temporary instrumentation counters (removed before release).
pub mod dbg_counters {
    use std::sync::atomic::{AtomicU64, Ordering};
    pub static JAC: AtomicU64 = AtomicU64::new(0);
    pub static FACTOR: AtomicU64 = AtomicU64::new(0);
    pub static NEWTON_FAIL: AtomicU64 = AtomicU64::new(0);
    pub static GUARD_REJECT: AtomicU64 = AtomicU64::new(0);
    pub static STEPS: AtomicU64 = AtomicU64::new(0);
    pub fn bump(c: &AtomicU64) { c.fetch_add(1, Ordering::Relaxed); }
    pub fn dump() -> String {
        format!("jac={} factor={} newton_fail={} guard={} steps={}",
            JAC.load(Ordering::Relaxed), FACTOR.load(Ordering::Relaxed),
            NEWTON_FAIL.load(Ordering::Relaxed), GUARD_REJECT.load(Ordering::Relaxed),
            STEPS.load(Ordering::Relaxed))
    }
}

// Composite trapezoid/BDF2 coefficients. With the stage split 2 − √2 both
// stages carry the same implicit weight d = 1 − 1/√2.
const TRBDF2_GAMMA: f64 = 2.0 - std::f64::consts::SQRT_2;
const TRBDF2_D: f64 = 1.0 - std::f64::consts::FRAC_1_SQRT_2;

impl ImplicitStepper {
    pub(crate) fn new(rel_tol: f64, abs_tol: f64, lte_control: bool) -> Self {
        Self {
            rel_tol,
            abs_tol,
            lte_control,
            jac: None,
            lu: None,
            dh_factored: 0.0,
            jac_fresh: false,
        }
    }

    fn refresh_jacobian(&mut self, rhs: RhsFn<'_>, tau: f64, y: &[f64], f0: &[f64]) -> Result<()> {
        let dim = y.len();
        let mut jac = Mat::zeros(dim, dim);
        let mut yp = y.to_vec();
        let mut fp = vec![0.0; dim];
        let sqrt_eps = f64::EPSILON.sqrt();
        for j in 0..dim {
            let delta = sqrt_eps * (1.0 + y[j].abs());
            yp[j] = y[j] + delta;
            rhs(tau, &yp, &mut fp)?;
            yp[j] = y[j];
            for i in 0..dim {
                jac.set(i, j, (fp[i] - f0[i]) / delta);
            }
        }
        dbg_counters::bump(&dbg_counters::JAC);
        self.jac = Some(jac);
        self.jac_fresh = true;
        self.lu = None;
        Ok(())
    }

    fn factor(&mut self, dh: f64) -> Result<()> {
        let jac = self.jac.as_ref().expect("jacobian present");
        let dim = jac.rows();
        let mut a = Mat::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                a.set(i, j, -dh * jac.get(i, j));
            }
            a.set(i, i, 1.0 - dh * jac.get(i, i));
        }
        self.lu = Some(LuFactors::factor(&a).map_err(|_| VemError::StepFailed {
            reason: "singular iteration matrix".into(),
            dtau: dh,
        })?);
        dbg_counters::bump(&dbg_counters::FACTOR);
        self.dh_factored = dh;
        Ok(())
    }

    fn ensure_factored(
        &mut self,
        rhs: RhsFn<'_>,
        tau: f64,
        y: &[f64],
        f0: &[f64],
        dh: f64,
    ) -> Result<()> {
        if self.jac.is_none() {
            self.refresh_jacobian(rhs, tau, y, f0)?;
        }
        let drift = if self.dh_factored > 0.0 {
            (dh / self.dh_factored - 1.0).abs()
        } else {
            f64::INFINITY
        };
        if self.lu.is_none() || drift > 0.4 {
            self.factor(dh)?;
        }
        Ok(())
    }

    /// Newton iteration for z − dh·f(t_eval, z) = rhs_const. Returns the
    /// solution, f at the solution, and the iteration count.
    #[allow(clippy::type_complexity)]
    fn newton(
        &mut self,
        rhs: RhsFn<'_>,
        t_eval: f64,
        dh: f64,
        rhs_const: &[f64],
        predictor: &[f64],
        scale_ref: &[f64],
    ) -> Result<Option<(Vec<f64>, Vec<f64>, usize)>> {
        let dim = predictor.len();
        // Solve well below the nominal min(rel_tol, 1e-8)·‖state‖ bound:
        // iteration residue shows up as noise on the monitored functional,
        // and the descent guard shrinks steps to push it under the slack.
        let norm_state =
            (crate::linalg::norm_sq(scale_ref) / dim.max(1) as f64).sqrt();
        let tol = (self.rel_tol.min(1e-8) * norm_state * 1e-2)
            .max(self.abs_tol * 1e-4)
            .max(1e-16);

        let mut z = predictor.to_vec();
        let mut fz = vec![0.0; dim];
        let mut delta = vec![0.0; dim];
        for iter in 1..=NEWTON_MAX_ITERS {
            rhs(t_eval, &z, &mut fz)?;
            for i in 0..dim {
                delta[i] = -(z[i] - dh * fz[i] - rhs_const[i]);
            }
            self.lu
                .as_ref()
                .expect("factored matrix present")
                .solve_in_place(&mut delta);
            let mut inc = 0.0;
            for i in 0..dim {
                z[i] += delta[i];
                inc += delta[i] * delta[i];
            }
            let inc = (inc / dim.max(1) as f64).sqrt();
            if !inc.is_finite() {
                return Ok(None);
            }
            if inc <= tol {
                rhs(t_eval, &z, &mut fz)?;
                return Ok(Some((z, fz, iter)));
            }
        }
        Ok(None)
    }

    pub(crate) fn step(
        &mut self,
        rhs: RhsFn<'_>,
        tau: f64,
        y: &[f64],
        dtau: f64,
    ) -> Result<ImplicitStep> {
        let dim = y.len();
        let mut h = dtau;
        let mut f0 = vec![0.0; dim];
        rhs(tau, y, &mut f0)?;
        let gamma = TRBDF2_GAMMA;
        // BDF2-stage combination weights: z2 − dh f = c1 z1 − c2 y.
        let c1 = 1.0 / (gamma * (2.0 - gamma));
        let c2 = (1.0 - gamma) * (1.0 - gamma) / (gamma * (2.0 - gamma));

        loop {
            if h < DTAU_FLOOR {
                return Err(VemError::StepFailed {
                    reason: "step size collapsed during Newton retries".into(),
                    dtau: h,
                });
            }
            let dh = TRBDF2_D * h;
            self.ensure_factored(rhs, tau, y, &f0, dh)?;

            // Stage 1: trapezoid over [tau, tau + γh].
            let rhs1: Vec<f64> = y.iter().zip(&f0).map(|(yi, fi)| yi + dh * fi).collect();
            let pred1: Vec<f64> = y
                .iter()
                .zip(&f0)
                .map(|(yi, fi)| yi + gamma * h * fi)
                .collect();
            let stage1 = self.newton(rhs, tau + gamma * h, dh, &rhs1, &pred1, y)?;
            let (z1, _f1, it1) = match stage1 {
                Some(v) => v,
                None => {
                    dbg_counters::bump(&dbg_counters::NEWTON_FAIL);
                    self.recover(rhs, tau, y, &f0, &mut h)?;
                    continue;
                }
            };

            // Stage 2: BDF2 over [tau, tau + γh, tau + h].
            let rhs2: Vec<f64> = z1
                .iter()
                .zip(y)
                .map(|(z1i, yi)| c1 * z1i - c2 * yi)
                .collect();
            let pred2: Vec<f64> = z1
                .iter()
                .zip(y)
                .map(|(z1i, yi)| (z1i - (1.0 - gamma) * yi) / gamma)
                .collect();
            let stage2 = self.newton(rhs, tau + h, dh, &rhs2, &pred2, y)?;
            let (z2, f2, it2) = match stage2 {
                Some(v) => v,
                None => {
                    dbg_counters::bump(&dbg_counters::NEWTON_FAIL);
                    self.recover(rhs, tau, y, &f0, &mut h)?;
                    continue;
                }
            };

            // Embedded error estimate, smoothed through the iteration matrix
            // so stiff components do not dominate it.
            let f1_at_z1 = {
                let mut f = vec![0.0; dim];
                rhs(tau + gamma * h, &z1, &mut f)?;
                f
            };
            let w0 = (1.0 - gamma) / 3.0 * h;
            let mut est_vec: Vec<f64> = (0..dim)
                .map(|i| {
                    w0 * (f0[i] / gamma - f1_at_z1[i] / (gamma * (1.0 - gamma))
                        + f2[i] / (1.0 - gamma))
                })
                .collect();
            self.lu
                .as_ref()
                .expect("factored matrix present")
                .solve_in_place(&mut est_vec);
            let mut est_acc = 0.0;
            for i in 0..dim {
                let sc = self.abs_tol + self.rel_tol * y[i].abs().max(z2[i].abs());
                let e = est_vec[i] / sc;
                est_acc += e * e;
            }
            let est = (est_acc / dim.max(1) as f64).sqrt();

            if self.lte_control && est > 1.0 {
                h *= (0.9 / est.cbrt()).max(0.2);
                continue;
            }
            if it1.max(it2) > 5 {
                self.jac_fresh = false;
                self.jac = None;
            }
            let grow = if est > 0.0 {
                (0.9 / est.cbrt()).clamp(0.2, 5.0)
            } else {
                5.0
            };
            return Ok(ImplicitStep {
                state: z2,
                dtau_taken: h,
                dtau_next: h * grow,
            });
        }
    }

    /// Newton failed: refresh the Jacobian once, then halve the step.
    fn recover(
        &mut self,
        rhs: RhsFn<'_>,
        tau: f64,
        y: &[f64],
        f0: &[f64],
        h: &mut f64,
    ) -> Result<()> {
        if !self.jac_fresh {
            self.refresh_jacobian(rhs, tau, y, f0)?;
            self.factor(TRBDF2_D * *h)?;
        } else {
            *h *= 0.5;
            self.lu = None;
        }
        Ok(())
    }
}

/// One A-stable implicit step: Newton-solves the backward-difference
/// equation, halving the step on non-convergence. Succeeds with the step
/// actually taken plus a proposal for the next one.
pub fn step_implicit(
    rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    state: &[f64],
    tau: f64,
    dtau: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<ImplicitStep> {
    ImplicitStepper::new(rel_tol, abs_tol, false).step(rhs, tau, state, dtau)
}

// ---------------------------------------------------------------------------
// Drive loop

struct MonitorSample {
    j: f64,
    j1: Option<f64>,
    residual: f64,
    tf: Option<f64>,
}

impl MonitorSample {
    /// The functional whose monotone decline the loop enforces: J1 for OCP
    /// flows, J itself for variational flows.
    fn descent_value(&self) -> f64 {
        self.j1.unwrap_or(self.j)
    }
}

trait FlowSystem {
    fn rhs(&mut self, tau: f64, y: &[f64], out: &mut [f64]) -> Result<()>;
    fn monitor(&mut self, y: &[f64]) -> Result<MonitorSample>;
}

struct DriveResult {
    y: Vec<f64>,
    records: Vec<DiagnosticsRecord>,
    snapshots: Vec<(f64, Vec<f64>)>,
    termination: Termination,
    steps: usize,
    max_step_rise: f64,
}

enum AnyStepper {
    Rk45(Rk45Stepper),
    Implicit(ImplicitStepper),
    Fixed(f64),
}

impl AnyStepper {
    fn step(
        &mut self,
        sys: &mut dyn FlowSystem,
        tau: f64,
        y: &[f64],
        dtau: f64,
    ) -> Result<(Vec<f64>, f64, f64)> {
        match self {
            AnyStepper::Rk45(s) => {
                let st = s.step(&mut |t, y, o| sys.rhs(t, y, o), tau, y, dtau)?;
                Ok((st.state, st.dtau_taken, st.dtau_next))
            }
            AnyStepper::Implicit(s) => {
                let st = s.step(&mut |t, y, o| sys.rhs(t, y, o), tau, y, dtau)?;
                Ok((st.state, st.dtau_taken, st.dtau_next))
            }
            AnyStepper::Fixed(h) => {
                let mut f = vec![0.0; y.len()];
                sys.rhs(tau, y, &mut f)?;
                let state: Vec<f64> =
                    y.iter().zip(&f).map(|(yi, fi)| yi + *h * fi).collect();
                Ok((state, *h, *h))
            }
        }
    }

    fn adaptive(&self) -> bool {
        !matches!(self, AnyStepper::Fixed(_))
    }
}

fn drive(sys: &mut dyn FlowSystem, y0: Vec<f64>, opts: &EvolveOptions) -> Result<DriveResult> {
    opts.validate()?;
    let mut stepper = match opts.method {
        Method::ExplicitRk45 => AnyStepper::Rk45(Rk45Stepper::new(opts.rel_tol, opts.abs_tol)),
        Method::ImplicitStiff => {
            AnyStepper::Implicit(ImplicitStepper::new(opts.rel_tol, opts.abs_tol, true))
        }
        Method::FixedStep { dtau } => AnyStepper::Fixed(dtau),
    };

    let mut y = y0;
    let mut tau = 0.0;
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut steps = 0usize;
    let mut max_rise = 0.0f64;
    let mut interval_ok = true;

    let m0 = sys.monitor(&y)?;
    let mut prev_value = m0.descent_value();
    let mut last_emitted_tau = 0.0;
    records.push(DiagnosticsRecord {
        tau,
        j: m0.j,
        j1: m0.j1,
        residual_norm: m0.residual,
        tf: m0.tf,
        descent_ok: true,
    });
    snapshots.push((tau, y.clone()));
    if m0.residual <= opts.residual_tol {
        return Ok(DriveResult {
            y,
            records,
            snapshots,
            termination: Termination::ResidualTol,
            steps,
            max_step_rise: max_rise,
        });
    }

    let mut dtau = match opts.initial_dtau {
        Some(d) => d,
        None => match opts.method {
            Method::FixedStep { dtau } => dtau,
            _ => {
                let mut f0 = vec![0.0; y.len()];
                sys.rhs(0.0, &y, &mut f0)?;
                (1e-2 / crate::linalg::max_abs(&f0).max(1.0)).clamp(1e-8, 1e-2)
            }
        },
    };
    let mut next_snap = opts.snapshot_every;
    // Largest step the descent guard currently permits. The error controller
    // alone would regrow aggressively after every guard rejection and pay a
    // rejection (plus a matrix refactor) per step; the cap makes the guard's
    // verdict sticky and lets it relax gradually.
    let mut guard_cap = f64::INFINITY;

    let termination = loop {
        if steps >= opts.max_steps {
            break Termination::MaxSteps;
        }
        let remaining = opts.tau_max - tau;
        let trial = dtau.min(guard_cap).min(remaining);

        // Descent guard: a step that raises the monitored functional beyond
        // the slack is retried at half size. A genuine ascent that survives
        // shrinking signals a defective rate assembly and aborts.
        let mut guard_trial = trial;
        let mut guarded = false;
        let (ynew, taken, proposal, m) = loop {
            let (ynew, taken, proposal) =
                stepper
                    .step(sys, tau, &y, guard_trial)
                    .map_err(|e| attach_tau(e, tau))?;
            let m = sys.monitor(&ynew).map_err(|e| attach_tau(e, tau))?;
            let rise = m.descent_value() - prev_value;
            if rise > opts.descent_slack {
                if stepper.adaptive() && taken / 2.0 > 1e-12 {
                    dbg_counters::bump(&dbg_counters::GUARD_REJECT);
                    guarded = true;
                    guard_trial = taken / 2.0;
                    continue;
                }
                if rise > 100.0 * opts.descent_slack {
                    return Err(VemError::DescentViolation {
                        tau,
                        rise,
                        functional: m.descent_value(),
                    });
                }
                interval_ok = false;
                max_rise = max_rise.max(rise);
            } else {
                max_rise = max_rise.max(rise.max(0.0));
            }
            break (ynew, taken, proposal, m);
        };
        if guarded {
            guard_cap = taken * 1.25;
        } else {
            guard_cap *= 1.05;
        }

        dbg_counters::bump(&dbg_counters::STEPS);
        y = ynew;
        tau += taken;
        steps += 1;
        prev_value = m.descent_value();
        dtau = proposal;

        let done = if m.residual <= opts.residual_tol {
            Some(Termination::ResidualTol)
        } else if remaining - taken <= 1e-12 {
            Some(Termination::TauMax)
        } else {
            None
        };

        if tau + 1e-12 >= next_snap || done.is_some() {
            records.push(DiagnosticsRecord {
                tau,
                j: m.j,
                j1: m.j1,
                residual_norm: m.residual,
                tf: m.tf,
                descent_ok: interval_ok,
            });
            snapshots.push((tau, y.clone()));
            last_emitted_tau = tau;
            interval_ok = true;
            while next_snap <= tau + 1e-12 {
                next_snap += opts.snapshot_every;
            }
        }
        if let Some(t) = done {
            break t;
        }
    };

    if tau > last_emitted_tau {
        let m = sys.monitor(&y)?;
        records.push(DiagnosticsRecord {
            tau,
            j: m.j,
            j1: m.j1,
            residual_norm: m.residual,
            tf: m.tf,
            descent_ok: interval_ok,
        });
        snapshots.push((tau, y.clone()));
    }

    Ok(DriveResult {
        y,
        records,
        snapshots,
        termination,
        steps,
        max_step_rise: max_rise,
    })
}

fn attach_tau(e: VemError, tau: f64) -> VemError {
    match e {
        VemError::Evaluation {
            context,
            node,
            tau: None,
        } => VemError::Evaluation {
            context,
            node,
            tau: Some(tau),
        },
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Variational flow driver

struct CovPack {
    free: Vec<usize>,
}

impl CovPack {
    fn new(p: &VariationalProblem, nn: usize) -> Self {
        let n = p.n();
        let mut free = Vec::with_capacity(nn * n);
        for i in 0..nn {
            for c in 0..n {
                let pinned = (i == 0 && p.boundary().start[c].is_fixed())
                    || (i == nn - 1 && p.boundary().end[c].is_fixed());
                if !pinned {
                    free.push(i * n + c);
                }
            }
        }
        Self { free }
    }

    fn pack(&self, y: &Profile) -> Vec<f64> {
        self.free.iter().map(|&i| y.values()[i]).collect()
    }

    fn unpack(&self, v: &[f64], y: &mut Profile) {
        for (slot, &idx) in v.iter().zip(&self.free) {
            y.values_mut()[idx] = *slot;
        }
    }
}

struct CovSystem<'a> {
    p: &'a VariationalProblem,
    grid: TimeGrid,
    gains: &'a CovGains,
    pack: CovPack,
    scratch: Profile,
}

impl FlowSystem for CovSystem<'_> {
    fn rhs(&mut self, _tau: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        self.pack.unpack(y, &mut self.scratch);
        let rate = cov_rhs(self.p, &self.scratch, &self.grid, self.gains)?;
        for (o, &idx) in out.iter_mut().zip(&self.pack.free) {
            *o = rate.values()[idx];
        }
        Ok(())
    }

    fn monitor(&mut self, y: &[f64]) -> Result<MonitorSample> {
        self.pack.unpack(y, &mut self.scratch);
        let (j, residual) = crate::cov::cov_measures(self.p, &self.scratch, &self.grid)?;
        Ok(MonitorSample {
            j,
            j1: None,
            residual,
            tf: None,
        })
    }
}

/// Integrates the variational flow from the initial profile until the
/// residual tolerance, τ horizon, or step budget is reached.
pub fn evolve_variational(
    p: &VariationalProblem,
    initial: &Profile,
    grid: &TimeGrid,
    gains: &CovGains,
    opts: &EvolveOptions,
) -> Result<EvolveOutcome<Profile>> {
    if initial.dim() != p.n() || initial.n_nodes() != grid.n_nodes() {
        return Err(VemError::Dimension {
            context: "initial profile".into(),
            expected: p.n() * grid.n_nodes(),
            got: initial.dim() * initial.n_nodes(),
        });
    }
    let nn = grid.n_nodes();
    for c in 0..p.n() {
        if let BoundaryCondition::Fixed(v) = p.boundary().start[c] {
            if initial.value(0, c) != v {
                return Err(VemError::Usage(format!(
                    "initial profile violates the prescribed start value of component {c}"
                )));
            }
        }
        if let BoundaryCondition::Fixed(v) = p.boundary().end[c] {
            if initial.value(nn - 1, c) != v {
                return Err(VemError::Usage(format!(
                    "initial profile violates the prescribed end value of component {c}"
                )));
            }
        }
    }

    let pack = CovPack::new(p, nn);
    let y0 = pack.pack(initial);
    let mut sys = CovSystem {
        p,
        grid: *grid,
        gains,
        pack,
        scratch: initial.clone(),
    };
    let res = drive(&mut sys, y0, opts)?;

    let unpack = |v: &[f64]| {
        let mut prof = initial.clone();
        sys.pack.unpack(v, &mut prof);
        prof
    };
    let snapshots = res
        .snapshots
        .iter()
        .map(|(t, v)| (*t, unpack(v)))
        .collect();
    Ok(EvolveOutcome {
        state: unpack(&res.y),
        grid: *grid,
        diagnostics: res.records,
        snapshots,
        termination: res.termination,
        steps: res.steps,
        max_step_rise: res.max_step_rise,
    })
}

// ---------------------------------------------------------------------------
// OCP flow driver

struct ZsPack {
    m: usize,
    nn: usize,
    x_free: Vec<usize>,
    lam_free: Vec<usize>,
    tf_free: bool,
}

impl ZsPack {
    fn new(p: &OcpProblem, nn: usize) -> Self {
        let (n, m) = (p.n(), p.m());
        let mut x_free = Vec::with_capacity(nn * n);
        for i in 0..nn {
            for c in 0..n {
                let pinned = i == 0 || (i == nn - 1 && p.terminal_state()[c].is_fixed());
                if !pinned {
                    x_free.push(i * n + c);
                }
            }
        }
        let mut lam_free = Vec::with_capacity(nn * n);
        for i in 0..nn {
            for c in 0..n {
                let pinned = i == nn - 1 && !p.terminal_state()[c].is_fixed();
                if !pinned {
                    lam_free.push(i * n + c);
                }
            }
        }
        Self {
            m,
            nn,
            x_free,
            lam_free,
            tf_free: p.terminal_time().is_free(),
        }
    }

    fn len(&self) -> usize {
        self.x_free.len() + self.lam_free.len() + self.nn * self.m + usize::from(self.tf_free)
    }

    fn pack(&self, s: &FlowState) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(self.x_free.iter().map(|&i| s.x.values()[i]));
        v.extend(self.lam_free.iter().map(|&i| s.lam.values()[i]));
        v.extend_from_slice(s.u.values());
        if self.tf_free {
            v.push(s.tf.expect("free-horizon state carries tf"));
        }
        v
    }

    fn unpack(&self, v: &[f64], s: &mut FlowState) {
        let (xs, rest) = v.split_at(self.x_free.len());
        let (ls, rest) = rest.split_at(self.lam_free.len());
        let (us, tf) = rest.split_at(self.nn * self.m);
        for (val, &idx) in xs.iter().zip(&self.x_free) {
            s.x.values_mut()[idx] = *val;
        }
        for (val, &idx) in ls.iter().zip(&self.lam_free) {
            s.lam.values_mut()[idx] = *val;
        }
        s.u.values_mut().copy_from_slice(us);
        if self.tf_free {
            s.tf = Some(tf[0]);
        }
    }

    fn pack_rates(&self, r: &crate::zs::ZsRates, out: &mut [f64]) {
        let mut k = 0;
        for &i in &self.x_free {
            out[k] = r.x.values()[i];
            k += 1;
        }
        for &i in &self.lam_free {
            out[k] = r.lam.values()[i];
            k += 1;
        }
        for &v in r.u.values() {
            out[k] = v;
            k += 1;
        }
        if self.tf_free {
            out[k] = r.dtf.expect("free-horizon rates carry dtf");
        }
    }
}

struct ZsSystem<'a> {
    p: &'a OcpProblem,
    grid: TimeGrid,
    gains: &'a ZsGains,
    convective: bool,
    pack: ZsPack,
    scratch: FlowState,
}

impl ZsSystem<'_> {
    fn sync(&mut self, y: &[f64]) {
        self.pack.unpack(y, &mut self.scratch);
    }
}

impl FlowSystem for ZsSystem<'_> {
    fn rhs(&mut self, _tau: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        self.sync(y);
        let rates = zs_rates(
            self.p,
            &self.scratch,
            &self.grid,
            self.gains,
            self.convective,
        )?;
        self.pack.pack_rates(&rates, out);
        Ok(())
    }

    fn monitor(&mut self, y: &[f64]) -> Result<MonitorSample> {
        self.sync(y);
        let (j1, residual) = crate::zs::flow_measures(self.p, &self.scratch, &self.grid)?;
        let j = crate::zs::bolza_cost(self.p, &self.scratch, &self.grid)?;
        Ok(MonitorSample {
            j,
            j1: Some(j1),
            residual,
            tf: self.scratch.tf,
        })
    }
}

/// Integrates the OCP flow from the initial stacked state until the residual
/// tolerance, τ horizon, or step budget is reached.
pub fn evolve_ocp(
    p: &OcpProblem,
    initial: &FlowState,
    grid: &TimeGrid,
    gains: &ZsGains,
    opts: &EvolveOptions,
) -> Result<EvolveOutcome<FlowState>> {
    // The pinned entries must already hold their prescribed values; the
    // packed vector never carries them.
    let nn = grid.n_nodes();
    let mut pinned_check = initial.clone();
    apply_pins(p, grid, &mut pinned_check);
    if pinned_check != *initial {
        return Err(VemError::Usage(
            "initial state violates pinned boundary values (x(t0), prescribed x(tf), \
             or transversality-pinned lambda(tf))"
                .into(),
        ));
    }

    let pack = ZsPack::new(p, nn);
    let y0 = pack.pack(initial);
    let mut sys = ZsSystem {
        p,
        grid: *grid,
        gains,
        convective: opts.convective_correction,
        pack,
        scratch: initial.clone(),
    };
    let res = drive(&mut sys, y0, opts)?;

    let unpack = |v: &[f64]| {
        let mut s = initial.clone();
        sys.pack.unpack(v, &mut s);
        s
    };
    let final_state = unpack(&res.y);
    let final_grid = match final_state.tf {
        Some(tf) => grid.with_tf(tf)?,
        None => *grid,
    };
    let snapshots = res
        .snapshots
        .iter()
        .map(|(t, v)| (*t, unpack(v)))
        .collect();
    Ok(EvolveOutcome {
        state: final_state,
        grid: final_grid,
        diagnostics: res.records,
        snapshots,
        termination: res.termination,
        steps: res.steps,
        max_step_rise: res.max_step_rise,
    })
}
