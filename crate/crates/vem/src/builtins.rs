//! Shipped benchmark cases with hand-derived derivative bundles and analytic
//! reference solutions where they exist.

use std::f64::consts::PI;

use crate::cov::CovGains;
use crate::error::Result;
use crate::grid::{Profile, TimeGrid};
use crate::integrate::{EvolveOptions, Method};
use crate::linalg::Mat;
use crate::problem::{
    BoundaryCondition, BoundarySpec, OcpProblem, TerminalTime, VariationalProblem,
};
use crate::zs::{apply_pins, FlowState, ZsGains};

/// The underlying problem of a benchmark case.
pub enum CaseProblem {
    Variational(VariationalProblem),
    Ocp(OcpProblem),
}

type ReferenceFn = Box<dyn Fn(f64) -> Vec<f64> + Send + Sync>;

/// A named benchmark: problem, defaults, initial guess, and reference data.
pub struct BenchmarkCase {
    pub name: &'static str,
    pub problem: CaseProblem,
    pub default_n: usize,
    pub default_tau_max: f64,
    pub default_method: Method,
    pub default_snapshot_every: f64,
    /// All solution components at time t, when a closed form exists.
    reference: Option<ReferenceFn>,
    /// Reference terminal time, for cases whose trajectory has no closed
    /// form but whose optimal horizon is known.
    pub reference_tf: Option<f64>,
    cov_gains: Option<CovGains>,
    zs_gains: Option<ZsGains>,
    /// Replace the published initial guess by a ramp between the boundary
    /// values (the published guess of the free-horizon case conflicts with
    /// the pinned nodes; pins win either way).
    pub linear_guess: bool,
}

pub fn names() -> [&'static str; 3] {
    ["example1", "example2", "example3"]
}

pub fn by_name(name: &str) -> Option<BenchmarkCase> {
    match name {
        "example1" => Some(example1()),
        "example2" => Some(example2()),
        "example3" => Some(example3()),
        _ => None,
    }
}

impl BenchmarkCase {
    pub fn grid(&self, n: usize) -> Result<TimeGrid> {
        match &self.problem {
            CaseProblem::Variational(p) => TimeGrid::new(p.t0(), p.tf(), n),
            CaseProblem::Ocp(p) => TimeGrid::new(p.t0(), p.terminal_time().initial(), n),
        }
    }

    pub fn default_grid(&self) -> Result<TimeGrid> {
        self.grid(self.default_n)
    }

    pub fn default_options(&self) -> EvolveOptions {
        let mut opts = EvolveOptions::new(self.default_method);
        opts.tau_max = self.default_tau_max;
        opts.snapshot_every = self.default_snapshot_every;
        opts
    }

    pub fn cov_gains(&self) -> Option<&CovGains> {
        self.cov_gains.as_ref()
    }

    pub fn zs_gains(&self) -> Option<&ZsGains> {
        self.zs_gains.as_ref()
    }

    /// Initial profile for a variational case.
    pub fn initial_variational(&self, grid: &TimeGrid) -> Option<Profile> {
        match (&self.problem, self.name) {
            (CaseProblem::Variational(p), _) => {
                Some(Profile::zeros("y", p.n(), grid.n_nodes()))
            }
            _ => None,
        }
    }

    /// Initial stacked state for an OCP case. Pinned nodes always win over
    /// the published guess values.
    pub fn initial_ocp(&self, grid: &TimeGrid) -> Option<FlowState> {
        let p = match &self.problem {
            CaseProblem::Ocp(p) => p,
            _ => return None,
        };
        if self.linear_guess {
            return Some(FlowState::default_guess(p, grid));
        }
        let nn = grid.n_nodes();
        let mut state = match self.name {
            "example2" => {
                let x = Profile::sampled("x", 2, grid, |t| {
                    vec![1.0 - 0.5 * t, 1.0 - 0.5 * t]
                });
                FlowState {
                    x,
                    lam: Profile::zeros("lam", 2, nn),
                    u: Profile::zeros("u", 1, nn),
                    tf: None,
                }
            }
            "example3" => {
                let x = Profile::sampled("x", 3, grid, |t| vec![1.0 - t, 1.0 - t, 0.0]);
                FlowState {
                    x,
                    lam: Profile::zeros("lam", 3, nn),
                    u: Profile::zeros("u", 1, nn),
                    tf: Some(grid.tf()),
                }
            }
            _ => FlowState::default_guess(p, grid),
        };
        apply_pins(p, grid, &mut state);
        Some(state)
    }

    /// Reference solution components at time t, in the order of
    /// `component_labels`.
    pub fn reference_at(&self, t: f64) -> Option<Vec<f64>> {
        self.reference.as_ref().map(|f| f(t))
    }

    pub fn component_labels(&self) -> Vec<String> {
        match &self.problem {
            CaseProblem::Variational(p) => {
                (1..=p.n()).map(|i| format!("y{i}")).collect()
            }
            CaseProblem::Ocp(p) => {
                let mut labels: Vec<String> =
                    (1..=p.n()).map(|i| format!("x{i}")).collect();
                labels.extend((1..=p.n()).map(|i| format!("lam{i}")));
                labels.extend((1..=p.m()).map(|i| format!("u{i}")));
                labels
            }
        }
    }

    /// Max nodal error of a profile against the reference, when one exists.
    pub fn max_error_profile(&self, y: &Profile, grid: &TimeGrid) -> Option<f64> {
        let f = self.reference.as_ref()?;
        let mut err = 0.0f64;
        for i in 0..grid.n_nodes() {
            let r = f(grid.time_at(i));
            for c in 0..y.dim() {
                err = err.max((y.value(i, c) - r[c]).abs());
            }
        }
        Some(err)
    }

    /// Max nodal error of a stacked state against the reference components
    /// (x blocks, then λ blocks, then u blocks).
    pub fn max_error_flow(&self, s: &FlowState, grid: &TimeGrid) -> Option<f64> {
        let f = self.reference.as_ref()?;
        let n = s.x.dim();
        let m = s.u.dim();
        let mut err = 0.0f64;
        for i in 0..grid.n_nodes() {
            let r = f(grid.time_at(i));
            for c in 0..n {
                err = err.max((s.x.value(i, c) - r[c]).abs());
                err = err.max((s.lam.value(i, c) - r[n + c]).abs());
            }
            for c in 0..m {
                err = err.max((s.u.value(i, c) - r[2 * n + c]).abs());
            }
        }
        Some(err)
    }
}

/// Scalar tracking problem on [0, π]: J = ∫ (ẏ² − 2 y cos t) dt with both
/// ends pinned at zero. Closed-form solution cos t + (2/π) t − 1.
pub fn example1() -> BenchmarkCase {
    let problem = VariationalProblem::builder(1, 0.0, PI)
        .integrand(|y, yd, t| yd[0] * yd[0] - 2.0 * y[0] * t.cos())
        .partial_y(|_, _, t| vec![-2.0 * t.cos()])
        .partial_ydot(|_, yd, _| vec![2.0 * yd[0]])
        .boundary(BoundarySpec::fixed_both(vec![0.0], vec![0.0]))
        .build()
        .expect("static problem definition");
    BenchmarkCase {
        name: "example1",
        problem: CaseProblem::Variational(problem),
        default_n: 101,
        default_tau_max: 20.0,
        default_method: Method::ExplicitRk45,
        default_snapshot_every: 0.25,
        reference: Some(Box::new(|t| vec![t.cos() + (2.0 / PI) * t - 1.0])),
        reference_tf: None,
        cov_gains: Some(CovGains::uniform(1, 0.1).expect("positive gain")),
        zs_gains: None,
        linear_guess: false,
    }
}

pub fn example1_reference(t: f64) -> f64 {
    t.cos() + (2.0 / PI) * t - 1.0
}

/// Double integrator with minimum control energy on [0, 2]: ẋ = Ax + bu,
/// J = ½∫u² dt, both boundary states prescribed. Polynomial closed-form
/// solution.
pub fn example2() -> BenchmarkCase {
    let problem = OcpProblem::builder(2, 1)
        .t0(0.0)
        .initial_state(vec![1.0, 1.0])
        .terminal_time(TerminalTime::Fixed(2.0))
        .terminal_state(vec![
            BoundaryCondition::Fixed(0.0),
            BoundaryCondition::Fixed(0.0),
        ])
        .dynamics(|x, u, _| vec![x[1], u[0]])
        .running_cost(|_, u, _| 0.5 * u[0] * u[0])
        .dynamics_jacobian_x(|_, _, _| Mat::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]))
        .dynamics_jacobian_u(|_, _, _| Mat::from_rows(&[&[0.0], &[1.0]]))
        .dynamics_partial_t(|_, _, _| vec![0.0, 0.0])
        .cost_gradient_x(|_, _, _| vec![0.0, 0.0])
        .cost_gradient_u(|_, u, _| vec![u[0]])
        .cost_partial_t(|_, _, _| 0.0)
        .terminal_cost(|_, _| 0.0)
        .terminal_gradient_x(|_, _| vec![0.0, 0.0])
        .terminal_partial_tf(|_, _| 0.0)
        .terminal_cross_x_tf(|_, _| vec![0.0, 0.0])
        .terminal_second_tf(|_, _| 0.0)
        .hamiltonian_xx(|_, _, _, _| Mat::zeros(2, 2))
        .hamiltonian_xu(|_, _, _, _| Mat::zeros(2, 1))
        .hamiltonian_uu(|_, _, _, _| Mat::from_rows(&[&[1.0]]))
        .hamiltonian_xt(|_, _, _, _| vec![0.0, 0.0])
        .hamiltonian_ut(|_, _, _, _| vec![0.0])
        .build()
        .expect("static problem definition");
    BenchmarkCase {
        name: "example2",
        problem: CaseProblem::Ocp(problem),
        default_n: 41,
        default_tau_max: 300.0,
        default_method: Method::ImplicitStiff,
        default_snapshot_every: 1.0,
        reference: Some(Box::new(|t| {
            vec![
                0.5 * t * t * t - 1.75 * t * t + t + 1.0, // x1
                1.5 * t * t - 3.5 * t + 1.0,              // x2
                3.0,                                      // lam1
                -3.0 * t + 3.5,                           // lam2
                3.0 * t - 3.5,                            // u
            ]
        })),
        reference_tf: None,
        cov_gains: None,
        zs_gains: Some(ZsGains::new(vec![1.0; 5], 1.0).expect("positive gains")),
        linear_guess: false,
    }
}

/// Fastest-descent curve: reach (2, −2) from rest at the origin in minimum
/// time under gravity g = 10, with the terminal speed free. No closed-form
/// trajectory is shipped; the optimal horizon 0.8165 s is the reference.
pub fn example3() -> BenchmarkCase {
    const G: f64 = 10.0;
    let problem = OcpProblem::builder(3, 1)
        .t0(0.0)
        .initial_state(vec![0.0, 0.0, 0.0])
        .terminal_time(TerminalTime::Free { guess: 1.0 })
        .terminal_state(vec![
            BoundaryCondition::Fixed(2.0),
            BoundaryCondition::Fixed(-2.0),
            BoundaryCondition::Free,
        ])
        .dynamics(|x, u, _| {
            let (s, c) = u[0].sin_cos();
            vec![x[2] * s, -x[2] * c, G * c]
        })
        .dynamics_jacobian_x(|_, u, _| {
            let (s, c) = u[0].sin_cos();
            Mat::from_rows(&[&[0.0, 0.0, s], &[0.0, 0.0, -c], &[0.0, 0.0, 0.0]])
        })
        .dynamics_jacobian_u(|x, u, _| {
            let (s, c) = u[0].sin_cos();
            Mat::from_rows(&[&[x[2] * c], &[x[2] * s], &[-G * s]])
        })
        .dynamics_partial_t(|_, _, _| vec![0.0, 0.0, 0.0])
        .running_cost(|_, _, _| 0.0)
        .cost_gradient_x(|_, _, _| vec![0.0, 0.0, 0.0])
        .cost_gradient_u(|_, _, _| vec![0.0])
        .cost_partial_t(|_, _, _| 0.0)
        .terminal_cost(|_, tf| tf)
        .terminal_gradient_x(|_, _| vec![0.0, 0.0, 0.0])
        .terminal_partial_tf(|_, _| 1.0)
        .terminal_cross_x_tf(|_, _| vec![0.0, 0.0, 0.0])
        .terminal_second_tf(|_, _| 0.0)
        .hamiltonian_xx(|_, _, _, _| Mat::zeros(3, 3))
        .hamiltonian_xu(|_, u, _, lam| {
            let (s, c) = u[0].sin_cos();
            Mat::from_rows(&[&[0.0], &[0.0], &[lam[0] * c + lam[1] * s]])
        })
        .hamiltonian_uu(|x, u, _, lam| {
            let (s, c) = u[0].sin_cos();
            Mat::from_rows(&[&[-lam[0] * x[2] * s + lam[1] * x[2] * c - lam[2] * G * c]])
        })
        .hamiltonian_xt(|_, _, _, _| vec![0.0, 0.0, 0.0])
        .hamiltonian_ut(|_, _, _, _| vec![0.0])
        .build()
        .expect("static problem definition");
    BenchmarkCase {
        name: "example3",
        problem: CaseProblem::Ocp(problem),
        default_n: 101,
        default_tau_max: 400.0,
        default_method: Method::ImplicitStiff,
        default_snapshot_every: 1.0,
        reference: None,
        reference_tf: Some(0.8165),
        cov_gains: None,
        zs_gains: Some(ZsGains::new(vec![1.0; 7], 1.0).expect("positive gains")),
        linear_guess: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{OcpSample, VariationalSample};

    #[test]
    fn example1_reference_boundary_values() {
        let case = example1();
        let r0 = case.reference_at(0.0).unwrap();
        assert!(r0[0].abs() < 1e-15);
        let rf = case.reference_at(PI).unwrap();
        assert!(rf[0].abs() < 1e-15);
        // Midpoint also happens to vanish: cos(π/2) + (2/π)(π/2) − 1 = 0.
        let rm = case.reference_at(PI / 2.0).unwrap();
        assert!(rm[0].abs() < 1e-15);
    }

    #[test]
    fn example2_reference_values() {
        let case = example2();
        let r0 = case.reference_at(0.0).unwrap();
        assert_eq!(r0[4], -3.5); // u(0)
        assert_eq!(r0[2], 3.0); // lam1 is constant
        let r2 = case.reference_at(2.0).unwrap();
        assert!(r2[0].abs() < 1e-12); // x1(2) = 4 − 7 + 2 + 1 = 0
        assert!(r2[1].abs() < 1e-12); // x2(2) = 6 − 7 + 1 = 0
        let r1 = case.reference_at(1.3).unwrap();
        assert_eq!(r1[2], 3.0);
    }

    #[test]
    fn example3_dynamics_at_rest() {
        let case = example3();
        let p = match &case.problem {
            CaseProblem::Ocp(p) => p,
            _ => unreachable!(),
        };
        for u in [0.0, 0.4, -1.1] {
            let f = p.dynamics(&[0.3, -0.7, 0.0], &[u], 0.0);
            assert_eq!(f[0], 0.0);
            assert_eq!(f[1], 0.0);
            assert!((f[2] - 10.0 * u.cos()).abs() < 1e-15);
        }
        assert_eq!(case.reference_tf, Some(0.8165));
    }

    #[test]
    fn example3_printed_guess_respects_pins() {
        let case = example3();
        let grid = case.default_grid().unwrap();
        let s = case.initial_ocp(&grid).unwrap();
        // x(0) pinned at the origin even though the printed ramp starts at 1.
        assert_eq!(s.x.node(0), &[0.0, 0.0, 0.0]);
        // Prescribed terminal position; free terminal speed keeps the ramp.
        let last = grid.n_nodes() - 1;
        assert_eq!(s.x.value(last, 0), 2.0);
        assert_eq!(s.x.value(last, 1), -2.0);
        assert_eq!(s.x.value(last, 2), 0.0);
        // Transversality pin of the free component: λ_V(tf) = φ_x = 0.
        assert_eq!(s.lam.value(last, 2), 0.0);
        // Interior nodes carry the published ramp.
        assert!((s.x.value(1, 0) - (1.0 - grid.time_at(1))).abs() < 1e-15);
        assert_eq!(s.tf, Some(1.0));
    }

    #[test]
    fn example3_linear_guess_is_boundary_consistent() {
        let mut case = example3();
        case.linear_guess = true;
        let grid = case.default_grid().unwrap();
        let s = case.initial_ocp(&grid).unwrap();
        let mid = grid.n_nodes() / 2;
        assert!((s.x.value(mid, 0) - 1.0).abs() < 1e-12);
        assert!((s.x.value(mid, 1) + 1.0).abs() < 1e-12);
        assert_eq!(s.x.value(mid, 2), 0.0);
    }

    #[test]
    fn all_bundles_pass_partial_verification() {
        let case1 = example1();
        if let CaseProblem::Variational(p) = &case1.problem {
            let samples = vec![
                VariationalSample {
                    y: vec![0.2],
                    ydot: vec![-0.4],
                    t: 0.8,
                },
                VariationalSample {
                    y: vec![-0.6],
                    ydot: vec![1.1],
                    t: 2.4,
                },
            ];
            let rep = p.verify_partials(&samples, 1e-6).unwrap();
            assert!(rep.passed(), "{rep}");
        }
        for case in [example2(), example3()] {
            if let CaseProblem::Ocp(p) = &case.problem {
                let samples = vec![
                    OcpSample {
                        x: vec![0.5; p.n()],
                        u: vec![0.3; p.m()],
                        lam: vec![-0.8; p.n()],
                        t: 0.7,
                    },
                    OcpSample {
                        x: (0..p.n()).map(|i| 0.2 * i as f64 - 0.5).collect(),
                        u: vec![-1.2; p.m()],
                        lam: (0..p.n()).map(|i| 0.4 * i as f64 + 0.1).collect(),
                        t: 0.2,
                    },
                ];
                let rep = p.verify_partials(&samples, 1e-6).unwrap();
                assert!(rep.passed(), "{} {rep}", case.name);
            }
        }
    }
}
