//! Acceptance suite: every shipped claim of the solver, one test per
//! criterion, each printing a pass line with the measured numbers.
//!
//! The suite drives the public API exactly the way the CLI does, verifies
//! the benchmark reproductions against their analytic references at the
//! stated tolerances, and cross-checks the flow fields against independent
//! finite-difference oracles of the discretized functionals.

mod common;

use common::SplitMix64;
use std::f64::consts::PI;

use vem::builtins::{self, CaseProblem};
use vem::cov::{cov_rhs, euler_lagrange_residual, functional_j, CovGains, CovVariant};
use vem::grid::{trapezoid, Profile, TimeGrid};
use vem::integrate::{evolve_ocp, evolve_variational, EvolveOptions, Method, Termination};
use vem::problem::{OcpProblem, VariationalProblem};
use vem::zs::{
    apply_pins, j1_value, terminal_defect, tf_rate, zs_rates, FlowState, ZsGains,
};

fn example1_parts() -> (builtins::BenchmarkCase, VariationalProblem) {
    let case = builtins::example1();
    let p = match &case.problem {
        CaseProblem::Variational(p) => p.clone(),
        _ => unreachable!(),
    };
    (case, p)
}

fn example2_parts() -> (builtins::BenchmarkCase, OcpProblem) {
    let case = builtins::example2();
    let p = match &case.problem {
        CaseProblem::Ocp(p) => p.clone(),
        _ => unreachable!(),
    };
    (case, p)
}

fn example3_parts() -> (builtins::BenchmarkCase, OcpProblem) {
    let case = builtins::example3();
    let p = match &case.problem {
        CaseProblem::Ocp(p) => p.clone(),
        _ => unreachable!(),
    };
    (case, p)
}

/// Options that integrate to exactly tau_max (the residual check never
/// triggers first).
fn to_horizon(method: Method, tau_max: f64) -> EvolveOptions {
    let mut opts = EvolveOptions::new(method);
    opts.tau_max = tau_max;
    opts.residual_tol = 1e-30;
    opts
}

#[test]
fn criterion_1_scalar_benchmark_reproduction() {
    let (case, p) = example1_parts();
    let grid = case.grid(101).unwrap();
    let guess = Profile::zeros("y", 1, 101);
    let gains = CovGains::uniform(1, 0.1).unwrap();

    let started = std::time::Instant::now();
    let at6 = evolve_variational(&p, &guess, &grid, &gains, &to_horizon(Method::ExplicitRk45, 6.0))
        .unwrap();
    let err6 = case.max_error_profile(&at6.state, &grid).unwrap();

    let at20 =
        evolve_variational(&p, &guess, &grid, &gains, &to_horizon(Method::ExplicitRk45, 20.0))
            .unwrap();
    let err20 = case.max_error_profile(&at20.state, &grid).unwrap();
    let wall = started.elapsed();

    assert!(err6 <= 1e-2, "error at tau=6: {err6:.3e}");
    assert!(err20 <= 1e-3, "error at tau=20: {err20:.3e}");
    assert!(wall.as_secs_f64() <= 10.0, "runtime {wall:?}");
    println!(
        "criterion 1 PASS: max error {err6:.3e} at tau=6 (<= 1e-2), {err20:.3e} at tau=20 \
         (<= 1e-3), runtime {wall:.2?} (<= 10 s)"
    );
}

#[test]
fn criterion_2_scalar_benchmark_descent() {
    let (_case, p) = example1_parts();
    let grid = TimeGrid::new(0.0, PI, 101).unwrap();
    let guess = Profile::zeros("y", 1, 101);
    let gains = CovGains::uniform(1, 0.1).unwrap();
    let out = evolve_variational(&p, &guess, &grid, &gains, &to_horizon(Method::ExplicitRk45, 20.0))
        .unwrap();

    // Oracle: trapezoid at N = 10001 on the closed-form solution and its
    // analytic derivative.
    let fine = TimeGrid::new(0.0, PI, 10001).unwrap();
    let f_exact = Profile::sampled_scalar("F", &fine, |t| {
        let y = t.cos() + (2.0 / PI) * t - 1.0;
        let yd = -t.sin() + 2.0 / PI;
        yd * yd - 2.0 * y * t.cos()
    });
    let j_min = trapezoid(&fine, &f_exact).unwrap();

    // Monotone non-increase across records (per-step slack is certified by
    // the descent flags plus the recorded worst rise).
    assert!(out.max_step_rise <= 1e-9, "max step rise {:.2e}", out.max_step_rise);
    assert!(out.diagnostics.iter().all(|r| r.descent_ok));
    for w in out.diagnostics.windows(2) {
        assert!(
            w[1].j <= w[0].j + 1e-9,
            "J rose between records: {} -> {}",
            w[0].j,
            w[1].j
        );
    }
    let j_final = out.diagnostics.last().unwrap().j;
    let gap = (j_final - j_min).abs();
    assert!(gap <= 1e-3, "final J {j_final} vs reference {j_min} (gap {gap:.3e})");
    println!(
        "criterion 2 PASS: J non-increasing over {} records, final gap to the fine-quadrature \
         minimum {gap:.3e} (<= 1e-3)",
        out.diagnostics.len()
    );
}

#[test]
fn criterion_3_linear_quadratic_reproduction() {
    let (case, p) = example2_parts();
    let grid = case.grid(41).unwrap();
    let s0 = case.initial_ocp(&grid).unwrap();
    let gains = ZsGains::new(vec![1.0; 5], 1.0).unwrap();

    assert_eq!(s0.flow_dimension(), 205, "integrated state dimension");

    let started = std::time::Instant::now();
    let out = evolve_ocp(&p, &s0, &grid, &gains, &to_horizon(Method::ImplicitStiff, 300.0))
        .unwrap();
    let wall = started.elapsed();

    let labels = case.component_labels();
    let mut errs = vec![0.0f64; labels.len()];
    for i in 0..grid.n_nodes() {
        let r = case.reference_at(grid.time_at(i)).unwrap();
        for c in 0..2 {
            errs[c] = errs[c].max((out.state.x.value(i, c) - r[c]).abs());
            errs[2 + c] = errs[2 + c].max((out.state.lam.value(i, c) - r[2 + c]).abs());
        }
        errs[4] = errs[4].max((out.state.u.value(i, 0) - r[4]).abs());
    }
    for (l, e) in labels.iter().zip(&errs) {
        assert!(*e <= 2e-2, "{l} error {e:.3e} exceeds 2e-2");
    }
    assert!(wall.as_secs_f64() <= 60.0, "runtime {wall:?}");
    println!(
        "criterion 3 PASS: 205 integrated values, max errors (x1 {:.1e}, x2 {:.1e}, lam1 {:.1e}, \
         lam2 {:.1e}, u {:.1e}) all <= 2e-2, runtime {wall:.2?} (<= 60 s)",
        errs[0], errs[1], errs[2], errs[3], errs[4]
    );
}

#[test]
fn criterion_5_equilibrium_property() {
    // Loading the closed-form solutions must leave flow rates at the
    // discretization floor (shrinking ~4x per node doubling), and o(1)
    // perturbations must wake the flow up by at least a decade.
    let (_c1, p1) = example1_parts();
    let gains1 = CovGains::uniform(1, 0.1).unwrap();
    let cov_norm = |n: usize| {
        let grid = TimeGrid::new(0.0, PI, n).unwrap();
        let y = Profile::sampled_scalar("y", &grid, |t| t.cos() + (2.0 / PI) * t - 1.0);
        cov_rhs(&p1, &y, &grid, &gains1).unwrap().max_abs()
    };
    let c1: Vec<f64> = [51usize, 101, 201].iter().map(|&n| cov_norm(n)).collect();
    for w in c1.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.5..=4.5).contains(&ratio), "scalar case ratio {ratio}");
    }

    let (case2, p2) = example2_parts();
    let gains2 = ZsGains::new(vec![1.0; 5], 1.0).unwrap();
    let zs_norm = |n: usize| {
        let grid = TimeGrid::new(0.0, 2.0, n).unwrap();
        let s = analytic_lq_state(&case2, &grid);
        let rates = zs_rates(&p2, &s, &grid, &gains2, false).unwrap();
        rates.x.max_abs().max(rates.lam.max_abs()).max(rates.u.max_abs())
    };
    let c2: Vec<f64> = [51usize, 101, 201].iter().map(|&n| zs_norm(n)).collect();
    for w in c2.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.5..=4.5).contains(&ratio), "control case ratio {ratio}");
    }

    // Randomized perturbations of magnitude 0.1 on the free values.
    let mut rng = SplitMix64::new(0x5eed_0001);
    let grid = TimeGrid::new(0.0, PI, 101).unwrap();
    let mut y = Profile::sampled_scalar("y", &grid, |t| t.cos() + (2.0 / PI) * t - 1.0);
    let equilibrium = cov_rhs(&p1, &y, &grid, &gains1).unwrap().max_abs();
    for i in 1..100 {
        let v = y.value(i, 0) + rng.range(-0.1, 0.1);
        y.set(i, 0, v);
    }
    let perturbed = cov_rhs(&p1, &y, &grid, &gains1).unwrap().max_abs();
    assert!(
        perturbed >= 10.0 * equilibrium,
        "perturbed rate {perturbed:.3e} vs equilibrium {equilibrium:.3e}"
    );

    let gridc = TimeGrid::new(0.0, 2.0, 41).unwrap();
    let mut s = analytic_lq_state(&case2, &gridc);
    let eq2 = {
        let r = zs_rates(&p2, &s, &gridc, &gains2, false).unwrap();
        r.x.max_abs().max(r.lam.max_abs()).max(r.u.max_abs())
    };
    for i in 0..41 {
        for c in 0..2 {
            if i != 0 && i != 40 {
                let v = s.x.value(i, c) + rng.range(-0.1, 0.1);
                s.x.set(i, c, v);
            }
            let v = s.lam.value(i, c) + rng.range(-0.1, 0.1);
            s.lam.set(i, c, v);
        }
        let v = s.u.value(i, 0) + rng.range(-0.1, 0.1);
        s.u.set(i, 0, v);
    }
    let pert2 = {
        let r = zs_rates(&p2, &s, &gridc, &gains2, false).unwrap();
        r.x.max_abs().max(r.lam.max_abs()).max(r.u.max_abs())
    };
    assert!(pert2 >= 10.0 * eq2, "perturbed {pert2:.3e} vs equilibrium {eq2:.3e}");
    println!(
        "criterion 5 PASS: equilibrium rates shrink 4x per doubling (ratios {:.2}/{:.2} scalar, \
         {:.2}/{:.2} control); 0.1-perturbations wake the flow by >= 10x ({:.0}x, {:.0}x)",
        c1[0] / c1[1],
        c1[1] / c1[2],
        c2[0] / c2[1],
        c2[1] / c2[2],
        perturbed / equilibrium,
        pert2 / eq2
    );
}

fn analytic_lq_state(case: &builtins::BenchmarkCase, grid: &TimeGrid) -> FlowState {
    let nn = grid.n_nodes();
    let mut x = Profile::zeros("x", 2, nn);
    let mut lam = Profile::zeros("lam", 2, nn);
    let mut u = Profile::zeros("u", 1, nn);
    for i in 0..nn {
        let r = case.reference_at(grid.time_at(i)).unwrap();
        x.set(i, 0, r[0]);
        x.set(i, 1, r[1]);
        lam.set(i, 0, r[2]);
        lam.set(i, 1, r[3]);
        u.set(i, 0, r[4]);
    }
    FlowState { x, lam, u, tf: None }
}

#[test]
fn criterion_6_gradient_oracle() {
    // Interior rates of the control flow against the finite-difference
    // gradient of the trapezoid-discretized squared-residual functional, at
    // three randomized smooth states; then the terminal-time sensitivity
    // against the difference slope of the free-horizon functional.
    let (case2, p2) = example2_parts();
    let grid = TimeGrid::new(0.0, 2.0, 41).unwrap();
    let k = 1.0;
    let gains = ZsGains::new(vec![k; 5], 1.0).unwrap();
    let h = grid.h();
    let tol = (10.0 * h * h).max(1e-4);
    let mut rng = SplitMix64::new(0x5eed_0006);
    let mut worst_interior = 0.0f64;

    for state_idx in 0..3 {
        let (a1, a2, a3) = (
            rng.range(-0.4, 0.4),
            rng.range(-0.4, 0.4),
            rng.range(-0.4, 0.4),
        );
        let (w1, w2) = (rng.range(0.6, 1.8), rng.range(0.6, 1.8));
        let s = {
            let mut s = analytic_lq_state(&case2, &grid);
            for i in 0..41 {
                let t = grid.time_at(i);
                for c in 0..2 {
                    let v = s.x.value(i, c) + a1 * (w1 * t + c as f64).sin();
                    s.x.set(i, c, v);
                    let vl = s.lam.value(i, c) + a2 * (w2 * t - c as f64).cos();
                    s.lam.set(i, c, vl);
                }
                let vu = s.u.value(i, 0) + a3 * (w1 * t).cos();
                s.u.set(i, 0, vu);
            }
            s
        };
        let rates = zs_rates(&p2, &s, &grid, &gains, false).unwrap();
        let delta = 1e-6;
        // Stencil-interior nodes: the one-sided endpoint rows reach two
        // nodes into the domain, so the exact identity starts at node 3.
        for i in (3..38).step_by(3) {
            let w = grid.trapezoid_weight(i);
            for (block, dim) in [(0usize, 2usize), (1, 2), (2, 1)] {
                for c in 0..dim {
                    let probe = |bump: f64| {
                        let mut sp = s.clone();
                        match block {
                            0 => sp.x.set(i, c, s.x.value(i, c) + bump),
                            1 => sp.lam.set(i, c, s.lam.value(i, c) + bump),
                            _ => sp.u.set(i, c, s.u.value(i, c) + bump),
                        }
                        j1_value(&p2, &sp, &grid).unwrap()
                    };
                    let grad = (probe(delta) - probe(-delta)) / (2.0 * delta);
                    let expect = -k / w * grad;
                    let got = match block {
                        0 => rates.x.value(i, c),
                        1 => rates.lam.value(i, c),
                        _ => rates.u.value(i, c),
                    };
                    let rel = (got - expect).abs() / got.abs().max(expect.abs()).max(1.0);
                    worst_interior = worst_interior.max(rel);
                    assert!(
                        rel <= tol,
                        "state {state_idx} node {i} block {block} comp {c}: \
                         rate {got} vs gradient {expect} (rel {rel:.2e})"
                    );
                }
            }
        }
    }

    // Terminal-time sensitivity on the free-horizon benchmark at 3 states.
    let (_case3, p3) = example3_parts();
    let grid3 = TimeGrid::new(0.0, 1.0, 101).unwrap();
    let gains3 = ZsGains::new(vec![1.0; 7], 1.0).unwrap();
    let mut worst_tf = 0.0f64;
    for state_idx in 0..3 {
        let (a, b) = (rng.range(0.1, 0.5), rng.range(0.5, 2.0));
        let mut s = FlowState {
            x: Profile::sampled("x", 3, &grid3, |t| {
                vec![2.0 * t + a * (b * t).sin(), -2.0 * t + a * t * t, 3.0 * t - a * t]
            }),
            lam: Profile::sampled("lam", 3, &grid3, |t| {
                vec![a * t, -0.3 * a, a * (1.0 - t) * 0.5]
            }),
            u: Profile::sampled("u", 1, &grid3, |t| vec![0.4 * a + 0.2 * t]),
            tf: Some(0.8 + 0.3 * state_idx as f64),
        };
        apply_pins(&p3, &grid3, &mut s);
        let g_analytic = -tf_rate(&p3, &s, &grid3, &gains3).unwrap();
        let tf = s.tf.unwrap();
        let delta = 1e-6 * tf.max(1.0);
        let probe = |tf_probe: f64| {
            let mut sp = s.clone();
            sp.tf = Some(tf_probe);
            j1_value(&p3, &sp, &grid3).unwrap()
        };
        let g_fd = (probe(tf + delta) - probe(tf - delta)) / (2.0 * delta);
        let rel = (g_analytic - g_fd).abs() / g_fd.abs().max(1.0);
        worst_tf = worst_tf.max(rel);
        assert!(
            rel <= 1e-4,
            "state {state_idx}: sensitivity {g_analytic} vs fd {g_fd} (rel {rel:.2e})"
        );
    }
    println!(
        "criterion 6 PASS: interior rates match the discrete-gradient oracle within {tol:.1e} \
         (worst {worst_interior:.1e}); terminal-time sensitivity matches its difference slope \
         within 1e-4 (worst {worst_tf:.1e})"
    );
}

#[test]
fn criterion_8_sign_variant_reaches_small_residual() {
    // Signed flow at eps = 0 with fixed-step marching: the residual must
    // come down to 1e-2 within tau <= 50 and stay bounded afterwards.
    let (_case, p) = example1_parts();
    let grid = TimeGrid::new(0.0, PI, 101).unwrap();
    let guess = Profile::zeros("y", 1, 101);
    let gains = CovGains::new(vec![0.1], CovVariant::SignFiniteTime { epsilon: 0.0 }).unwrap();

    // The chattering band of the residual scales like 2K dtau / h^2, so the
    // step must keep the band under the 1e-2 target.
    let dtau = 2.5e-5;
    let mut opts = EvolveOptions::new(Method::FixedStep { dtau });
    opts.tau_max = 50.0;
    opts.residual_tol = 1e-30;
    opts.max_steps = 2_100_000;
    opts.snapshot_every = 0.5;
    // Chattering makes J wiggle at the step scale; monotonicity to 1e-9 is
    // an asymptotic-variant property, so the guard runs at a loose slack.
    opts.descent_slack = 1e-3;
    let out = evolve_variational(&p, &guess, &grid, &gains, &opts).unwrap();

    let hit = out
        .diagnostics
        .iter()
        .find(|r| r.residual_norm <= 1e-2)
        .map(|r| r.tau);
    let hit_tau = hit.expect("residual never reached 1e-2 by tau = 50");
    // No divergence afterwards: every later record stays within the
    // chattering band around the threshold.
    let after = out.diagnostics.iter().filter(|r| r.tau >= hit_tau);
    let worst_after = after.fold(0.0f64, |m, r| m.max(r.residual_norm));
    assert!(
        worst_after <= 5e-2,
        "residual wandered to {worst_after:.3e} after first hitting 1e-2"
    );
    println!(
        "criterion 8 PASS: signed flow reached residual 1e-2 at tau = {hit_tau:.2} (<= 50) and \
         stayed <= {worst_after:.2e} afterwards"
    );
}
