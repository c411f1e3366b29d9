use std::time::Instant;
use vem::builtins::{self, CaseProblem};
use vem::grid::TimeGrid;
use vem::linalg::{LuFactors, Mat};
use vem::zs::{zs_rates, ZsGains};

#[test]
fn probe_costs() {
    let case = builtins::example3();
    let grid = case.default_grid().unwrap();
    let p = match &case.problem { CaseProblem::Ocp(p) => p, _ => unreachable!() };
    let s0 = case.initial_ocp(&grid).unwrap();
    let gains = case.zs_gains().unwrap();

    let t = Instant::now();
    let reps = 200;
    for _ in 0..reps {
        let _ = zs_rates(p, &s0, &grid, gains, false).unwrap();
    }
    let per_rhs = t.elapsed() / reps;
    eprintln!("zs_rates (N=101, n=3, m=1): {per_rhs:?} per eval");

    // Dense LU at the packed dimension of example 3.
    let dim = 702;
    let mut a = Mat::zeros(dim, dim);
    let mut seed = 0x9e3779b97f4a7c15u64;
    let mut rnd = || {
        seed ^= seed << 13;
        seed ^= seed >> 7;
        seed ^= seed << 17;
        (seed as f64 / u64::MAX as f64) - 0.5
    };
    for i in 0..dim {
        for j in 0..dim {
            a.set(i, j, rnd() * 0.01);
        }
        a.set(i, i, 1.0 + rnd().abs());
    }
    let t = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let _ = LuFactors::factor(&a).ok().unwrap();
    }
    eprintln!("LU factor {dim}x{dim}: {:?} per factorization", t.elapsed() / reps);

    let _ = TimeGrid::new(0.0, 1.0, 11).unwrap();
}
