use vem::builtins::{self, CaseProblem};
use vem::integrate::evolve_ocp;
use vem::zs::{j1_value, zs_rates, ZsGains};
use vem::fd;

#[test]
fn probe_stalled_state() {
    let case = builtins::example3();
    let grid = case.default_grid().unwrap();
    let p = match &case.problem { CaseProblem::Ocp(p) => p, _ => unreachable!() };
    let s0 = case.initial_ocp(&grid).unwrap();
    let gains = case.zs_gains().unwrap();
    let mut opts = case.default_options();
    opts.tau_max = 400.0;
    opts.residual_tol = 1e-30;
    opts.max_steps = 2600;
    opts.snapshot_every = 1000.0;
    let out = evolve_ocp(p, &s0, &grid, gains, &opts).unwrap();
    let s = out.state.clone();
    let g = out.grid;
    eprintln!("tau={:.3} tf={:.4} J1={:.4e}", out.diagnostics.last().unwrap().tau, s.tf.unwrap(),
        j1_value(p, &s, &g).unwrap());
    let nn = g.n_nodes();
    for i in (0..nn).step_by(10).chain([nn-1]) {
        eprintln!("node {i:3}: x=({:7.3},{:7.3},{:7.3}) lam=({:7.3},{:7.3},{:7.3}) u={:7.3}",
            s.x.value(i,0), s.x.value(i,1), s.x.value(i,2),
            s.lam.value(i,0), s.lam.value(i,1), s.lam.value(i,2), s.u.value(i,0));
    }
    // Exact FD gradient norm of the discretized functional over all free values.
    let mut gmax: f64 = 0.0;
    let mut gsum = 0.0;
    let mut count = 0;
    let delta = 1e-6;
    for i in 0..nn {
        for (block, dim) in [(0usize, 3usize), (1, 3), (2, 1)] {
            for c in 0..dim {
                // Skip pinned entries.
                if block == 0 && (i == 0 || (i == nn - 1 && c < 2)) { continue; }
                if block == 1 && i == nn - 1 && c == 2 { continue; }
                let probe = |bump: f64| {
                    let mut sp = s.clone();
                    match block {
                        0 => sp.x.set(i, c, s.x.value(i, c) + bump),
                        1 => sp.lam.set(i, c, s.lam.value(i, c) + bump),
                        _ => sp.u.set(i, c, s.u.value(i, c) + bump),
                    }
                    j1_value(p, &sp, &g).unwrap()
                };
                let gr = (probe(delta) - probe(-delta)) / (2.0 * delta);
                gmax = gmax.max(gr.abs());
                gsum += gr * gr;
                count += 1;
            }
        }
    }
    let _ = fd::step(1.0);
    eprintln!("FD gradient of J1: max |entry| = {gmax:.4e}, l2 = {:.4e} over {count} free values", gsum.sqrt());
    let rates = zs_rates(p, &s, &g, gains, false).unwrap();
    eprintln!("rate max: x={:.3e} lam={:.3e} u={:.3e} dtf={:.3e}",
        rates.x.max_abs(), rates.lam.max_abs(), rates.u.max_abs(), rates.dtf.unwrap());
}
