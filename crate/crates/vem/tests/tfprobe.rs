use vem::builtins::{self, CaseProblem};
use vem::grid::TimeGrid;
use vem::zs::{apply_pins, j1_value, tf_rate, FlowState, ZsGains};
use vem::grid::Profile;

#[test]
fn probe_tf_sensitivity_at_guess() {
    let case = builtins::example3();
    let p = match &case.problem { CaseProblem::Ocp(p) => p, _ => unreachable!() };
    let gains = ZsGains::new(vec![1.0; 7], 1.0).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 101).unwrap();
    let mut s = FlowState {
        x: Profile::sampled("x", 3, &grid, |t| vec![1.0 - t, 1.0 - t, 0.0]),
        lam: Profile::zeros("lam", 3, 101),
        u: Profile::zeros("u", 1, 101),
        tf: Some(1.0),
    };
    apply_pins(p, &grid, &mut s);
    let rate = tf_rate(p, &s, &grid, &gains).unwrap();
    eprintln!("printed guess: tf_rate = {rate:.4}");
    for tf_probe in [0.6, 0.8, 0.9, 1.0, 1.1, 1.3, 1.6] {
        let mut sp = s.clone();
        sp.tf = Some(tf_probe);
        eprintln!("  J1(tf={tf_probe}) = {:.4}", j1_value(p, &sp, &grid).unwrap());
    }

    let s_lin = {
        let mut s = FlowState::default_guess(p, &grid);
        s.tf = Some(1.0);
        apply_pins(p, &grid, &mut s);
        s
    };
    let rate_lin = tf_rate(p, &s_lin, &grid, &gains).unwrap();
    eprintln!("linear guess: tf_rate = {rate_lin:.4}");
    for tf_probe in [0.6, 0.8, 1.0, 1.3] {
        let mut sp = s_lin.clone();
        sp.tf = Some(tf_probe);
        eprintln!("  J1_lin(tf={tf_probe}) = {:.4}", j1_value(p, &sp, &grid).unwrap());
    }
}
