use markov_backstep::kernels::{gain_slice, solve_kernels, GainSlice};
use markov_backstep::sim::{l2_norm, simulate, Controller, SimConfig};
use markov_backstep::traffic::{
    arz_control, build_scenario, riemann_forward, riemann_inverse, simulate_direct, TrafficConfig,
    TrafficScenario,
};

fn scenario() -> TrafficScenario {
    build_scenario(&TrafficConfig::default()).unwrap()
}

#[test]
fn physical_control_law_matches_riemann_feedback() {
    let sc = scenario();
    let nom = sc.nominal_params();
    let g = gain_slice(&solve_kernels(&nom, 64).unwrap());
    let ctrl = Controller::exact(g.clone(), nom.rho0);
    for k in 1..6 {
        let m = 40 * k;
        let q: Vec<f64> = (0..=m)
            .map(|i| 0.05 * (0.3 * (i * k) as f64).sin())
            .collect();
        let vt: Vec<f64> = (0..=m)
            .map(|i| 0.5 * (0.2 * i as f64 + k as f64).cos())
            .collect();
        let (u, v) = riemann_forward(&q, &vt, &sc.nominal).unwrap();
        let a = ctrl.input(&u, &v);
        let b = arz_control(&q, &vt, &g, &sc.nominal).unwrap();
        let scale = l2_norm(&q, &vt);
        assert!((a - b).abs() <= 1e-6 * scale, "m={m}: {a} vs {b}");
    }
}

#[test]
fn zero_kernels_reduce_to_boundary_terms() {
    let sc = scenario();
    let q = [0.0, 0.01, -0.02, 0.03];
    let vt = [0.1, -0.3, 0.2, 0.4];
    let u = arz_control(&q, &vt, &GainSlice::zeros(4), &sc.nominal).unwrap();
    assert!((u - (sc.nominal.r() * vt[3] - q[3])).abs() < 1e-15);
}

/// Both routes solved at the same resolution; the Riemann route is then
/// mapped back to `(q~, v~)`.
fn cross_check(gains: Option<&GainSlice>, horizon: f64, m: usize) -> (f64, f64) {
    let sc = scenario();
    let nom = sc.nominal_params();
    let (q0, v0) = sc.initial_deviation(m);
    let (qd, vd) = simulate_direct(&sc.nominal, &q0, &v0, gains, horizon).unwrap();
    let ctrl = match gains {
        Some(g) => Controller::exact(g.clone(), nom.rho0),
        None => Controller::open_loop(),
    };
    let cfg = SimConfig::new(m, horizon, horizon);
    let tr = simulate(&sc.initial_snapshot(m), &sc.nominal_path(), &ctrl, &cfg).unwrap();
    let last = tr.snapshots.last().unwrap();
    let (qr, vr) = riemann_inverse(&last.u, &last.v, &sc.nominal).unwrap();
    let dq: Vec<f64> = qd.iter().zip(&qr).map(|(a, b)| a - b).collect();
    let dv: Vec<f64> = vd.iter().zip(&vr).map(|(a, b)| a - b).collect();
    let zero = vec![0.0; m + 1];
    let rel_q = l2_norm(&dq, &zero) / l2_norm(&qr, &zero);
    let rel_v = l2_norm(&dv, &zero) / l2_norm(&vr, &zero);
    (rel_q, rel_v)
}

#[test]
fn direct_and_riemann_routes_agree_open_loop() {
    let (q, v) = cross_check(None, 30.0, 400);
    assert!(q < 0.05 && v < 0.05, "q {q:e} v {v:e}");
}

#[test]
fn direct_and_riemann_routes_agree_closed_loop() {
    let sc = scenario();
    let g = gain_slice(&solve_kernels(&sc.nominal_params(), 64).unwrap());
    let (q, v) = cross_check(Some(&g), 30.0, 400);
    assert!(q < 0.05 && v < 0.05, "q {q:e} v {v:e}");
}

#[test]
fn direct_route_converges_toward_riemann_route() {
    let (q1, v1) = cross_check(None, 20.0, 100);
    let (q2, v2) = cross_check(None, 20.0, 400);
    assert!(q2 < q1 && v2 < v1, "{q1:e}->{q2:e}, {v1:e}->{v2:e}");
}

#[test]
fn nominal_traffic_loop_settles_after_transport_time() {
    let sc = scenario();
    let nom = sc.nominal_params();
    let ctrl = Controller::exact(gain_slice(&solve_kernels(&nom, 64).unwrap()), nom.rho0);
    let tf = nom.transport_time();
    let cfg = SimConfig::new(sc.grid_m, 1.2 * tf, 1.0);
    let tr = simulate(
        &sc.initial_snapshot(sc.grid_m),
        &sc.nominal_path(),
        &ctrl,
        &cfg,
    )
    .unwrap();
    let open = simulate(
        &sc.initial_snapshot(sc.grid_m),
        &sc.nominal_path(),
        &Controller::open_loop(),
        &cfg,
    )
    .unwrap();
    let end = |t: &[f64]| t.last().unwrap() / t[0];
    assert!(end(&tr.norms) < 1e-3, "{:e}", end(&tr.norms));
    assert!(end(&open.norms) > 1e-2, "{:e}", end(&open.norms));
    // Physical fields stay positive along the way.
    for s in &tr.snapshots {
        let f = sc.fields(s).unwrap();
        assert_eq!(f.nonpositive_speed, 0);
        assert!(f.rho.iter().all(|r| *r > 0.0));
    }
}

#[test]
fn stochastic_closed_loop_decays_per_seed() {
    let sc = scenario();
    let nom = sc.nominal_params();
    let ctrl = Controller::exact(gain_slice(&solve_kernels(&nom, 64).unwrap()), nom.rho0);
    let mut cfg = SimConfig::new(sc.grid_m, sc.horizon, 5.0);
    cfg.keep_snapshots = false;
    let init = sc.initial_snapshot(sc.grid_m);
    let mut ratios: Vec<f64> = (0..10)
        .map(|seed| {
            let path = sc.delta_path(seed).unwrap();
            assert!(path.jump_times.len() > 100);
            let tr = simulate(&init, &path, &ctrl, &cfg).unwrap();
            tr.norms.last().unwrap() / tr.norms[0]
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[5] < 0.05, "{ratios:?}");
}
