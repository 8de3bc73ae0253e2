use markov_backstep::kernels::{gain_slice, solve_kernels, GainSlice, KernelSet};
use markov_backstep::markov::{ConstantRates, DeltaPath, MarkovChain, PathSource, ProductChains};
use markov_backstep::params::{CouplingProfile, NominalParams, StochasticParams};
use markov_backstep::sim::{l1_norm, simulate, Controller, SimConfig, Snapshot};
use markov_backstep::stability::{
    lyapunov_value, mc_mean_square, target_coordinates, LyapunovParams, McSetup,
};
use std::sync::Arc;

fn initial(m: usize) -> Snapshot {
    Snapshot::from_fn(
        m,
        |x| (std::f64::consts::PI * x).sin() + 0.5 * x,
        |x| 1.0 - x * x,
    )
}

fn exp_plant() -> NominalParams {
    let mut n = NominalParams::constant(1.0, 2.0, 0.0, 0.0, -2.0, 0.4346);
    n.sigma_minus0 = CouplingProfile::Exponential {
        amplitude: -0.8,
        rate: 0.8,
    };
    n
}

/// Largest `|w(t)| / |w(0)|` for `t >= t_check`.
fn ratio_after(
    nom: &NominalParams,
    ctrl: &Controller,
    m: usize,
    t_check: f64,
    horizon: f64,
) -> f64 {
    let path = DeltaPath::constant(nom.as_delta(), horizon);
    let tr = simulate(&initial(m), &path, ctrl, &SimConfig::new(m, horizon, 0.02)).unwrap();
    tr.times
        .iter()
        .zip(&tr.norms)
        .filter(|(t, _)| **t >= t_check - 1e-9)
        .map(|(_, n)| n / tr.norms[0])
        .fold(0.0, f64::max)
}

#[test]
fn exact_gains_settle_after_one_transport_period() {
    for nom in [
        NominalParams::constant(1.0, 2.0, 1.5, -1.2, 0.8, 0.9),
        exp_plant(),
    ] {
        let tf = nom.transport_time();
        let ctrl = Controller::exact(gain_slice(&solve_kernels(&nom, 64).unwrap()), nom.rho0);
        let closed = ratio_after(&nom, &ctrl, 200, tf + 0.2, tf + 0.4);
        let open = ratio_after(&nom, &Controller::open_loop(), 200, tf + 0.2, tf + 0.4);
        assert!(closed < 1e-3, "closed {closed:e}");
        assert!(open > 1e-2, "open {open:e}");
    }
}

#[test]
fn settling_needs_the_full_transport_period() {
    // Before tf the outlet has not yet flushed the initial data.
    let nom = NominalParams::constant(1.0, 2.0, 1.5, -1.2, 0.8, 0.9);
    let ctrl = Controller::exact(gain_slice(&solve_kernels(&nom, 64).unwrap()), nom.rho0);
    let early = ratio_after(
        &nom,
        &ctrl,
        200,
        0.5 * nom.transport_time(),
        0.5 * nom.transport_time() + 0.02,
    );
    assert!(early > 1e-2, "{early:e}");
}

fn perturbed(g: &GainSlice, eps: f64) -> GainSlice {
    let n = g.len();
    let wiggle = |j: usize, phase: f64| eps * ((7.0 * j as f64 / n as f64 + phase) * 3.0).sin();
    GainSlice {
        kvu: g
            .kvu
            .iter()
            .enumerate()
            .map(|(j, k)| k + wiggle(j, 0.0))
            .collect(),
        kvv: g
            .kvv
            .iter()
            .enumerate()
            .map(|(j, k)| k + wiggle(j, 1.0))
            .collect(),
    }
}

#[test]
fn gain_error_bounds_control_error() {
    // |U_exact - U_approx| <= eps (|u|_1 + |v|_1) with eps the sup gain error.
    let nom = exp_plant();
    let g = gain_slice(&solve_kernels(&nom, 64).unwrap());
    let snap = initial(64);
    for eps in [1e-1, 1e-3, 1e-6] {
        let approx = perturbed(&g, eps);
        let measured = g.sup_abs_diff(&approx);
        assert!(measured <= eps);
        let a = Controller::exact(g.clone(), nom.rho0).input(&snap.u, &snap.v);
        let b = Controller::operator(approx, nom.rho0).input(&snap.u, &snap.v);
        let bound = measured * l1_norm(&snap.u, &snap.v);
        assert!(
            (a - b).abs() <= bound * (1.0 + 1e-12),
            "{} > {bound}",
            (a - b).abs()
        );
    }
}

#[test]
fn small_gain_error_keeps_finite_time_behavior() {
    let nom = exp_plant();
    let tf = nom.transport_time();
    let g = gain_slice(&solve_kernels(&nom, 64).unwrap());
    let exact = ratio_after(
        &nom,
        &Controller::exact(g.clone(), nom.rho0),
        200,
        tf + 0.2,
        tf + 0.4,
    );
    let close = ratio_after(
        &nom,
        &Controller::operator(perturbed(&g, 1e-4), nom.rho0),
        200,
        tf + 0.2,
        tf + 0.4,
    );
    let far = ratio_after(
        &nom,
        &Controller::operator(perturbed(&g, 1e-1), nom.rho0),
        200,
        tf + 0.2,
        tf + 0.4,
    );
    assert!(close < 1e-3, "{close:e}");
    assert!(exact <= far && close <= far, "{exact:e} {close:e} {far:e}");
}

#[test]
fn lyapunov_decreases_on_nominal_closed_loop() {
    let nom = NominalParams::constant(1.0, 2.0, 0.6, -0.5, 0.8, 0.5);
    let k: KernelSet = solve_kernels(&nom, 64).unwrap();
    let ctrl = Controller::exact(gain_slice(&k), nom.rho0);
    let horizon = 2.0 * nom.transport_time();
    let path = DeltaPath::constant(nom.as_delta(), horizon);
    let tr = simulate(
        &initial(200),
        &path,
        &ctrl,
        &SimConfig::new(200, horizon, 0.05),
    )
    .unwrap();
    let p = LyapunovParams::new(0.1, 1.0 + nom.phi0 * nom.phi0 + 0.1).unwrap();
    let delta = nom.as_delta();
    let values: Vec<(f64, f64)> = tr
        .snapshots
        .iter()
        .map(|s| {
            (
                s.t,
                lyapunov_value(&target_coordinates(s, &k).unwrap(), &delta, &p),
            )
        })
        .collect();
    let v0 = values[0].1;
    let settled: Vec<_> = values
        .iter()
        .filter(|(t, _)| *t >= 1.0 / nom.lambda0 + 1.0 / nom.mu0)
        .collect();
    assert!(settled.len() > 5);
    for w in settled.windows(2) {
        assert!(
            w[1].1 <= w[0].1 + 1e-9 * v0,
            "V rose at t={}: {} -> {}",
            w[1].0,
            w[0].1,
            w[1].1
        );
    }
    assert!(values.last().unwrap().1 < 1e-4 * v0);
}

fn two_mode_source(nom: &NominalParams) -> ProductChains {
    let frozen = |x: f64| MarkovChain::frozen(x);
    let rates = Arc::new(ConstantRates::uniform(2, 3.0).unwrap());
    let lambda = MarkovChain::new(vec![0.8, 1.2], rates.clone(), vec![0.5, 0.5]).unwrap();
    let phi = MarkovChain::new(vec![0.6, 0.9], rates, vec![0.5, 0.5]).unwrap();
    let params = StochasticParams {
        lambda: vec![0.8, 1.2],
        mu: vec![nom.mu0],
        sigma_plus: vec![nom.sigma_plus0.head()],
        sigma_minus: vec![nom.sigma_minus0.head()],
        phi: vec![0.6, 0.9],
        rho: vec![nom.rho0],
    };
    ProductChains {
        chains: [
            lambda,
            frozen(nom.mu0),
            frozen(0.0),
            frozen(0.0),
            phi,
            frozen(nom.rho0),
        ],
        params,
    }
}

#[test]
fn closed_loop_is_linear_in_the_initial_state() {
    let nom = NominalParams::constant(1.0, 2.0, 0.6, -0.5, 0.8, 0.5);
    let ctrl = Controller::exact(gain_slice(&solve_kernels(&nom, 64).unwrap()), nom.rho0);
    let src = two_mode_source(&nom);
    let path = src.sample(9, 3.0).unwrap();
    assert!(path.jump_times.len() > 2);
    let cfg = SimConfig::new(100, 3.0, 0.1);
    let w0 = initial(100);
    let w1 = Snapshot::from_fn(100, |x| x * x, |x| (5.0 * x).cos());
    let comb = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| 2.0 * x - 3.0 * y).collect();
    let mix = Snapshot {
        t: 0.0,
        u: comb(&w0.u, &w1.u),
        v: comb(&w0.v, &w1.v),
        mode: 0,
    };
    let a = simulate(&w0, &path, &ctrl, &cfg).unwrap();
    let b = simulate(&w1, &path, &ctrl, &cfg).unwrap();
    let c = simulate(&mix, &path, &ctrl, &cfg).unwrap();
    for k in 0..c.snapshots.len() {
        let (sa, sb, sc) = (&a.snapshots[k], &b.snapshots[k], &c.snapshots[k]);
        for i in 0..=100 {
            assert!((sc.u[i] - (2.0 * sa.u[i] - 3.0 * sb.u[i])).abs() < 1e-10);
            assert!((sc.v[i] - (2.0 * sa.v[i] - 3.0 * sb.v[i])).abs() < 1e-10);
        }
    }
}

#[test]
fn monte_carlo_is_reproducible_and_decays() {
    let nom = NominalParams::constant(1.0, 2.0, 0.6, -0.5, 0.8, 0.5);
    let ctrl = Controller::exact(gain_slice(&solve_kernels(&nom, 64).unwrap()), nom.rho0);
    let mut sim = SimConfig::new(100, 6.0, 0.05);
    sim.keep_snapshots = false;
    let setup = McSetup {
        initial: initial(100),
        controller: ctrl,
        sim,
        fit_start: 0.5,
        nominal: nom.clone(),
        lyapunov: None,
    };
    let src = two_mode_source(&nom);
    let a = mc_mean_square(&setup, &src, 12, 3).unwrap();
    let b = mc_mean_square(&setup, &src, 12, 3).unwrap();
    assert_eq!(a.mean_square, b.mean_square);
    assert!(a.final_ratio() < 1e-3, "{}", a.final_ratio());
    assert!(a.estimate.sigma_hat > 0.0);
    assert!(a.dispersion > 0.0);
}
