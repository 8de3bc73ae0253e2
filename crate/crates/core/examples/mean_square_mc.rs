//! Monte-Carlo mean-square decay of the stochastic freeway loop with
//! exact gains, plus the mean Lyapunov functional.
//!
//! cargo run --release --example mean_square_mc -- [runs]

use markov_backstep::kernels::{gain_slice, solve_kernels};
use markov_backstep::sim::{Controller, SimConfig};
use markov_backstep::stability::{mc_mean_square, LyapunovParams, McSetup};
use markov_backstep::traffic::{build_scenario, TrafficConfig};

fn main() -> markov_backstep::Result<()> {
    let runs: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(50);
    let sc = build_scenario(&TrafficConfig::default())?;
    let nom = sc.nominal_params();
    let k = solve_kernels(&nom, 64)?;
    let mut sim = SimConfig::new(sc.grid_m, sc.horizon, 0.5);
    sim.keep_snapshots = false;
    let modes: Vec<_> = (0..sc.modes()).map(|j| sc.delta_state(j)).collect();
    let lyap = LyapunovParams::speed_scaled(&modes);
    let setup = McSetup {
        initial: sc.initial_snapshot(sc.grid_m),
        controller: Controller::exact(gain_slice(&k), nom.rho0),
        sim,
        fit_start: nom.transport_time(),
        nominal: nom,
        lyapunov: Some((k, lyap)),
    };
    let rep = mc_mean_square(&setup, &sc, runs, 0)?;
    println!("{}", rep.summary());
    println!(
        "final ratio {:.3e}, median time to 10% {:.1} s",
        rep.final_ratio(),
        rep.median_time_to_tenth()
    );
    let v = rep.lyapunov.as_ref().expect("requested");
    for i in (0..rep.times.len()).step_by(50) {
        println!(
            "t={:>6.1}  E|w|^2={:.4e}  E V={:.4e}",
            rep.times[i], rep.mean_square[i], v[i]
        );
    }
    Ok(())
}
