//! One stochastic freeway run: open loop against exact-gain feedback, with
//! the outlet speed limit and the density range over time. Writes
//! `fields_open.csv` and `fields_exact.csv` (`t,x,rho,v`) to the working
//! directory.
//!
//! cargo run --release --example traffic_demo -- [seed]

use std::fs::File;

use markov_backstep::kernels::{gain_slice, solve_kernels};
use markov_backstep::sim::{simulate, Controller, SimConfig};
use markov_backstep::traffic::{build_scenario, TrafficConfig, KMH, VEH_PER_KM};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(0);
    let sc = build_scenario(&TrafficConfig::default())?;
    let nom = sc.nominal_params();
    let path = sc.delta_path(seed)?;
    let init = sc.initial_snapshot(sc.grid_m);
    let cfg = SimConfig::new(sc.grid_m, sc.horizon, 0.5);
    let exact = Controller::exact(gain_slice(&solve_kernels(&nom, 64)?), nom.rho0);
    let open = simulate(&init, &path, &Controller::open_loop(), &cfg)?;
    let closed = simulate(&init, &path, &exact, &cfg)?;
    println!(
        "{} density jumps over {} s",
        path.jump_times.len() - 1,
        sc.horizon
    );
    println!(
        "{:>6} {:>5} {:>22} {:>22} {:>12}",
        "t", "mode", "open rho range", "closed rho range", "limit km/h"
    );
    for k in (0..closed.snapshots.len()).step_by(40) {
        let range = |s| -> markov_backstep::Result<(f64, f64)> {
            let f = sc.fields(s)?;
            let lo = f.rho.iter().cloned().fold(f64::INFINITY, f64::min) / VEH_PER_KM;
            let hi = f.rho.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / VEH_PER_KM;
            Ok((lo, hi))
        };
        let (a, b) = range(&open.snapshots[k])?;
        let (c, d) = range(&closed.snapshots[k])?;
        let limit = (sc.nominal.v_star + closed.controls[k] / sc.nominal.rho_star) / KMH;
        println!(
            "{:>6.1} {:>5} {:>10.2}..{:<10.2} {:>10.2}..{:<10.2} {:>12.2}",
            closed.times[k],
            closed.modes[k] + 1,
            a,
            b,
            c,
            d,
            limit
        );
    }
    sc.write_fields_csv(&open.snapshots, File::create("fields_open.csv")?)?;
    sc.write_fields_csv(&closed.snapshots, File::create("fields_exact.csv")?)?;
    Ok(())
}
