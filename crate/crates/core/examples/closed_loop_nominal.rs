//! Nominal (non-jumping) closed loop on a unit-speed plant: the exact
//! gains drive the state to zero after one transport period, open loop
//! does not.
//!
//! cargo run --release --example closed_loop_nominal

use markov_backstep::kernels::{gain_slice, solve_kernels};
use markov_backstep::markov::DeltaPath;
use markov_backstep::params::NominalParams;
use markov_backstep::sim::{simulate, Controller, SimConfig, Snapshot};

fn main() -> markov_backstep::Result<()> {
    let nom = NominalParams::constant(1.0, 2.0, 1.5, -1.2, 0.8, 0.9);
    let tf = nom.transport_time();
    let horizon = 2.0 * tf;
    let init = Snapshot::from_fn(200, |x| (std::f64::consts::PI * x).sin(), |x| 1.0 - x * x);
    let path = DeltaPath::constant(nom.as_delta(), horizon);
    let cfg = SimConfig::new(200, horizon, 0.25 * tf);
    let exact = Controller::exact(gain_slice(&solve_kernels(&nom, 64)?), nom.rho0);
    let closed = simulate(&init, &path, &exact, &cfg)?;
    let open = simulate(&init, &path, &Controller::open_loop(), &cfg)?;
    println!("transport time {tf:.3}");
    println!("{:>8} {:>12} {:>12}", "t", "closed", "open");
    for k in 0..closed.times.len() {
        println!(
            "{:>8.3} {:>12.4e} {:>12.4e}",
            closed.times[k], closed.norms[k], open.norms[k]
        );
    }
    Ok(())
}
