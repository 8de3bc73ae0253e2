//! Solve the backstepping kernels for the freeway plant, report residuals
//! and write the outlet gains.
//!
//! cargo run --release --example solve_kernels -- [n]

use std::time::Instant;

use markov_backstep::kernels::{gain_slice, kernel_residual, solve_kernels};
use markov_backstep::traffic::{build_scenario, TrafficConfig};

fn main() -> markov_backstep::Result<()> {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(64);
    let nom = build_scenario(&TrafficConfig::default())?.nominal_params();
    let start = Instant::now();
    let k = solve_kernels(&nom, n)?;
    let elapsed = start.elapsed();
    let res = kernel_residual(&k);
    println!(
        "n={n}: {:.2} ms, pde residual {:.2e}, boundary residual {:.2e}",
        elapsed.as_secs_f64() * 1e3,
        res.pde_max(),
        res.boundary_max()
    );
    for (name, c) in ["Kuu", "Kuv", "Kvu", "Kvv"].iter().zip(k.components()) {
        println!("sup |{name}| = {:.4e}", c.sup_abs());
    }
    let g = gain_slice(&k);
    println!("xi,Kvu(1,xi),Kvv(1,xi)");
    for j in (0..g.len()).step_by((g.len() / 8).max(1)) {
        println!(
            "{:.4},{:.6e},{:.6e}",
            j as f64 / (g.len() - 1) as f64,
            g.kvu[j],
            g.kvv[j]
        );
    }
    Ok(())
}
