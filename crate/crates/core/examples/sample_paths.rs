//! Draw mode paths of the density chain and compare empirical occupancy
//! with the solved probabilities.
//!
//! cargo run --release --example sample_paths -- [paths]

use markov_backstep::markov::{derive_seed, sample_path, solve_kolmogorov};
use markov_backstep::traffic::{build_scenario, TrafficConfig};

fn main() -> markov_backstep::Result<()> {
    let paths: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(2000);
    let sc = build_scenario(&TrafficConfig::default())?;
    let chain = sc.chain()?;
    let times = [10.0, 50.0, 100.0, 200.0];
    let mut counts = vec![vec![0usize; sc.modes()]; times.len()];
    let mut jumps = 0;
    for k in 0..paths {
        let p = sample_path(&chain, derive_seed(1, k as u64), 200.0)?;
        jumps += p.jumps();
        for (ti, t) in times.iter().enumerate() {
            counts[ti][p.mode_at(*t)] += 1;
        }
    }
    let solved = solve_kolmogorov(&chain, &times)?.occupancy(&sc.initial_probs);
    println!(
        "{paths} paths, {:.0} jumps per path on average",
        jumps as f64 / paths as f64
    );
    for (ti, t) in times.iter().enumerate() {
        let freq: Vec<f64> = counts[ti]
            .iter()
            .map(|c| *c as f64 / paths as f64)
            .collect();
        println!("t={t:>5}: sampled {freq:.3?}");
        println!("        solved  {:.3?}", solved[ti]);
    }
    Ok(())
}
