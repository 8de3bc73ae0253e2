//! Mode probabilities of the freeway density chain, solved from the
//! Kolmogorov forward equation and written as `P_j(t)` to stdout.
//!
//! cargo run --release --example kolmogorov > probabilities.csv

use markov_backstep::markov::solve_kolmogorov;
use markov_backstep::traffic::{build_scenario, TrafficConfig};

fn main() -> markov_backstep::Result<()> {
    let sc = build_scenario(&TrafficConfig::default())?;
    let chain = sc.chain()?;
    let t: Vec<f64> = (0..=200).map(f64::from).collect();
    let p = solve_kolmogorov(&chain, &t)?;
    p.write_csv(&sc.initial_probs, std::io::stdout().lock())?;
    let end = &p.occupancy(&sc.initial_probs)[200];
    eprintln!("P(t=200 s) = {end:.4?}");
    Ok(())
}
