//! Time the kernel solver against operator inference at the same grid.
//! Loads a model file when given one, otherwise trains a small model first.
//!
//! cargo run --release --example bench_gains -- [model.nokb]

use markov_backstep::cli::bench_gains;
use markov_backstep::kernels::KernelSolverOptions;
use markov_backstep::operator::{
    generate_dataset, train, DatasetOptions, OperatorModel, ParamRanges, TrainOptions,
};
use markov_backstep::traffic::{build_scenario, TrafficConfig};

fn main() -> markov_backstep::Result<()> {
    let nom = build_scenario(&TrafficConfig::default())?.nominal_params();
    let model = match std::env::args().nth(1) {
        Some(p) => OperatorModel::load(p.as_ref())?,
        None => {
            let ds = generate_dataset(
                &ParamRanges::around(&nom, 0.2),
                &DatasetOptions {
                    samples: 50,
                    ..DatasetOptions::default()
                },
            )?;
            train(
                &ds,
                &TrainOptions {
                    hidden: vec![32, 32],
                    epochs: 20,
                    ..TrainOptions::default()
                },
            )?
            .model
        }
    };
    let rows = bench_gains(&nom, &model, 64, 100, KernelSolverOptions::default())?;
    for r in &rows {
        println!(
            "{:<18} median {:.3e} s  p90 {:.3e} s",
            r.method, r.median_s, r.p90_s
        );
    }
    println!("speedup {:.0}x", rows[0].median_s / rows[1].median_s);
    Ok(())
}
