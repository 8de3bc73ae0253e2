//! Generate a kernel dataset around the freeway plant, train the
//! branch/trunk operator and report held-out errors. Defaults are small
//! so the example finishes in under a minute; pass `full` for the
//! default dataset and budget (several minutes).
//!
//! cargo run --release --example train_operator -- [full] [model.nokb]

use std::path::PathBuf;
use std::time::Instant;

use markov_backstep::operator::{
    generate_dataset, sup_error, train, DatasetOptions, ParamRanges, TrainOptions,
};
use markov_backstep::traffic::{build_scenario, TrafficConfig};

fn main() -> markov_backstep::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let full = args.iter().any(|a| a == "full");
    let out = args
        .iter()
        .find(|a| *a != "full")
        .map(PathBuf::from)
        .unwrap_or_else(|| "model.nokb".into());
    let nom = build_scenario(&TrafficConfig::default())?.nominal_params();
    let (ds_opts, tr_opts) = if full {
        (DatasetOptions::default(), TrainOptions::default())
    } else {
        (
            DatasetOptions {
                samples: 200,
                ..DatasetOptions::default()
            },
            TrainOptions {
                hidden: vec![64, 128],
                epochs: 300,
                ..TrainOptions::default()
            },
        )
    };
    let start = Instant::now();
    let ds = generate_dataset(&ParamRanges::around(&nom, 0.2), &ds_opts)?;
    println!(
        "dataset: {} samples in {:.1} s",
        ds.samples.len(),
        start.elapsed().as_secs_f64()
    );
    let start = Instant::now();
    let trained = train(&ds, &tr_opts)?;
    println!("training: {:.1} s", start.elapsed().as_secs_f64());
    if let Some(last) = trained.curve.last() {
        println!(
            "final train loss {:.3e}, test loss {:.3e}",
            last.train_loss, last.test_loss
        );
    }
    println!("{}", sup_error(&trained.model, &ds, &ds.test)?);
    trained.model.save(&out)?;
    println!("saved {}", out.display());
    Ok(())
}
