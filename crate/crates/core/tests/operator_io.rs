use std::path::PathBuf;

use markov_backstep::kernels::{KernelSet, TriangleGrid};
use markov_backstep::operator::{
    generate_dataset, sup_error, DatasetOptions, KernelDataset, KernelOperator, OperatorModel,
    ParamRanges,
};
use markov_backstep::params::NominalParams;
use markov_backstep::{Error, Result};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/operator_small.nokb")
}

/// Model whose every stored number is a distinct dyadic rational.
fn patterned(latent: usize, hidden: &[usize]) -> OperatorModel {
    let mut m = OperatorModel::zeros(latent, hidden);
    let mut k = 0u64;
    let mut next = || {
        k += 1;
        ((k * 37 % 101) as f64 - 50.0) / 64.0
    };
    for net in m.nets.iter_mut() {
        for mlp in [&mut net.branch, &mut net.trunk] {
            for l in mlp.layers.iter_mut() {
                l.w.iter_mut().for_each(|w| *w = next());
                l.b.iter_mut().for_each(|b| *b = next());
            }
        }
        net.bias = next();
    }
    m.input_mean = [0.5, 1.0, 0.0, -0.25, 2.0, 0.125];
    m.input_std = [2.0; 6];
    m.output_scale = [1.0, 2.0, 0.5, 4.0];
    m.range_lo = [-1.0; 6];
    m.range_hi = [3.0; 6];
    m
}

#[test]
fn model_bytes_match_golden_file() {
    let bytes = patterned(2, &[3]).to_bytes();
    if std::env::var_os("MBS_BLESS").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), &bytes).unwrap();
    }
    let golden = std::fs::read(golden_path()).unwrap();
    assert_eq!(bytes, golden);
    // 12 header bytes + 28 f64 constants, then per component: branch
    // (4 + 3*4 bytes of dims, 29 f64), trunk (16 bytes, 17 f64), bias.
    assert_eq!(
        golden.len(),
        12 + 28 * 8 + 4 * (16 + 29 * 8 + 16 + 17 * 8 + 8)
    );
    assert_eq!(&golden[..4], b"NOKB");
    assert_eq!(u32::from_le_bytes(golden[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(golden[8..12].try_into().unwrap()), 2);
    let first_mean = f64::from_le_bytes(golden[12..20].try_into().unwrap());
    assert_eq!(first_mean, 0.5);
    assert_eq!(
        OperatorModel::from_bytes(&golden).unwrap(),
        patterned(2, &[3])
    );
}

#[test]
fn damaged_model_bytes_are_rejected() {
    let bytes = patterned(2, &[3]).to_bytes();
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let mut version = bytes.clone();
    version[4] = 9;
    let mut trailing = bytes.clone();
    trailing.push(0);
    for bad in [magic, version, trailing, bytes[..bytes.len() - 3].to_vec()] {
        assert!(matches!(
            OperatorModel::from_bytes(&bad),
            Err(Error::ModelFormat(_))
        ));
    }
}

#[test]
fn linear_model_matches_hand_evaluation() {
    // No hidden layers: branch and trunk are affine, so the prediction is
    // ((Wb z + bb)(Wt y + bt) + bias) * scale with z standardized features
    // and y = (2x - 1, 2xi - 1).
    let m = patterned(1, &[]);
    let nom = NominalParams::constant(1.0, 2.0, 0.3, -0.4, 0.5, 0.6);
    let f = nom.features();
    let grid = TriangleGrid::new(5).unwrap();
    let k = m.infer(&nom, grid).kernels;
    for (c, field) in k.components().iter().enumerate() {
        let net = &m.nets[c];
        let (wb, bb) = (&net.branch.layers[0].w, net.branch.layers[0].b[0]);
        let (wt, bt) = (&net.trunk.layers[0].w, net.trunk.layers[0].b[0]);
        let branch: f64 = (0..6)
            .map(|j| wb[[0, j]] * (f[j] - m.input_mean[j]) / m.input_std[j])
            .sum::<f64>()
            + bb;
        for i in 0..5 {
            for j in 0..=i {
                let (x, xi) = (i as f64 / 4.0, j as f64 / 4.0);
                let trunk = wt[[0, 0]] * (2.0 * x - 1.0) + wt[[0, 1]] * (2.0 * xi - 1.0) + bt;
                let want = (branch * trunk + net.bias) * m.output_scale[c];
                assert!(
                    (field.at(i, j) - want).abs() < 1e-12,
                    "component {c} ({i},{j})"
                );
            }
        }
    }
}

#[test]
fn cached_and_uncached_inference_agree() {
    let m = patterned(2, &[3]);
    let nom = NominalParams::constant(1.0, 2.0, 0.3, -0.4, 0.5, 0.6);
    let grid = TriangleGrid::new(17).unwrap();
    let basis = m.prepare(grid);
    let a = m.infer_with(&basis, &nom).kernels;
    let b = m.infer(&nom, grid).kernels;
    assert_eq!(a.max_abs_diff(&b), [0.0; 4]);
}

#[test]
fn out_of_range_queries_are_flagged() {
    let m = patterned(2, &[3]);
    let inside = NominalParams::constant(1.0, 2.0, 0.3, -0.4, 0.5, 0.6);
    let outside = NominalParams::constant(1.0, 5.0, 0.3, -0.4, 0.5, 0.6);
    let grid = TriangleGrid::new(5).unwrap();
    assert!(!m.infer(&inside, grid).out_of_range);
    assert!(m.infer(&outside, grid).out_of_range);
}

fn small_dataset() -> KernelDataset {
    let nom = NominalParams::constant(1.0, 2.0, 0.5, -0.4, 0.8, 0.3);
    let opts = DatasetOptions {
        samples: 12,
        grid_n: 9,
        seed: 4,
        ..DatasetOptions::default()
    };
    generate_dataset(&ParamRanges::around(&nom, 0.2), &opts).unwrap()
}

/// Returns the stored solution for any feature vector in the dataset.
struct Lookup<'a>(&'a KernelDataset);

impl KernelOperator for Lookup<'_> {
    fn predict(&self, params: &NominalParams, grid: TriangleGrid) -> Result<KernelSet> {
        let f = params.features();
        let s = self
            .0
            .samples
            .iter()
            .find(|s| s.features == f)
            .expect("known sample");
        assert_eq!(s.kernels.grid(), grid);
        Ok(s.kernels.clone())
    }
}

#[test]
fn lookup_oracle_has_zero_error() {
    let ds = small_dataset();
    let rep = sup_error(&Lookup(&ds), &ds, &ds.test).unwrap();
    assert_eq!(rep.epsilon(), 0.0);
    assert_eq!(rep.samples, ds.test.len());
}

#[test]
fn dataset_round_trips_through_disk() {
    let ds = small_dataset();
    assert_eq!(ds.train.len() + ds.test.len(), 12);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = KernelDataset::load(dir.path()).unwrap();
    assert_eq!(back.train, ds.train);
    assert_eq!(back.test, ds.test);
    assert_eq!(back.grid, ds.grid);
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        for k in 0..6 {
            assert!((a.features[k] - b.features[k]).abs() <= 1e-15 * a.features[k].abs().max(1.0));
        }
        assert!(a
            .kernels
            .max_abs_diff(&b.kernels)
            .iter()
            .all(|d| *d <= 1e-15));
    }
}

#[test]
fn model_file_round_trip() {
    let m = patterned(3, &[4, 5]);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.nokb");
    m.save(&p).unwrap();
    assert_eq!(OperatorModel::load(&p).unwrap(), m);
}
