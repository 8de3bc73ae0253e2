//! Branch/trunk surrogate for the map from nominal parameters to the four
//! kernel fields.
//!
//! Each kernel component has its own pair of networks. For component `c`
//!
//! ```text
//! K_c(x, xi) ~ scale_c * (sum_k b_k(z) t_k(2x - 1, 2xi - 1) + bias_c)
//! ```
//!
//! where `z` is the standardized six-feature input and `scale_c` the
//! per-component max-abs of the training targets.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{kernel_residual, solve_kernels, KernelField, KernelSet, TriangleGrid};
use crate::markov::derive_seed;
use crate::params::{CouplingProfile, NominalParams};

pub const COMPONENTS: [&str; 4] = ["Kuu", "Kuv", "Kvu", "Kvv"];
pub const FEATURES: [&str; 6] = ["lambda", "mu", "sigma_plus", "sigma_minus", "phi", "rho"];

const MAGIC: &[u8; 4] = b"NOKB";
const VERSION: u32 = 1;

/// Box of admissible feature vectors plus the coupling shapes used to turn
/// a feature vector back into a full parameter tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRanges {
    pub lo: [f64; 6],
    pub hi: [f64; 6],
    pub template: NominalParams,
}

impl ParamRanges {
    /// Every feature within `rel` (relative) of the template's value.
    pub fn around(template: &NominalParams, rel: f64) -> Self {
        let f = template.features();
        let mut lo = [0.0; 6];
        let mut hi = [0.0; 6];
        for k in 0..6 {
            let (a, b) = (f[k] * (1.0 - rel), f[k] * (1.0 + rel));
            lo[k] = a.min(b);
            hi[k] = a.max(b);
        }
        ParamRanges {
            lo,
            hi,
            template: template.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..6 {
            if !(self.lo[k].is_finite() && self.hi[k].is_finite() && self.lo[k] <= self.hi[k]) {
                return Err(Error::InvalidParameter(format!(
                    "bad range for {}: [{}, {}]",
                    FEATURES[k], self.lo[k], self.hi[k]
                )));
            }
        }
        if !(self.lo[0] > 0.0 && self.lo[1] > 0.0) {
            return Err(Error::InvalidParameter(
                "lambda and mu ranges must be positive".into(),
            ));
        }
        if self.lo[4] <= 0.0 && self.hi[4] >= 0.0 {
            return Err(Error::InvalidParameter("phi range must exclude 0".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 6] {
        let mut f = [0.0; 6];
        for k in 0..6 {
            let u: f64 = rng.random();
            f[k] = self.lo[k] + (self.hi[k] - self.lo[k]) * u;
        }
        f
    }

    pub fn contains(&self, f: &[f64; 6]) -> bool {
        (0..6).all(|k| {
            let tol = 1e-9 * self.lo[k].abs().max(self.hi[k].abs()) + 1e-15;
            f[k] >= self.lo[k] - tol && f[k] <= self.hi[k] + tol
        })
    }

    pub fn params(&self, f: &[f64; 6]) -> NominalParams {
        self.template.from_features(f)
    }
}

#[derive(Debug, Clone)]
pub struct KernelSample {
    pub features: [f64; 6],
    pub kernels: KernelSet,
    /// Largest entry of the residual report.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DatasetOptions {
    pub samples: usize,
    pub grid_n: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub residual_threshold: f64,
    /// Redraw budget per sample.
    pub max_redraws: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            samples: 1000,
            grid_n: 32,
            seed: 0,
            train_fraction: 0.9,
            residual_threshold: 0.5,
            max_redraws: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KernelDataset {
    pub samples: Vec<KernelSample>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub ranges: ParamRanges,
    pub grid: TriangleGrid,
    pub residual_threshold: f64,
    pub seed: u64,
    /// Draws rejected for non-convergence or a residual above threshold.
    pub redraws: usize,
}

pub fn generate_dataset(ranges: &ParamRanges, opts: &DatasetOptions) -> Result<KernelDataset> {
    ranges.validate()?;
    if opts.samples == 0 {
        return Err(Error::InvalidParameter(
            "dataset needs at least one sample".into(),
        ));
    }
    if !(opts.train_fraction > 0.0 && opts.train_fraction <= 1.0) {
        return Err(Error::InvalidParameter(
            "train_fraction must lie in (0, 1]".into(),
        ));
    }
    let grid = TriangleGrid::new(opts.grid_n)?;
    let drawn: Vec<Result<(KernelSample, usize)>> = (0..opts.samples)
        .into_par_iter()
        .map(|i| draw_sample(ranges, opts, i))
        .collect();
    let mut samples = Vec::with_capacity(opts.samples);
    let mut redraws = 0;
    for d in drawn {
        let (s, r) = d?;
        samples.push(s);
        redraws += r;
    }
    let (train, test) = split_indices(opts.samples, opts.train_fraction, opts.seed);
    Ok(KernelDataset {
        samples,
        train,
        test,
        ranges: ranges.clone(),
        grid,
        residual_threshold: opts.residual_threshold,
        seed: opts.seed,
        redraws,
    })
}

fn draw_sample(
    ranges: &ParamRanges,
    opts: &DatasetOptions,
    i: usize,
) -> Result<(KernelSample, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, i as u64));
    let mut redraws = 0;
    loop {
        let features = ranges.sample(&mut rng);
        match solve_kernels(&ranges.params(&features), opts.grid_n) {
            Ok(kernels) => {
                let residual = kernel_residual(&kernels).max();
                if residual <= opts.residual_threshold {
                    let s = KernelSample {
                        features,
                        kernels,
                        residual,
                    };
                    return Ok((s, redraws));
                }
            }
            Err(Error::KernelNonConvergence { .. }) | Err(Error::InvalidParameter(_)) => {}
            Err(e) => return Err(e),
        }
        redraws += 1;
        if redraws > opts.max_redraws {
            return Err(Error::InvalidParameter(format!(
                "sample {i}: no admissible draw after {redraws} attempts"
            )));
        }
    }
}

fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX)));
    let mut n_train = (n as f64 * fraction).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    } else {
        n_train = n;
    }
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

impl KernelDataset {
    pub fn params(&self, i: usize) -> NominalParams {
        self.ranges.params(&self.samples[i].features)
    }

    /// Per-component max-abs over the train split (zero becomes one).
    pub fn output_scale(&self) -> [f64; 4] {
        let mut scale = [0.0f64; 4];
        for &i in &self.train {
            for (c, f) in self.samples[i].kernels.components().iter().enumerate() {
                scale[c] = scale[c].max(f.sup_abs());
            }
        }
        scale.map(|s| if s > 0.0 { s } else { 1.0 })
    }

    /// Write `dataset.toml`, `samples.csv` and one kernel CSV per sample.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let kdir = dir.join("kernels");
        fs::create_dir_all(&kdir).map_err(|e| Error::io(&kdir, e))?;
        let mut meta = toml::Table::new();
        meta.insert("grid_n".into(), (self.grid.n() as i64).into());
        meta.insert("seed".into(), (self.seed as i64).into());
        meta.insert("residual_threshold".into(), self.residual_threshold.into());
        meta.insert("redraws".into(), (self.redraws as i64).into());
        meta.insert("lo".into(), self.ranges.lo.to_vec().into());
        meta.insert("hi".into(), self.ranges.hi.to_vec().into());
        let t = &self.ranges.template;
        meta.insert("domain_length".into(), t.domain_length.into());
        meta.insert("sigma_plus_shape".into(), profile_to_toml(&t.sigma_plus0));
        meta.insert("sigma_minus_shape".into(), profile_to_toml(&t.sigma_minus0));
        meta.insert("template".into(), t.features().to_vec().into());
        let path = dir.join("dataset.toml");
        fs::write(&path, meta.to_string()).map_err(|e| Error::io(&path, e))?;

        let path = dir.join("samples.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["index", "split"];
        header.extend(FEATURES);
        header.push("residual");
        w.write_record(&header)?;
        let test: std::collections::HashSet<usize> = self.test.iter().copied().collect();
        for (i, s) in self.samples.iter().enumerate() {
            let mut rec = vec![
                i.to_string(),
                if test.contains(&i) { "test" } else { "train" }.into(),
            ];
            rec.extend(s.features.iter().map(|v| v.to_string()));
            rec.push(s.residual.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        for (i, s) in self.samples.iter().enumerate() {
            s.kernels
                .save_csv(&kdir.join(format!("sample_{i:04}.csv")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<KernelDataset> {
        let path = dir.join("dataset.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let int = |k: &str| -> Result<i64> {
            meta.get(k)
                .and_then(|v| v.as_integer())
                .ok_or_else(|| Error::Config(format!("dataset.toml: missing integer {k}")))
        };
        let float = |k: &str| -> Result<f64> {
            meta.get(k)
                .and_then(toml_float)
                .ok_or_else(|| Error::Config(format!("dataset.toml: missing number {k}")))
        };
        let six = |k: &str| -> Result<[f64; 6]> {
            let v: Vec<f64> = meta
                .get(k)
                .and_then(|v| v.as_array())
                .map(|a| a.iter().filter_map(toml_float).collect())
                .unwrap_or_default();
            v.try_into()
                .map_err(|_| Error::Config(format!("dataset.toml: {k} needs six numbers")))
        };
        let tf = six("template")?;
        let shape = |k: &str, head: f64| -> Result<CouplingProfile> {
            meta.get(k)
                .ok_or_else(|| Error::Config(format!("dataset.toml: missing {k}")))
                .and_then(|v| profile_from_toml(v, head))
        };
        let template = NominalParams {
            lambda0: tf[0],
            mu0: tf[1],
            sigma_plus0: shape("sigma_plus_shape", tf[2])?,
            sigma_minus0: shape("sigma_minus_shape", tf[3])?,
            phi0: tf[4],
            rho0: tf[5],
            domain_length: float("domain_length")?,
        };
        let ranges = ParamRanges {
            lo: six("lo")?,
            hi: six("hi")?,
            template,
        };
        let grid = TriangleGrid::new(int("grid_n")? as usize)?;

        let path = dir.join("samples.csv");
        let mut r = csv::Reader::from_path(&path)?;
        let mut samples = Vec::new();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Config(format!("samples.csv row {row}: bad column {k}")))
            };
            let mut features = [0.0; 6];
            for (k, f) in features.iter_mut().enumerate() {
                *f = num(2 + k)?;
            }
            match rec.get(1) {
                Some("test") => test.push(row),
                Some("train") => train.push(row),
                other => {
                    return Err(Error::Config(format!(
                        "samples.csv row {row}: split {other:?}"
                    )))
                }
            }
            let kp = dir.join("kernels").join(format!("sample_{row:04}.csv"));
            let kernels = KernelSet::load_csv(&kp, ranges.params(&features))?;
            if kernels.grid() != grid {
                return Err(Error::GridMismatch(format!(
                    "{} is not on n = {}",
                    kp.display(),
                    grid.n()
                )));
            }
            samples.push(KernelSample {
                features,
                kernels,
                residual: num(8)?,
            });
        }
        Ok(KernelDataset {
            samples,
            train,
            test,
            ranges,
            grid,
            residual_threshold: float("residual_threshold")?,
            seed: int("seed")? as u64,
            redraws: int("redraws")? as usize,
        })
    }
}

fn toml_float(v: &toml::Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

fn profile_to_toml(p: &CouplingProfile) -> toml::Value {
    match p {
        CouplingProfile::Constant(_) => "constant".into(),
        CouplingProfile::Exponential { rate, .. } => {
            let mut t = toml::Table::new();
            t.insert("exponential_rate".into(), (*rate).into());
            t.into()
        }
        CouplingProfile::Tabulated(v) => v.to_vec().into(),
    }
}

fn profile_from_toml(v: &toml::Value, head: f64) -> Result<CouplingProfile> {
    let p = if v.as_str() == Some("constant") {
        CouplingProfile::Constant(head)
    } else if let Some(rate) = v
        .as_table()
        .and_then(|t| t.get("exponential_rate"))
        .and_then(toml_float)
    {
        CouplingProfile::Exponential {
            amplitude: head,
            rate,
        }
    } else if let Some(a) = v.as_array() {
        let table: Vec<f64> = a.iter().filter_map(toml_float).collect();
        if table.len() != a.len() || table.is_empty() {
            return Err(Error::Config("bad tabulated coupling shape".into()));
        }
        CouplingProfile::Tabulated(table.into()).with_head(head)
    } else {
        return Err(Error::Config(format!("unknown coupling shape {v}")));
    };
    Ok(p)
}

/// Fully connected layer, `w` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// `tanh` on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> Mlp {
        let layers = dims
            .windows(2)
            .map(|d| {
                let a = (6.0 / (d[0] + d[1]) as f64).sqrt();
                Dense {
                    w: Array2::from_shape_fn((d[1], d[0]), |_| rng.random_range(-a..a)),
                    b: Array1::zeros(d[1]),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros(dims: &[usize]) -> Mlp {
        let layers = dims
            .windows(2)
            .map(|d| Dense {
                w: Array2::zeros((d[1], d[0])),
                b: Array1::zeros(d[1]),
            })
            .collect();
        Mlp { layers }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].w.ncols()];
        d.extend(self.layers.iter().map(|l| l.w.nrows()));
        d
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_all(x).pop().expect("at least one layer")
    }

    /// Forward pass for a single input vector.
    pub fn forward_one(&self, x: &Array1<f64>) -> Array1<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            a = layer.w.dot(&a) + &layer.b;
            if l < last {
                a.mapv_inplace(f64::tanh);
            }
        }
        a
    }

    /// `acts[0] = x`, `acts[l + 1]` = output of layer `l`.
    fn forward_all(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = vec![x.clone()];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&layer.w.t()) + &layer.b;
            if l < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        acts
    }

    fn backward(&self, acts: &[Array2<f64>], mut g: Array2<f64>) -> Vec<Dense> {
        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            grads.push(Dense {
                w: g.t().dot(&acts[l]),
                b: g.sum_axis(Axis(0)),
            });
            if l > 0 {
                g = g.dot(&self.layers[l].w);
                g.zip_mut_with(&acts[l], |gi, &a| *gi *= 1.0 - a * a);
            }
        }
        grads.reverse();
        grads
    }

    fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentNet {
    pub branch: Mlp,
    pub trunk: Mlp,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorModel {
    pub latent: usize,
    pub input_mean: [f64; 6],
    pub input_std: [f64; 6],
    pub output_scale: [f64; 4],
    pub range_lo: [f64; 6],
    pub range_hi: [f64; 6],
    pub nets: [ComponentNet; 4],
}

/// Trunk outputs for every node of one grid, reusable across queries.
#[derive(Debug, Clone)]
pub struct TrunkBasis {
    pub grid: TriangleGrid,
    values: [Array2<f64>; 4],
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub kernels: KernelSet,
    /// Some feature lies outside the training box.
    pub out_of_range: bool,
    pub elapsed: Duration,
}

fn trunk_inputs(grid: TriangleGrid) -> Array2<f64> {
    let mut x = Array2::zeros((grid.len(), 2));
    for (k, (a, b)) in grid.nodes().enumerate() {
        x[[k, 0]] = 2.0 * a - 1.0;
        x[[k, 1]] = 2.0 * b - 1.0;
    }
    x
}

impl OperatorModel {
    /// All weights zero: predicts `bias_c * scale_c` everywhere.
    pub fn zeros(latent: usize, hidden: &[usize]) -> OperatorModel {
        let net = || ComponentNet {
            branch: Mlp::zeros(&dims(6, hidden, latent)),
            trunk: Mlp::zeros(&dims(2, hidden, latent)),
            bias: 0.0,
        };
        OperatorModel {
            latent,
            input_mean: [0.0; 6],
            input_std: [1.0; 6],
            output_scale: [1.0; 4],
            range_lo: [f64::NEG_INFINITY; 6],
            range_hi: [f64::INFINITY; 6],
            nets: [net(), net(), net(), net()],
        }
    }

    fn standardize(&self, f: &[f64; 6]) -> Array1<f64> {
        Array1::from_shape_fn(6, |k| (f[k] - self.input_mean[k]) / self.input_std[k])
    }

    pub fn in_range(&self, f: &[f64; 6]) -> bool {
        (0..6).all(|k| {
            let tol = 1e-9 * self.range_lo[k].abs().max(self.range_hi[k].abs()) + 1e-15;
            f[k] >= self.range_lo[k] - tol && f[k] <= self.range_hi[k] + tol
        })
    }

    pub fn prepare(&self, grid: TriangleGrid) -> TrunkBasis {
        let x = trunk_inputs(grid);
        let values = [0, 1, 2, 3].map(|c| self.nets[c].trunk.forward(&x));
        TrunkBasis { grid, values }
    }

    /// Inference on a grid whose trunk basis is already cached.
    pub fn infer_with(&self, basis: &TrunkBasis, params: &NominalParams) -> Inference {
        let start = Instant::now();
        let f = params.features();
        let z = self.standardize(&f);
        let fields = [0, 1, 2, 3].map(|c| {
            let net = &self.nets[c];
            let b = net.branch.forward_one(&z);
            let vals = basis.values[c].dot(&b);
            let scale = self.output_scale[c];
            let data = vals.iter().map(|v| (v + net.bias) * scale).collect();
            KernelField::from_vec(basis.grid, data).expect("basis matches grid")
        });
        let kernels = KernelSet::from_components(params.clone(), fields).expect("same grid");
        Inference {
            kernels,
            out_of_range: !self.in_range(&f),
            elapsed: start.elapsed(),
        }
    }

    pub fn infer(&self, params: &NominalParams, grid: TriangleGrid) -> Inference {
        let start = Instant::now();
        let basis = self.prepare(grid);
        let mut inf = self.infer_with(&basis, params);
        inf.elapsed = start.elapsed();
        inf
    }

    pub fn is_finite(&self) -> bool {
        self.nets
            .iter()
            .all(|n| n.branch.is_finite() && n.trunk.is_finite() && n.bias.is_finite())
            && self
                .output_scale
                .iter()
                .chain(&self.input_std)
                .all(|v| v.is_finite() && *v != 0.0)
            && self.input_mean.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.latent as u32).to_le_bytes());
        let head = [
            &self.input_mean[..],
            &self.input_std[..],
            &self.output_scale[..],
            &self.range_lo[..],
            &self.range_hi[..],
        ];
        for v in head.iter().flat_map(|s| s.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for net in &self.nets {
            for mlp in [&net.branch, &net.trunk] {
                out.extend_from_slice(&(mlp.layers.len() as u32).to_le_bytes());
                for d in mlp.dims() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for l in &mlp.layers {
                    for v in l.w.iter().chain(l.b.iter()) {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            out.extend_from_slice(&net.bias.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<OperatorModel> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::ModelFormat("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let latent = r.u32()? as usize;
        let mut head = [[0.0; 6]; 5];
        for (k, h) in head.iter_mut().enumerate() {
            let len = if k == 2 { 4 } else { 6 };
            for v in h.iter_mut().take(len) {
                *v = r.f64()?;
            }
        }
        let mut nets = Vec::with_capacity(4);
        for c in 0..4 {
            let branch = r.mlp()?;
            let trunk = r.mlp()?;
            let (bd, td) = (branch.dims(), trunk.dims());
            if bd[0] != 6 || td[0] != 2 || bd.last() != Some(&latent) || td.last() != Some(&latent)
            {
                return Err(Error::ModelFormat(format!(
                    "component {}: branch dims {bd:?}, trunk dims {td:?}, latent {latent}",
                    COMPONENTS[c]
                )));
            }
            nets.push(ComponentNet {
                branch,
                trunk,
                bias: r.f64()?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::ModelFormat(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let model = OperatorModel {
            latent,
            input_mean: head[0],
            input_std: head[1],
            output_scale: [head[2][0], head[2][1], head[2][2], head[2][3]],
            range_lo: head[3],
            range_hi: head[4],
            nets: nets.try_into().expect("four components"),
        };
        if !model.is_finite() {
            return Err(Error::ModelFormat("non-finite or zero constants".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<OperatorModel> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        OperatorModel::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::ModelFormat(format!(
                "truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn mlp(&mut self) -> Result<Mlp> {
        let n = self.u32()? as usize;
        if n == 0 || n > 64 {
            return Err(Error::ModelFormat(format!("layer count {n}")));
        }
        let dims = (0..=n)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims.iter().any(|&d| d == 0 || d > 1 << 16) {
            return Err(Error::ModelFormat(format!("layer dims {dims:?}")));
        }
        let mut layers = Vec::with_capacity(n);
        for d in dims.windows(2) {
            let w = (0..d[0] * d[1])
                .map(|_| self.f64())
                .collect::<Result<Vec<_>>>()?;
            let b = (0..d[1]).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            layers.push(Dense {
                w: Array2::from_shape_vec((d[1], d[0]), w).expect("sized above"),
                b: Array1::from(b),
            });
        }
        Ok(Mlp { layers })
    }
}

fn dims(input: usize, hidden: &[usize], latent: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(latent);
    d
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub latent: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Learning rate reached at the last epoch by geometric decay.
    pub final_learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Test metrics every this many epochs (and at the end).
    pub checkpoint_every: usize,
    /// Refit both output layers by alternating least squares after
    /// gradient descent.
    pub lsq_refit: bool,
    /// Also refit every this many epochs during descent (0 = only at the end).
    pub refit_every: usize,
    /// Ridge added to the refit normal equations, relative to their mean
    /// diagonal.
    pub ridge: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            latent: 32,
            hidden: vec![64, 512],
            learning_rate: 1e-3,
            final_learning_rate: 1e-3,
            epochs: 1500,
            seed: 0,
            checkpoint_every: 50,
            lsq_refit: true,
            refit_every: 0,
            ridge: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub refit: bool,
    /// Mean over components of the normalized mean-squared error.
    pub train_loss: f64,
    pub test_loss: f64,
    /// Largest normalized absolute error over test samples, nodes and components.
    pub test_sup: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingCurve {
    pub rows: Vec<CurveRow>,
}

impl TrainingCurve {
    pub fn last(&self) -> Option<&CurveRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "phase", "train_loss", "test_loss", "test_sup"])?;
        for r in &self.rows {
            wr.write_record(&[
                r.epoch.to_string(),
                if r.refit { "refit" } else { "adam" }.to_string(),
                r.train_loss.to_string(),
                r.test_loss.to_string(),
                r.test_sup.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<curve csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: OperatorModel,
    pub curve: TrainingCurve,
}

struct Adam {
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    fn new(mlp: &Mlp) -> Adam {
        let z: Vec<Dense> = mlp
            .layers
            .iter()
            .map(|l| Dense {
                w: Array2::zeros(l.w.raw_dim()),
                b: Array1::zeros(l.b.raw_dim()),
            })
            .collect();
        Adam { m: z.clone(), v: z }
    }

    fn step(&mut self, mlp: &mut Mlp, grads: &[Dense], lr: f64, t: i32) {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (c1, c2) = (1.0 - f64::powi(b1, t), 1.0 - f64::powi(b2, t));
        for (k, g) in grads.iter().enumerate() {
            let (m, v, p) = (&mut self.m[k], &mut self.v[k], &mut mlp.layers[k]);
            let upd = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            ndarray::Zip::from(&mut p.w)
                .and(&mut m.w)
                .and(&mut v.w)
                .and(&g.w)
                .for_each(|p, m, v, &g| upd(p, m, v, g));
            ndarray::Zip::from(&mut p.b)
                .and(&mut m.b)
                .and(&mut v.b)
                .and(&g.b)
                .for_each(|p, m, v, &g| upd(p, m, v, g));
        }
    }
}

fn feature_matrix(
    ds: &KernelDataset,
    idx: &[usize],
    mean: &[f64; 6],
    std: &[f64; 6],
) -> Array2<f64> {
    Array2::from_shape_fn((idx.len(), 6), |(r, k)| {
        (ds.samples[idx[r]].features[k] - mean[k]) / std[k]
    })
}

fn target_matrix(ds: &KernelDataset, idx: &[usize], c: usize, scale: f64) -> Array2<f64> {
    let n = ds.grid.len();
    let mut y = Array2::zeros((idx.len(), n));
    for (r, &i) in idx.iter().enumerate() {
        let vals = ds.samples[i].kernels.components()[c].values();
        for (k, v) in vals.iter().enumerate() {
            y[[r, k]] = v / scale;
        }
    }
    y
}

struct ComponentRun {
    net: ComponentNet,
    rows: Vec<CurveRow>,
}

/// Fit one branch/trunk pair per kernel component by full-batch Adam on
/// the normalized mean-squared error over all train samples and grid nodes.
pub fn train(ds: &KernelDataset, opts: &TrainOptions) -> Result<Trained> {
    if ds.train.is_empty() {
        return Err(Error::InvalidParameter("empty train split".into()));
    }
    if opts.latent == 0
        || opts.hidden.contains(&0)
        || !(opts.learning_rate > 0.0 && opts.final_learning_rate > 0.0)
    {
        return Err(Error::InvalidParameter(
            "bad training hyperparameters".into(),
        ));
    }
    let s = ds.train.len() as f64;
    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    for k in 0..6 {
        mean[k] = ds
            .train
            .iter()
            .map(|&i| ds.samples[i].features[k])
            .sum::<f64>()
            / s;
        let var = ds
            .train
            .iter()
            .map(|&i| (ds.samples[i].features[k] - mean[k]).powi(2))
            .sum::<f64>()
            / s;
        std[k] = if var.sqrt() > 1e-12 * mean[k].abs().max(1e-300) {
            var.sqrt()
        } else {
            1.0
        };
    }
    let scale = ds.output_scale();
    let xb = feature_matrix(ds, &ds.train, &mean, &std);
    let xb_test = feature_matrix(ds, &ds.test, &mean, &std);
    let xt = trunk_inputs(ds.grid);

    let runs: Vec<Result<ComponentRun>> = (0..4)
        .into_par_iter()
        .map(|c| {
            let y = target_matrix(ds, &ds.train, c, scale[c]);
            let y_test = target_matrix(ds, &ds.test, c, scale[c]);
            train_component(
                &xb,
                &xt,
                &y,
                &xb_test,
                &y_test,
                opts,
                derive_seed(opts.seed, c as u64),
            )
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let mut curve = TrainingCurve::default();
    for k in 0..runs[0].rows.len() {
        let rows: Vec<&CurveRow> = runs.iter().map(|r| &r.rows[k]).collect();
        curve.rows.push(CurveRow {
            epoch: rows[0].epoch,
            refit: rows[0].refit,
            train_loss: rows.iter().map(|r| r.train_loss).sum::<f64>() / 4.0,
            test_loss: rows.iter().map(|r| r.test_loss).sum::<f64>() / 4.0,
            test_sup: rows.iter().map(|r| r.test_sup).fold(f64::NAN, f64::max),
        });
    }
    let nets: Vec<ComponentNet> = runs.into_iter().map(|r| r.net).collect();
    let model = OperatorModel {
        latent: opts.latent,
        input_mean: mean,
        input_std: std,
        output_scale: scale,
        range_lo: ds.ranges.lo,
        range_hi: ds.ranges.hi,
        nets: nets.try_into().expect("four components"),
    };
    Ok(Trained { model, curve })
}

fn predict(net: &ComponentNet, xb: &Array2<f64>, t: &Array2<f64>) -> Array2<f64> {
    net.branch.forward(xb).dot(&t.t()) + net.bias
}

fn errors(p: &Array2<f64>, y: &Array2<f64>) -> (f64, f64) {
    if y.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut sq = 0.0;
    let mut sup = 0.0f64;
    ndarray::Zip::from(p).and(y).for_each(|a, b| {
        let d = a - b;
        sq += d * d;
        sup = sup.max(d.abs());
    });
    (sq / y.len() as f64, sup)
}

fn learning_rate(opts: &TrainOptions, epoch: usize) -> f64 {
    if opts.epochs <= 1 {
        return opts.learning_rate;
    }
    let a = (epoch - 1) as f64 / (opts.epochs - 1) as f64;
    opts.learning_rate * (opts.final_learning_rate / opts.learning_rate).powf(a)
}

fn train_component(
    xb: &Array2<f64>,
    xt: &Array2<f64>,
    y: &Array2<f64>,
    xb_test: &Array2<f64>,
    y_test: &Array2<f64>,
    opts: &TrainOptions,
    seed: u64,
) -> Result<ComponentRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = ComponentNet {
        branch: Mlp::new(&dims(6, &opts.hidden, opts.latent), &mut rng),
        trunk: Mlp::new(&dims(2, &opts.hidden, opts.latent), &mut rng),
        bias: y.mean().unwrap_or(0.0),
    };
    let (mut ab, mut at) = (Adam::new(&net.branch), Adam::new(&net.trunk));
    let (mut mb, mut vb) = (0.0, 0.0);
    let norm = 2.0 / y.len() as f64;
    let mut rows = Vec::new();
    let every = opts.checkpoint_every.max(1);

    for epoch in 1..=opts.epochs {
        let acts_b = net.branch.forward_all(xb);
        let acts_t = net.trunk.forward_all(xt);
        let (b, t) = (acts_b.last().unwrap(), acts_t.last().unwrap());
        let mut g = b.dot(&t.t()) + net.bias - y;
        let loss = g.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        g *= norm;
        let gb = g.dot(t);
        let gt = g.t().dot(b);
        let gbias = g.sum();
        let grads_b = net.branch.backward(&acts_b, gb);
        let grads_t = net.trunk.backward(&acts_t, gt);
        let ti = epoch as i32;
        let lr = learning_rate(opts, epoch);
        ab.step(&mut net.branch, &grads_b, lr, ti);
        at.step(&mut net.trunk, &grads_t, lr, ti);
        mb = 0.9 * mb + 0.1 * gbias;
        vb = 0.999 * vb + 0.001 * gbias * gbias;
        net.bias -=
            lr * (mb / (1.0 - 0.9f64.powi(ti))) / ((vb / (1.0 - 0.999f64.powi(ti))).sqrt() + 1e-8);

        if opts.lsq_refit
            && opts.refit_every > 0
            && epoch % opts.refit_every == 0
            && epoch < opts.epochs
        {
            refit_output_layers(&mut net, xb, xt, y, 1, opts.ridge)?;
        }
        if epoch % every == 0 || epoch == opts.epochs {
            rows.push(checkpoint(&net, xb, xt, y, xb_test, y_test, epoch, false));
        }
    }
    if opts.lsq_refit {
        refit_output_layers(&mut net, xb, xt, y, 3, opts.ridge)?;
        rows.push(checkpoint(
            &net,
            xb,
            xt,
            y,
            xb_test,
            y_test,
            opts.epochs,
            true,
        ));
    }
    if !(net.branch.is_finite() && net.trunk.is_finite() && net.bias.is_finite()) {
        return Err(Error::TrainingDiverged {
            epoch: opts.epochs,
            loss: f64::NAN,
        });
    }
    Ok(ComponentRun { net, rows })
}

#[allow(clippy::too_many_arguments)]
fn checkpoint(
    net: &ComponentNet,
    xb: &Array2<f64>,
    xt: &Array2<f64>,
    y: &Array2<f64>,
    xb_test: &Array2<f64>,
    y_test: &Array2<f64>,
    epoch: usize,
    refit: bool,
) -> CurveRow {
    let t = net.trunk.forward(xt);
    let (train_loss, _) = errors(&predict(net, xb, &t), y);
    let (test_loss, test_sup) = if y_test.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        errors(&predict(net, xb_test, &t), y_test)
    };
    CurveRow {
        epoch,
        refit,
        train_loss,
        test_loss,
        test_sup,
    }
}

/// Alternating least squares on the two output layers. With hidden
/// features `H` (branch) and `G` (trunk), each with a ones column, the
/// prediction is `H Wb' Wt G'`; for one factor fixed the other has the
/// closed form `(A'A)^-1 A' C B (B'B)^-1`, lightly ridge-regularized.
fn refit_output_layers(
    net: &mut ComponentNet,
    xb: &Array2<f64>,
    xt: &Array2<f64>,
    y: &Array2<f64>,
    rounds: usize,
    ridge: f64,
) -> Result<()> {
    let hb = hidden_with_ones(&net.branch, xb);
    let ht = hidden_with_ones(&net.trunk, xt);
    let c = y - net.bias;
    for _ in 0..rounds {
        let t = net.trunk.forward(xt);
        let wb = bilinear_solve(&hb, &c, &t, ridge)?;
        set_output_layer(&mut net.branch, &wb);
        let b = net.branch.forward(xb);
        let wt = bilinear_solve(&ht, &c.t().to_owned(), &b, ridge)?;
        set_output_layer(&mut net.trunk, &wt);
    }
    Ok(())
}

fn hidden_with_ones(mlp: &Mlp, x: &Array2<f64>) -> Array2<f64> {
    let acts = mlp.forward_all(x);
    let h = &acts[acts.len() - 2];
    let (s, hd) = h.dim();
    let mut a = Array2::ones((s, hd + 1));
    a.slice_mut(s![.., ..hd]).assign(h);
    a
}

/// `X = argmin |A X' B' - C|`, returned as `p x cols(A)`.
fn bilinear_solve(
    a: &Array2<f64>,
    c: &Array2<f64>,
    b: &Array2<f64>,
    ridge: f64,
) -> Result<Array2<f64>> {
    let rhs = a.t().dot(c).dot(b);
    let left = solve_spd(&a.t().dot(a), &rhs, ridge)?;
    solve_spd(&b.t().dot(b), &left.t().to_owned(), ridge)
}

fn set_output_layer(mlp: &mut Mlp, w: &Array2<f64>) {
    let last = mlp.layers.last_mut().unwrap();
    let hd = last.w.ncols();
    last.w.assign(&w.slice(s![.., ..hd]));
    last.b.assign(&w.column(hd));
}

/// Solve `(m + eps I) x = rhs` for symmetric positive semi-definite `m`.
fn solve_spd(m: &Array2<f64>, rhs: &Array2<f64>, ridge: f64) -> Result<Array2<f64>> {
    let n = m.nrows();
    let trace: f64 = m.diag().sum();
    let eps = (ridge * trace / n as f64).max(1e-14);
    let mut mm = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    for i in 0..n {
        mm[(i, i)] += eps;
    }
    let b = DMatrix::from_fn(rhs.nrows(), rhs.ncols(), |i, j| rhs[[i, j]]);
    let x = match mm.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => mm
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::InvalidParameter("singular least-squares system".into()))?,
    };
    Ok(Array2::from_shape_fn((x.nrows(), x.ncols()), |(i, j)| {
        x[(i, j)]
    }))
}

/// Anything mapping a parameter tuple to tabulated kernels.
pub trait KernelOperator {
    fn predict(&self, params: &NominalParams, grid: TriangleGrid) -> Result<KernelSet>;
}

impl KernelOperator for OperatorModel {
    fn predict(&self, params: &NominalParams, grid: TriangleGrid) -> Result<KernelSet> {
        Ok(self.infer(params, grid).kernels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentError {
    pub max_abs: f64,
    pub mean_abs: f64,
    /// `max_abs` divided by the component's output scale.
    pub max_normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupErrorReport {
    pub components: [ComponentError; 4],
    pub samples: usize,
    pub output_scale: [f64; 4],
}

impl SupErrorReport {
    /// Measured uniform bound over all components, in kernel units.
    pub fn epsilon(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.max_abs)
            .fold(0.0, f64::max)
    }

    pub fn max_normalized(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.max_normalized)
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["component", "max_abs", "mean_abs", "max_normalized"])?;
        for (name, c) in COMPONENTS.iter().zip(&self.components) {
            wr.write_record(&[
                name.to_string(),
                c.max_abs.to_string(),
                c.mean_abs.to_string(),
                c.max_normalized.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<error csv>", e))?;
        Ok(())
    }
}

impl std::fmt::Display for SupErrorReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<6} {:>14} {:>14} {:>14}",
            "kernel", "max abs", "mean abs", "max/scale"
        )?;
        for (name, c) in COMPONENTS.iter().zip(&self.components) {
            writeln!(
                f,
                "{:<6} {:>14.4e} {:>14.4e} {:>14.4e}",
                name, c.max_abs, c.mean_abs, c.max_normalized
            )?;
        }
        write!(f, "({} samples)", self.samples)
    }
}

/// Exact max and mean absolute error over every node of every sample in
/// `split`, per component.
pub fn sup_error<M: KernelOperator + ?Sized>(
    model: &M,
    ds: &KernelDataset,
    split: &[usize],
) -> Result<SupErrorReport> {
    if split.is_empty() {
        return Err(Error::InvalidParameter("empty split".into()));
    }
    let scale = ds.output_scale();
    let mut max = [0.0f64; 4];
    let mut sum = [0.0f64; 4];
    for &i in split {
        let pred = model.predict(&ds.params(i), ds.grid)?;
        let truth = &ds.samples[i].kernels;
        for c in 0..4 {
            let (a, b) = (
                pred.components()[c].values(),
                truth.components()[c].values(),
            );
            for (x, y) in a.iter().zip(b) {
                let d = (x - y).abs();
                max[c] = max[c].max(d);
                sum[c] += d;
            }
        }
    }
    let count = (split.len() * ds.grid.len()) as f64;
    let components = [0, 1, 2, 3].map(|c| ComponentError {
        max_abs: max[c],
        mean_abs: sum[c] / count,
        max_normalized: max[c] / scale[c],
    });
    Ok(SupErrorReport {
        components,
        samples: split.len(),
        output_scale: scale,
    })
}
