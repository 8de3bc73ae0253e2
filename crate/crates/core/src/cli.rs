//! `mbs` command line: configuration, experiment orchestration and CSV
//! output.
//!
//! Configuration is TOML with dotted sections (`road.length_m`, `mc.runs`,
//! ...). Every key has a typed default, unknown keys are rejected, and
//! `--set key=value` overrides are applied last. Each run writes
//! `manifest.toml` to the output directory; it is itself a valid config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::kernels::{
    gain_slice, kernel_residual, solve_kernels_with, KernelSet, KernelSolverOptions, TriangleGrid,
};
use crate::markov::{sample_path, solve_kolmogorov, PathSource};
use crate::operator::{
    generate_dataset, sup_error, train, DatasetOptions, KernelDataset, OperatorModel, ParamRanges,
    TrainOptions,
};
use crate::params::NominalParams;
use crate::sim::{simulate, Controller, SimConfig, Trajectory};
use crate::stability::{mc_mean_square, LyapunovParams, McSetup};
use crate::traffic::{build_scenario, TrafficConfig, TrafficScenario, KMH, VEH_PER_KM};

const DEFAULTS: &str = r#"
[road]
length_m = 500.0

[traffic]
vf_kmh = 144.0
rho_max_veh_km = 160.0
rho_star_veh_km = 120.0
v_star_kmh = 36.0
iota_s = 60.0
gamma = 1.0

[chain]
densities_veh_km = [100.0, 118.0, 120.0, 122.0, 150.0]
initial_probs = [0.02, 0.32, 0.32, 0.32, 0.02]

[sim]
horizon_s = 200.0
grid_m = 200
cadence_s = 0.5
cfl = 0.9

[mc]
runs = 50
seed = 0
fit_start_s = -1.0
lyapunov = false

[kernels]
n = 64
max_sweeps = 200
tolerance = 1e-10

[dataset]
samples = 1000
grid_n = 32
seed = 0
range_rel = 0.2
train_fraction = 0.9
residual_threshold = 0.5

[operator]
latent = 32
hidden = [64, 512]
learning_rate = 1e-3
final_learning_rate = 1e-3
epochs = 1500
seed = 0
checkpoint_every = 50
lsq_refit = true
ridge = 1e-8

[lyapunov]
# Values <= 0 select nu = 0.5 min(lambda, mu) and a = 1 + max phi^2 over the modes.
nu = -1.0
a = -1.0

[bench]
trials = 100
"#;

/// Resolved configuration: every known key with its value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, toml::Value>,
}

fn flatten(prefix: &str, t: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in t {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(sub) => flatten(&key, sub, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn same_kind(default: &toml::Value, v: &toml::Value) -> bool {
    use toml::Value::*;
    match (default, v) {
        (Float(_), Float(_) | Integer(_)) => true,
        (Integer(_), Integer(_)) | (Boolean(_), Boolean(_)) | (String(_), String(_)) => true,
        (Array(_), Array(a)) => a.iter().all(|x| matches!(x, Float(_) | Integer(_))),
        _ => false,
    }
}

impl RunConfig {
    pub fn defaults() -> RunConfig {
        let t: toml::Table = DEFAULTS.parse().expect("built-in defaults parse");
        let mut values = BTreeMap::new();
        flatten("", &t, &mut values);
        RunConfig { values }
    }

    /// Overlay a TOML document. A top-level `manifest` table is ignored so
    /// manifests can be fed back in.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        let mut t: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        t.remove("manifest");
        let mut flat = BTreeMap::new();
        flatten("", &t, &mut flat);
        for (k, v) in flat {
            self.set_value(&k, v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply one `key=value` override; the value uses TOML syntax.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        let doc: toml::Table = format!("v = {}", v.trim())
            .parse()
            .map_err(|e| Error::Config(format!("{assignment}: {e}")))?;
        self.set_value(k.trim(), doc["v"].clone())
    }

    fn set_value(&mut self, key: &str, v: toml::Value) -> Result<()> {
        let default = self
            .values
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
        if !same_kind(default, &v) {
            return Err(Error::Config(format!(
                "{key}: expected {}, got {v}",
                default.type_str()
            )));
        }
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    pub fn f64(&self, key: &str) -> f64 {
        let v = &self.values[key];
        v.as_float()
            .or_else(|| v.as_integer().map(|i| i as f64))
            .expect("type-checked")
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let i = self.values[key].as_integer().expect("type-checked");
        usize::try_from(i).map_err(|_| Error::Config(format!("{key} must be >= 0")))
    }

    pub fn bool(&self, key: &str) -> bool {
        self.values[key].as_bool().expect("type-checked")
    }

    pub fn list(&self, key: &str) -> Vec<f64> {
        self.values[key]
            .as_array()
            .expect("type-checked")
            .iter()
            .map(|x| {
                x.as_float()
                    .or_else(|| x.as_integer().map(|i| i as f64))
                    .unwrap()
            })
            .collect()
    }

    /// Nested TOML of every resolved key.
    pub fn to_table(&self) -> toml::Table {
        let mut root = toml::Table::new();
        for (k, v) in &self.values {
            let (section, name) = k.split_once('.').expect("dotted key");
            root.entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .unwrap()
                .insert(name.to_string(), v.clone());
        }
        root
    }

    pub fn traffic(&self) -> Result<TrafficConfig> {
        Ok(TrafficConfig {
            length_m: self.f64("road.length_m"),
            vf_kmh: self.f64("traffic.vf_kmh"),
            rho_max_veh_km: self.f64("traffic.rho_max_veh_km"),
            rho_star_veh_km: self.f64("traffic.rho_star_veh_km"),
            v_star_kmh: self.f64("traffic.v_star_kmh"),
            iota_s: self.f64("traffic.iota_s"),
            gamma: self.f64("traffic.gamma"),
            densities_veh_km: self.list("chain.densities_veh_km"),
            initial_probs: self.list("chain.initial_probs"),
            horizon_s: self.f64("sim.horizon_s"),
            grid_m: self.usize("sim.grid_m")?,
        })
    }

    pub fn kernel_options(&self) -> Result<KernelSolverOptions> {
        Ok(KernelSolverOptions {
            max_sweeps: self.usize("kernels.max_sweeps")?,
            tolerance: self.f64("kernels.tolerance"),
        })
    }

    pub fn dataset_options(&self) -> Result<DatasetOptions> {
        Ok(DatasetOptions {
            samples: self.usize("dataset.samples")?,
            grid_n: self.usize("dataset.grid_n")?,
            seed: self.usize("dataset.seed")? as u64,
            train_fraction: self.f64("dataset.train_fraction"),
            residual_threshold: self.f64("dataset.residual_threshold"),
            ..Default::default()
        })
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        Ok(TrainOptions {
            latent: self.usize("operator.latent")?,
            hidden: self
                .list("operator.hidden")
                .iter()
                .map(|&h| h as usize)
                .collect(),
            learning_rate: self.f64("operator.learning_rate"),
            final_learning_rate: self.f64("operator.final_learning_rate"),
            epochs: self.usize("operator.epochs")?,
            seed: self.usize("operator.seed")? as u64,
            checkpoint_every: self.usize("operator.checkpoint_every")?,
            lsq_refit: self.bool("operator.lsq_refit"),
            ridge: self.f64("operator.ridge"),
            ..Default::default()
        })
    }

    fn sim_config(&self) -> Result<SimConfig> {
        let mut c = SimConfig::new(
            self.usize("sim.grid_m")?,
            self.f64("sim.horizon_s"),
            self.f64("sim.cadence_s"),
        );
        c.cfl = self.f64("sim.cfl");
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerArg {
    Open,
    Exact,
    No,
}

#[derive(Debug, Parser)]
#[command(
    name = "mbs",
    version,
    about = "Backstepping boundary control of Markov-jumping hyperbolic systems"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set mc.runs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the kernel equations for the nominal traffic plant.
    Kernels,
    /// Generate the operator training set.
    Dataset,
    /// Train the neural operator on a saved dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Held-out error report of a trained model.
    EvalOperator {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// One seeded run in Riemann coordinates.
    Simulate {
        #[arg(long, value_enum, default_value = "exact")]
        controller: ControllerArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Monte-Carlo mean-square decay.
    Mc {
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_enum, default_value = "exact")]
        controller: ControllerArg,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Freeway demo: open loop against closed loop, physical fields.
    TrafficDemo {
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long, value_enum, default_value = "exact")]
        controller: ControllerArg,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Timing of the kernel solver against operator inference.
    BenchGains {
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Kernels => "kernels",
            Command::Dataset => "dataset",
            Command::Train { .. } => "train",
            Command::EvalOperator { .. } => "eval-operator",
            Command::Simulate { .. } => "simulate",
            Command::Mc { .. } => "mc",
            Command::TrafficDemo { .. } => "traffic-demo",
            Command::BenchGains { .. } => "bench-gains",
        }
    }
}

/// Entry point of the `mbs` binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::defaults();
    if let Some(p) = &cli.config {
        cfg.merge_file(p)?;
    }
    for s in &cli.overrides {
        cfg.set(s)?;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    let out = &cli.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_manifest(out, cli, &cfg)?;
    let ctx = Context { cfg: &cfg, out };
    match &cli.command {
        Command::Kernels => ctx.kernels(),
        Command::Dataset => ctx.dataset(),
        Command::Train { dataset } => ctx.train(dataset.as_deref()),
        Command::EvalOperator { dataset, model } => ctx.eval(dataset.as_deref(), model.as_deref()),
        Command::Simulate {
            controller,
            seed,
            model,
        } => ctx.simulate(*controller, *seed, model.as_deref()),
        Command::Mc {
            runs,
            controller,
            model,
        } => ctx.mc(*runs, *controller, model.as_deref()),
        Command::TrafficDemo {
            runs,
            controller,
            model,
        } => ctx.traffic_demo(*runs, *controller, model.as_deref()),
        Command::BenchGains { trials, model } => ctx.bench(*trials, model.as_deref()),
    }
}

fn write_manifest(out: &Path, cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let mut t = cfg.to_table();
    let mut m = toml::Table::new();
    m.insert("command".into(), cli.command.name().into());
    m.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    m.insert("args".into(), std::env::args().collect::<Vec<_>>().into());
    t.insert("manifest".into(), m.into());
    let path = out.join("manifest.toml");
    fs::write(&path, t.to_string()).map_err(|e| Error::io(&path, e))
}

struct Context<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

impl Context<'_> {
    fn scenario(&self) -> Result<TrafficScenario> {
        build_scenario(&self.cfg.traffic()?)
    }

    fn nominal_kernels(&self, sc: &TrafficScenario) -> Result<KernelSet> {
        solve_kernels_with(
            &sc.nominal_params(),
            self.cfg.usize("kernels.n")?,
            self.cfg.kernel_options()?,
        )
    }

    fn ranges(&self, sc: &TrafficScenario) -> ParamRanges {
        ParamRanges::around(&sc.nominal_params(), self.cfg.f64("dataset.range_rel"))
    }

    fn model_path(&self, model: Option<&Path>) -> PathBuf {
        model
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.out.join("model.nokb"))
    }

    fn load_model(&self, model: Option<&Path>) -> Result<OperatorModel> {
        let p = self.model_path(model);
        if !p.exists() {
            return Err(Error::Config(format!(
                "no operator model at {}; run `mbs train` first or pass --model",
                p.display()
            )));
        }
        OperatorModel::load(&p)
    }

    fn controller(
        &self,
        kind: ControllerArg,
        sc: &TrafficScenario,
        model: Option<&Path>,
    ) -> Result<Controller> {
        let nom = sc.nominal_params();
        Ok(match kind {
            ControllerArg::Open => Controller::open_loop(),
            ControllerArg::Exact => {
                Controller::exact(gain_slice(&self.nominal_kernels(sc)?), nom.rho0)
            }
            ControllerArg::No => {
                let m = self.load_model(model)?;
                let inf = m.infer(&nom, TriangleGrid::new(self.cfg.usize("kernels.n")?)?);
                if inf.out_of_range {
                    eprintln!(
                        "warning: nominal parameters lie outside the operator's training box"
                    );
                }
                Controller::operator(gain_slice(&inf.kernels), nom.rho0)
            }
        })
    }

    fn kernels(&self) -> Result<()> {
        let sc = self.scenario()?;
        let start = Instant::now();
        let k = self.nominal_kernels(&sc)?;
        let elapsed = start.elapsed();
        k.save_csv(&self.out.join("kernels.csv"))?;
        let rep = kernel_residual(&k);
        rep.write_csv(create(&self.out.join("residual.csv"))?)?;
        let g = gain_slice(&k);
        let mut w = csv::Writer::from_writer(create(&self.out.join("gains.csv"))?);
        w.write_record(["xi", "Kvu", "Kvv"])?;
        let h = 1.0 / (g.len() - 1) as f64;
        for j in 0..g.len() {
            w.write_record(&[
                (j as f64 * h).to_string(),
                g.kvu[j].to_string(),
                g.kvv[j].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(self.out, e))?;
        println!(
            "kernels: n={} solved in {:.3} ms, residual pde={:.3e} boundary={:.3e}",
            k.grid().n(),
            elapsed.as_secs_f64() * 1e3,
            rep.pde_max(),
            rep.boundary_max()
        );
        Ok(())
    }

    fn dataset_dir(&self, d: Option<&Path>) -> PathBuf {
        d.map(Path::to_path_buf)
            .unwrap_or_else(|| self.out.join("dataset"))
    }

    fn dataset(&self) -> Result<()> {
        let sc = self.scenario()?;
        let opts = self.cfg.dataset_options()?;
        let start = Instant::now();
        let ds = generate_dataset(&self.ranges(&sc), &opts)?;
        ds.save(&self.dataset_dir(None))?;
        let worst = ds.samples.iter().map(|s| s.residual).fold(0.0, f64::max);
        println!(
            "dataset: {} samples ({} train / {} test) in {:.1} s, redraws {}, max residual {:.3e}",
            ds.samples.len(),
            ds.train.len(),
            ds.test.len(),
            start.elapsed().as_secs_f64(),
            ds.redraws,
            worst
        );
        Ok(())
    }

    fn train(&self, dataset: Option<&Path>) -> Result<()> {
        let ds = KernelDataset::load(&self.dataset_dir(dataset))?;
        let start = Instant::now();
        let trained = train(&ds, &self.cfg.train_options()?)?;
        trained.model.save(&self.out.join("model.nokb"))?;
        trained
            .curve
            .write_csv(create(&self.out.join("training_curve.csv"))?)?;
        let rep = sup_error(&trained.model, &ds, &ds.test)?;
        rep.write_csv(create(&self.out.join("operator_error.csv"))?)?;
        println!("train: {:.1} s", start.elapsed().as_secs_f64());
        println!("{rep}");
        Ok(())
    }

    fn eval(&self, dataset: Option<&Path>, model: Option<&Path>) -> Result<()> {
        let ds = KernelDataset::load(&self.dataset_dir(dataset))?;
        let m = self.load_model(model)?;
        let rep = sup_error(&m, &ds, &ds.test)?;
        rep.write_csv(create(&self.out.join("operator_error.csv"))?)?;
        println!("{rep}");
        Ok(())
    }

    fn simulate(&self, kind: ControllerArg, seed: u64, model: Option<&Path>) -> Result<()> {
        let sc = self.scenario()?;
        let ctrl = self.controller(kind, &sc, model)?;
        let path = sc.delta_path(seed)?;
        let tr = simulate(
            &sc.initial_snapshot(sc.grid_m),
            &path,
            &ctrl,
            &self.cfg.sim_config()?,
        )?;
        tr.write_fields_csv(create(&self.out.join("trajectory.csv"))?, 1.0)?;
        tr.write_side_csv(create(&self.out.join("side.csv"))?)?;
        println!(
            "simulate: {} controller, {} jumps, |w(T)|/|w(0)| = {:.3e}",
            ctrl.kind().name(),
            path.jump_times.len() - 1,
            tr.norms.last().unwrap() / tr.norms[0]
        );
        Ok(())
    }

    fn mc(&self, runs: Option<usize>, kind: ControllerArg, model: Option<&Path>) -> Result<()> {
        let sc = self.scenario()?;
        let nom = sc.nominal_params();
        let runs = runs.unwrap_or(self.cfg.usize("mc.runs")?);
        let fit_start = match self.cfg.f64("mc.fit_start_s") {
            t if t >= 0.0 => t,
            _ => nom.transport_time(),
        };
        let lyapunov = if self.cfg.bool("mc.lyapunov") {
            let modes: Vec<_> = (0..sc.modes()).map(|j| sc.delta_state(j)).collect();
            let mut p = LyapunovParams::speed_scaled(&modes);
            if self.cfg.f64("lyapunov.nu") > 0.0 {
                p.nu = self.cfg.f64("lyapunov.nu");
            }
            if self.cfg.f64("lyapunov.a") > 0.0 {
                p.a = self.cfg.f64("lyapunov.a");
            }
            Some((self.nominal_kernels(&sc)?, LyapunovParams::new(p.nu, p.a)?))
        } else {
            None
        };
        let mut sim = self.cfg.sim_config()?;
        sim.keep_snapshots = false;
        let setup = McSetup {
            initial: sc.initial_snapshot(sc.grid_m),
            controller: self.controller(kind, &sc, model)?,
            sim,
            fit_start,
            nominal: nom,
            lyapunov,
        };
        let start = Instant::now();
        let rep = mc_mean_square(&setup, &sc, runs, self.cfg.usize("mc.seed")? as u64)?;
        rep.write_csv(create(&self.out.join("decay.csv"))?)?;
        if let Some(l) = &rep.lyapunov {
            let mut w = csv::Writer::from_writer(create(&self.out.join("lyapunov.csv"))?);
            w.write_record(["t", "mean_lyapunov"])?;
            for (t, v) in rep.times.iter().zip(l) {
                w.write_record(&[t.to_string(), v.to_string()])?;
            }
            w.flush().map_err(|e| Error::io(self.out, e))?;
        }
        let summary = format!(
            "{}\nfinal_ratio={:.6e} median_time_to_tenth_s={} dispersion={:.6e} fit_start_s={}\n",
            rep.summary(),
            rep.final_ratio(),
            rep.median_time_to_tenth(),
            rep.dispersion,
            fit_start
        );
        let path = self.out.join("mc_summary.txt");
        fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
        print!(
            "mc: {runs} runs in {:.1} s\n{summary}",
            start.elapsed().as_secs_f64()
        );
        Ok(())
    }

    fn traffic_demo(&self, runs: usize, kind: ControllerArg, model: Option<&Path>) -> Result<()> {
        let sc = self.scenario()?;
        let sim = self.cfg.sim_config()?;
        let chain = sc.chain()?;
        let t_grid: Vec<f64> = (0..=(sc.horizon as usize)).map(|t| t as f64).collect();
        solve_kolmogorov(&chain, &t_grid)?.write_csv(
            &sc.initial_probs,
            create(&self.out.join("probabilities.csv"))?,
        )?;

        let closed = if kind == ControllerArg::Open {
            ControllerArg::Exact
        } else {
            kind
        };
        let ctrl = self.controller(closed, &sc, model)?;
        let exact = if closed == ControllerArg::No {
            Some(self.controller(ControllerArg::Exact, &sc, None)?)
        } else {
            None
        };
        let init = sc.initial_snapshot(sc.grid_m);
        for r in 0..runs.max(1) {
            let seed = crate::markov::derive_seed(self.cfg.usize("mc.seed")? as u64, r as u64);
            let suffix = if runs > 1 {
                format!("_run{r}")
            } else {
                String::new()
            };
            let mode_path = sample_path(&chain, seed, sc.horizon)?;
            let mut w =
                csv::Writer::from_writer(create(&self.out.join(format!("mode_path{suffix}.csv")))?);
            w.write_record(["t", "mode", "rho_star_veh_km"])?;
            for (t, m) in mode_path.jump_times.iter().zip(&mode_path.modes) {
                w.write_record(&[
                    t.to_string(),
                    (m + 1).to_string(),
                    (sc.densities[*m] / VEH_PER_KM).to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(self.out, e))?;
            let path = sc.sample(seed, sc.horizon)?;
            let open = simulate(&init, &path, &Controller::open_loop(), &sim)?;
            let cl = simulate(&init, &path, &ctrl, &sim)?;
            let tag = if closed == ControllerArg::No {
                "no"
            } else {
                "exact"
            };
            self.write_demo(&sc, &open, &format!("open{suffix}"))?;
            self.write_demo(&sc, &cl, &format!("{tag}{suffix}"))?;
            let mut line = format!(
                "run {r}: {} jumps, |w(T)|/|w(0)| open {:.3e}, {tag} {:.3e}",
                path.jump_times.len() - 1,
                open.norms.last().unwrap() / open.norms[0],
                cl.norms.last().unwrap() / cl.norms[0]
            );
            if let Some(ex) = &exact {
                let ex_tr = simulate(&init, &path, ex, &sim)?;
                self.write_demo(&sc, &ex_tr, &format!("exact{suffix}"))?;
                let (dr, dv) = state_gap(&sc, &ex_tr, &cl)?;
                let mut w = csv::Writer::from_writer(create(
                    &self.out.join(format!("state_error{suffix}.csv")),
                )?);
                w.write_record(["quantity", "max_abs"])?;
                w.write_record(["rho_veh_km", &dr.to_string()])?;
                w.write_record(["v_kmh", &dv.to_string()])?;
                w.flush().map_err(|e| Error::io(self.out, e))?;
                line.push_str(&format!(
                    ", exact vs operator: max|drho| {dr:.4} veh/km, max|dv| {dv:.4} km/h"
                ));
            }
            println!("{line}");
        }
        Ok(())
    }

    fn write_demo(&self, sc: &TrafficScenario, tr: &Trajectory, tag: &str) -> Result<()> {
        sc.write_fields_csv(
            &tr.snapshots,
            create(&self.out.join(format!("fields_{tag}.csv")))?,
        )?;
        let mut w = csv::Writer::from_writer(create(&self.out.join(format!("side_{tag}.csv")))?);
        w.write_record(["t", "U", "speed_limit_kmh", "mode", "norm"])?;
        for k in 0..tr.times.len() {
            let speed = (sc.nominal.v_star + tr.controls[k] / sc.nominal.rho_star) / KMH;
            w.write_record(&[
                tr.times[k].to_string(),
                tr.controls[k].to_string(),
                speed.to_string(),
                (tr.modes[k] + 1).to_string(),
                tr.norms[k].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(self.out, e))?;
        Ok(())
    }

    fn bench(&self, trials: Option<usize>, model: Option<&Path>) -> Result<()> {
        let sc = self.scenario()?;
        let nom = sc.nominal_params();
        let m = self.load_model(model)?;
        let trials = trials.unwrap_or(self.cfg.usize("bench.trials")?).max(1);
        let n = self.cfg.usize("kernels.n")?;
        let rows = bench_gains(&nom, &m, n, trials, self.cfg.kernel_options()?)?;
        let mut w = csv::Writer::from_writer(create(&self.out.join("bench.csv"))?);
        w.write_record(["method", "trials", "median_s", "p90_s"])?;
        for r in &rows {
            w.write_record(&[
                r.method.to_string(),
                r.trials.to_string(),
                r.median_s.to_string(),
                r.p90_s.to_string(),
            ])?;
            println!(
                "{:<18} trials={} median={:.3e} s p90={:.3e} s",
                r.method, r.trials, r.median_s, r.p90_s
            );
        }
        w.flush().map_err(|e| Error::io(self.out, e))?;
        println!(
            "speedup (median): {:.1}x",
            rows[0].median_s / rows[1].median_s
        );
        Ok(())
    }
}

/// Largest density and speed difference (veh/km, km/h) between two runs
/// over all stored snapshots.
pub fn state_gap(sc: &TrafficScenario, a: &Trajectory, b: &Trajectory) -> Result<(f64, f64)> {
    let mut dr = 0.0f64;
    let mut dv = 0.0f64;
    for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
        let fa = sc.fields(sa)?;
        let fb = sc.fields(sb)?;
        for i in 0..fa.rho.len() {
            dr = dr.max((fa.rho[i] - fb.rho[i]).abs() / VEH_PER_KM);
            dv = dv.max((fa.v[i] - fb.v[i]).abs() / KMH);
        }
    }
    Ok((dr, dv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: &'static str,
    pub trials: usize,
    pub median_s: f64,
    pub p90_s: f64,
}

fn quantiles(mut t: Vec<f64>) -> (f64, f64) {
    t.sort_by(f64::total_cmp);
    let n = t.len();
    let median = if n % 2 == 1 {
        t[n / 2]
    } else {
        0.5 * (t[n / 2 - 1] + t[n / 2])
    };
    let p90 = t[((0.9 * n as f64).ceil() as usize).clamp(1, n) - 1];
    (median, p90)
}

/// Rows `solver`, `operator` (trunk basis cached per grid) and
/// `operator_uncached`, each timed over `trials` repetitions.
pub fn bench_gains(
    nominal: &NominalParams,
    model: &OperatorModel,
    n: usize,
    trials: usize,
    opts: KernelSolverOptions,
) -> Result<Vec<BenchRow>> {
    let grid = TriangleGrid::new(n)?;
    let mut solver = Vec::with_capacity(trials);
    for _ in 0..trials {
        let s = Instant::now();
        std::hint::black_box(solve_kernels_with(nominal, n, opts)?);
        solver.push(s.elapsed().as_secs_f64());
    }
    let basis = model.prepare(grid);
    let cached: Vec<f64> = (0..trials)
        .map(|_| {
            std::hint::black_box(model.infer_with(&basis, nominal))
                .elapsed
                .as_secs_f64()
        })
        .collect();
    let uncached: Vec<f64> = (0..trials)
        .map(|_| {
            std::hint::black_box(model.infer(nominal, grid))
                .elapsed
                .as_secs_f64()
        })
        .collect();
    Ok([
        ("solver", solver),
        ("operator", cached),
        ("operator_uncached", uncached),
    ]
    .into_iter()
    .map(|(method, t)| {
        let (median_s, p90_s) = quantiles(t);
        BenchRow {
            method,
            trials,
            median_s,
            p90_s,
        }
    })
    .collect())
}
