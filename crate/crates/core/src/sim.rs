//! First-order upwind solver for the 2x2 plant with piecewise-constant
//! (Markov-jumping) coefficients and a boundary controller at `x = 1`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::kernels::GainSlice;
use crate::markov::DeltaPath;
use crate::params::DeltaState;

/// State `(u, v)` on `m + 1` uniform nodes over `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub mode: usize,
}

impl Snapshot {
    pub fn from_fn(intervals: usize, f_u: impl Fn(f64) -> f64, f_v: impl Fn(f64) -> f64) -> Self {
        let h = 1.0 / intervals as f64;
        Snapshot {
            t: 0.0,
            u: (0..=intervals).map(|i| f_u(i as f64 * h)).collect(),
            v: (0..=intervals).map(|i| f_v(i as f64 * h)).collect(),
            mode: 0,
        }
    }

    pub fn zeros(intervals: usize) -> Self {
        Snapshot::from_fn(intervals, |_| 0.0, |_| 0.0)
    }

    pub fn intervals(&self) -> usize {
        self.u.len() - 1
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.u, &self.v)
    }
}

fn trapezoid_sum(f: impl Iterator<Item = f64>, len: usize) -> f64 {
    let h = 1.0 / (len - 1) as f64;
    let mut acc = 0.0;
    for (i, v) in f.enumerate() {
        let w = if i == 0 || i + 1 == len { 0.5 } else { 1.0 };
        acc += w * v;
    }
    acc * h
}

/// `(int u^2 + v^2 dx)^(1/2)` by the trapezoid rule.
pub fn l2_norm(u: &[f64], v: &[f64]) -> f64 {
    trapezoid_sum(u.iter().zip(v).map(|(a, b)| a * a + b * b), u.len()).sqrt()
}

/// `int |u| + |v| dx` by the trapezoid rule.
pub fn l1_norm(u: &[f64], v: &[f64]) -> f64 {
    trapezoid_sum(u.iter().zip(v).map(|(a, b)| a.abs() + b.abs()), u.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    OpenLoop,
    ExactKernel,
    OperatorKernel,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::OpenLoop => "open_loop",
            ControllerKind::ExactKernel => "exact_kernel",
            ControllerKind::OperatorKernel => "no_kernel",
        }
    }
}

/// Boundary feedback `U = -rho0 u(1) + int Kvu(1,.) u + int Kvv(1,.) v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    kind: ControllerKind,
    gains: Option<GainSlice>,
    rho0: f64,
}

impl Controller {
    pub fn open_loop() -> Self {
        Controller {
            kind: ControllerKind::OpenLoop,
            gains: None,
            rho0: 0.0,
        }
    }

    pub fn exact(gains: GainSlice, rho0: f64) -> Self {
        Controller {
            kind: ControllerKind::ExactKernel,
            gains: Some(gains),
            rho0,
        }
    }

    pub fn operator(gains: GainSlice, rho0: f64) -> Self {
        Controller {
            kind: ControllerKind::OperatorKernel,
            gains: Some(gains),
            rho0,
        }
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn gains(&self) -> Option<&GainSlice> {
        self.gains.as_ref()
    }

    pub fn rho0(&self) -> f64 {
        self.rho0
    }

    /// Same controller with gains interpolated onto `nodes` points.
    pub fn on_grid(&self, nodes: usize) -> Controller {
        Controller {
            kind: self.kind,
            gains: self.gains.as_ref().map(|g| g.resample(nodes)),
            rho0: self.rho0,
        }
    }

    /// Control value for the state `(u, v)`.
    pub fn input(&self, u: &[f64], v: &[f64]) -> f64 {
        let Some(g) = &self.gains else {
            return 0.0;
        };
        let n = u.len();
        let resampled;
        let g = if g.len() == n {
            g
        } else {
            resampled = g.resample(n);
            &resampled
        };
        let integral = trapezoid_sum((0..n).map(|i| g.kvu[i] * u[i] + g.kvv[i] * v[i]), n);
        -self.rho0 * u[n - 1] + integral
    }
}

pub fn control_input(controller: &Controller, snapshot: &Snapshot) -> f64 {
    controller.input(&snapshot.u, &snapshot.v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Number of spatial cells; the grid has `intervals + 1` nodes.
    pub intervals: usize,
    pub horizon: f64,
    /// Output spacing for snapshots, controls and norms.
    pub cadence: f64,
    pub cfl: f64,
    /// Keep full snapshots at every output time (norms are always kept).
    pub keep_snapshots: bool,
}

impl SimConfig {
    pub fn new(intervals: usize, horizon: f64, cadence: f64) -> Self {
        SimConfig {
            intervals,
            horizon,
            cadence,
            cfl: 0.9,
            keep_snapshots: true,
        }
    }
}

/// Outputs of one simulation at the output cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    pub controls: Vec<f64>,
    pub norms: Vec<f64>,
    pub modes: Vec<usize>,
    pub delta_path: DeltaPath,
    pub steps: usize,
}

impl Trajectory {
    /// Long-format CSV `t,x,u,v`.
    pub fn write_fields_csv<W: Write>(&self, w: W, domain_length: f64) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "x", "u", "v"])?;
        for s in &self.snapshots {
            let m = s.intervals();
            for i in 0..=m {
                let x = domain_length * i as f64 / m as f64;
                wr.write_record(&[
                    s.t.to_string(),
                    x.to_string(),
                    s.u[i].to_string(),
                    s.v[i].to_string(),
                ])?;
            }
        }
        wr.flush().map_err(|e| Error::io("<trajectory csv>", e))?;
        Ok(())
    }

    /// Side file `t,U,mode,norm`.
    pub fn write_side_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "U", "mode", "norm"])?;
        for k in 0..self.times.len() {
            wr.write_record(&[
                self.times[k].to_string(),
                self.controls[k].to_string(),
                self.modes[k].to_string(),
                self.norms[k].to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<trajectory csv>", e))?;
        Ok(())
    }
}

struct Coefficients {
    state: DeltaState,
    sp: Vec<f64>,
    sm: Vec<f64>,
}

/// Integrate the plant from `initial` along `path` under `controller`.
///
/// The time step is `cfl * dx / max(lambda, mu)` over all states of the
/// path, shortened so that every jump time and output time is a step
/// boundary. Each step does the interior upwind update with explicit
/// sources, then `v(1) = rho u(1) + U`, then `u(0) = phi v(0)`.
pub fn simulate(
    initial: &Snapshot,
    path: &DeltaPath,
    controller: &Controller,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    let m = cfg.intervals;
    if initial.u.len() != m + 1 || initial.v.len() != m + 1 {
        return Err(Error::GridMismatch(format!(
            "initial state has {} nodes, config expects {}",
            initial.u.len(),
            m + 1
        )));
    }
    if !(cfg.horizon > 0.0) || !(cfg.cadence > 0.0) || !(cfg.cfl > 0.0 && cfg.cfl <= 1.0) {
        return Err(Error::InvalidParameter("bad simulation config".into()));
    }
    if path.horizon < cfg.horizon {
        return Err(Error::HorizonMismatch(path.horizon, cfg.horizon));
    }
    let dx = 1.0 / m as f64;
    let (lmax, mmax) = path.max_speeds();
    let dt_max = cfg.cfl * dx / lmax.max(mmax);
    let ctrl = controller.on_grid(m + 1);

    let mut breaks: Vec<f64> = path
        .jump_times
        .iter()
        .copied()
        .filter(|&t| t > 0.0 && t < cfg.horizon)
        .collect();
    let outputs = (cfg.horizon / cfg.cadence + 1e-9).floor() as usize;
    let out_times: Vec<f64> = (0..=outputs).map(|k| k as f64 * cfg.cadence).collect();
    breaks.extend(out_times.iter().copied().filter(|&t| t > 0.0));
    breaks.push(cfg.horizon);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let mut cache: Vec<Coefficients> = Vec::new();
    let coeff_index = |state: &DeltaState, cache: &mut Vec<Coefficients>| -> usize {
        if let Some(k) = cache.iter().position(|c| &c.state == state) {
            return k;
        }
        let xs = (0..=m).map(|i| i as f64 * dx);
        cache.push(Coefficients {
            state: state.clone(),
            sp: xs.clone().map(|x| state.sigma_plus.eval(x)).collect(),
            sm: xs.map(|x| state.sigma_minus.eval(x)).collect(),
        });
        cache.len() - 1
    };

    let mut u = initial.u.clone();
    let mut v = initial.v.clone();
    let mut un = vec![0.0; m + 1];
    let mut vn = vec![0.0; m + 1];
    let mut traj = Trajectory {
        times: Vec::with_capacity(out_times.len()),
        snapshots: Vec::new(),
        controls: Vec::with_capacity(out_times.len()),
        norms: Vec::with_capacity(out_times.len()),
        modes: Vec::with_capacity(out_times.len()),
        delta_path: path.clone(),
        steps: 0,
    };
    let mut next_out = 0usize;
    let record = |t: f64, u: &[f64], v: &[f64], mode: usize, traj: &mut Trajectory| {
        traj.times.push(t);
        traj.controls.push(ctrl.input(u, v));
        traj.norms.push(l2_norm(u, v));
        traj.modes.push(mode);
        if cfg.keep_snapshots {
            traj.snapshots.push(Snapshot {
                t,
                u: u.to_vec(),
                v: v.to_vec(),
                mode,
            });
        }
    };

    let mut t = 0.0;
    let mut seg = 0usize;
    let mut step = 0usize;
    let state0 = path.state_at(0.0);
    record(0.0, &u, &v, state0.mode, &mut traj);
    next_out += 1;
    while seg < breaks.len() {
        let end = breaks[seg];
        let state = path.state_at(t);
        let ci = coeff_index(state, &mut cache);
        let coef = &cache[ci];
        let nsteps = ((end - t) / dt_max).ceil().max(1.0) as usize;
        let dt = (end - t) / nsteps as f64;
        let cl = state.lambda * dt / dx;
        let cm = state.mu * dt / dx;
        for _ in 0..nsteps {
            for i in 1..=m {
                un[i] = u[i] - cl * (u[i] - u[i - 1]) + dt * coef.sp[i] * v[i];
            }
            for i in 0..m {
                vn[i] = v[i] + cm * (v[i + 1] - v[i]) + dt * coef.sm[i] * u[i];
            }
            un[0] = u[0];
            vn[m] = v[m];
            let control = ctrl.input(&un, &vn);
            vn[m] = state.rho * un[m] + control;
            un[0] = state.phi * vn[0];
            std::mem::swap(&mut u, &mut un);
            std::mem::swap(&mut v, &mut vn);
            step += 1;
        }
        t = end;
        if !(u.iter().chain(v.iter()).all(|x| x.is_finite())) {
            return Err(Error::NonFiniteState { step, t });
        }
        if next_out < out_times.len() && (t - out_times[next_out]).abs() < 1e-9 {
            record(
                out_times[next_out],
                &u,
                &v,
                path.state_at(t).mode,
                &mut traj,
            );
            next_out += 1;
        }
        seg += 1;
    }
    traj.steps = step;
    Ok(traj)
}
