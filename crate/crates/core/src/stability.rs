//! Lyapunov functional in target coordinates and Monte-Carlo estimates of
//! mean-square decay.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{backstepping_transform, Direction, KernelSet};
use crate::markov::{derive_seed, DeltaPath, PathSource};
use crate::params::{DeltaState, NominalParams};
use crate::sim::{simulate, Controller, SimConfig, Snapshot};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovParams {
    pub nu: f64,
    pub a: f64,
}

impl LyapunovParams {
    pub fn new(nu: f64, a: f64) -> Result<Self> {
        if !(nu > 0.0 && a > 0.0 && nu.is_finite() && a.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need nu > 0 and a > 0, got {nu}, {a}"
            )));
        }
        Ok(LyapunovParams { nu, a })
    }

    /// `nu = 0.5`, `a = 1 + max phi^2` over the given boundary gains.
    pub fn default_for(phis: impl IntoIterator<Item = f64>) -> Self {
        let m = phis.into_iter().map(|p| p * p).fold(0.0, f64::max);
        LyapunovParams {
            nu: 0.5,
            a: 1.0 + m,
        }
    }

    /// Like [`default_for`](Self::default_for) but with
    /// `nu = 0.5 min_j min(lambda_j, mu_j)`, so the weights stay within
    /// `e^{+-0.5}` whatever the time unit of the speeds.
    pub fn speed_scaled(modes: &[DeltaState]) -> Self {
        let mut p = Self::default_for(modes.iter().map(|d| d.phi));
        let slowest = modes
            .iter()
            .map(|d| d.lambda.min(d.mu))
            .fold(f64::INFINITY, f64::min);
        if slowest.is_finite() {
            p.nu *= slowest;
        }
        p
    }
}

/// `V = int_0^1 e^{-nu x / lambda} / lambda * alpha^2 + a e^{nu x / mu} / mu * beta^2 dx`
/// by the trapezoid rule; `target.u` holds `alpha`, `target.v` holds `beta`.
pub fn lyapunov_value(target: &Snapshot, delta: &DeltaState, p: &LyapunovParams) -> f64 {
    let m = target.intervals();
    let h = 1.0 / m as f64;
    let mut sum = 0.0;
    for i in 0..=m {
        let x = i as f64 * h;
        let w = if i == 0 || i == m { 0.5 } else { 1.0 };
        let a2 = target.u[i] * target.u[i];
        let b2 = target.v[i] * target.v[i];
        sum += w
            * ((-p.nu * x / delta.lambda).exp() / delta.lambda * a2
                + p.a * (p.nu * x / delta.mu).exp() / delta.mu * b2);
    }
    sum * h
}

/// Snapshot mapped to `(alpha, beta)` with the kernels resampled onto its grid.
pub fn target_coordinates(snap: &Snapshot, kernels: &KernelSet) -> Result<Snapshot> {
    let k = kernels.resample(snap.u.len())?;
    let (u, v) = backstepping_transform(&snap.u, &snap.v, &k, Direction::Forward)?;
    Ok(Snapshot {
        t: snap.t,
        u,
        v,
        mode: snap.mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayEstimate {
    pub kappa_hat: f64,
    /// Fitted rate in `log y = log kappa - sigma t`.
    pub sigma_hat: f64,
    pub r_squared: f64,
    pub n_runs: usize,
    pub n_points: usize,
    /// Nonpositive or non-finite values left out of the fit.
    pub excluded: usize,
    /// 95% normal-approximation interval for `sigma_hat`.
    pub band: (f64, f64),
}

impl DecayEstimate {
    /// The fit is usable when `r^2 >= 0.8`.
    pub fn accepted(&self) -> bool {
        self.r_squared >= 0.8
    }

    pub fn curve(&self, t: f64) -> f64 {
        self.kappa_hat * (-self.sigma_hat * t).exp()
    }
}

/// Ordinary least squares of `log value` on `t`.
pub fn fit_decay(times: &[f64], values: &[f64]) -> Result<DecayEstimate> {
    if times.len() != values.len() {
        return Err(Error::GridMismatch(format!(
            "{} times, {} values",
            times.len(),
            values.len()
        )));
    }
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **v > 0.0 && v.is_finite() && t.is_finite())
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    let n = pts.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "{n} positive values; a fit needs 2"
        )));
    }
    let nf = n as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - ym).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("all fit times coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * tm;
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let se = if n > 2 {
        (ss_res / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(DecayEstimate {
        kappa_hat: intercept.exp(),
        sigma_hat: -slope,
        r_squared,
        n_runs: 1,
        n_points: n,
        excluded: times.len() - n,
        band: (-slope - 1.96 * se, -slope + 1.96 * se),
    })
}

/// One Monte-Carlo experiment: fixed initial state, controller and grid;
/// parameter paths drawn from a [`PathSource`].
#[derive(Debug, Clone)]
pub struct McSetup {
    pub initial: Snapshot,
    pub controller: Controller,
    pub sim: SimConfig,
    /// Start of the log-linear fit window.
    pub fit_start: f64,
    /// Reference for the dispersion statistic.
    pub nominal: NominalParams,
    /// Kernels for the Lyapunov curve; skipped when absent.
    pub lyapunov: Option<(KernelSet, LyapunovParams)>,
}

#[derive(Debug, Clone)]
pub struct McReport {
    pub times: Vec<f64>,
    /// `E |w(., t)|^2` averaged over runs.
    pub mean_square: Vec<f64>,
    /// Mean Lyapunov value, when requested.
    pub lyapunov: Option<Vec<f64>>,
    pub estimate: DecayEstimate,
    /// Per run: first output time with `|w| <= 0.1 |w(0)|`.
    pub time_to_tenth: Vec<Option<f64>>,
    /// Time- and run-averaged `sum_X |X0 - X(t)|`.
    pub dispersion: f64,
    pub jumps: Vec<usize>,
}

impl McReport {
    /// Mean square at the horizon relative to the initial value.
    pub fn final_ratio(&self) -> f64 {
        self.mean_square.last().unwrap() / self.mean_square[0]
    }

    /// Median of the per-run times to 10%; runs that never get there count
    /// as infinite.
    pub fn median_time_to_tenth(&self) -> f64 {
        let mut t: Vec<f64> = self
            .time_to_tenth
            .iter()
            .map(|x| x.unwrap_or(f64::INFINITY))
            .collect();
        t.sort_by(f64::total_cmp);
        let n = t.len();
        if n % 2 == 1 {
            t[n / 2]
        } else {
            0.5 * (t[n / 2 - 1] + t[n / 2])
        }
    }

    /// Decay report `t,mean_square_norm,fitted_curve`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "mean_square_norm", "fitted_curve"])?;
        for (t, m) in self.times.iter().zip(&self.mean_square) {
            wr.write_record(&[
                t.to_string(),
                m.to_string(),
                self.estimate.curve(*t).to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<decay csv>", e))?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let e = &self.estimate;
        format!(
            "kappa_hat={:.6e} sigma_hat={:.6e} r2={:.4} runs={} band=[{:.4e}, {:.4e}]{}",
            e.kappa_hat,
            e.sigma_hat,
            e.r_squared,
            e.n_runs,
            e.band.0,
            e.band.1,
            if e.accepted() {
                ""
            } else {
                " (fit rejected: r2 < 0.8)"
            }
        )
    }
}

struct RunOutput {
    norms_sq: Vec<f64>,
    lyap: Option<Vec<f64>>,
    times: Vec<f64>,
    tenth: Option<f64>,
    dispersion: f64,
    jumps: usize,
}

fn time_average_dispersion(path: &DeltaPath, nominal: &NominalParams) -> f64 {
    let mut cache: Vec<(&DeltaState, f64)> = Vec::new();
    let mut total = 0.0;
    for (a, b, s) in path.intervals() {
        let d = match cache.iter().find(|(c, _)| *c == s) {
            Some((_, d)) => *d,
            None => {
                let d = s.dispersion(nominal);
                cache.push((s, d));
                d
            }
        };
        total += (b.min(path.horizon) - a) * d;
    }
    total / path.horizon
}

fn one_run(setup: &McSetup, source: &dyn PathSource, seed: u64) -> Result<RunOutput> {
    let path = source.sample(seed, setup.sim.horizon)?;
    let mut cfg = setup.sim;
    cfg.keep_snapshots = setup.lyapunov.is_some();
    let tr = simulate(&setup.initial, &path, &setup.controller, &cfg)?;
    let n0 = tr.norms[0];
    let tenth = tr
        .times
        .iter()
        .zip(&tr.norms)
        .find(|(_, n)| **n <= 0.1 * n0)
        .map(|(t, _)| *t);
    let lyap = match &setup.lyapunov {
        Some((k, p)) => {
            let k = k.resample(setup.initial.u.len())?;
            let mut out = Vec::with_capacity(tr.snapshots.len());
            for s in &tr.snapshots {
                let (a, b) = backstepping_transform(&s.u, &s.v, &k, Direction::Forward)?;
                let target = Snapshot {
                    t: s.t,
                    u: a,
                    v: b,
                    mode: s.mode,
                };
                out.push(lyapunov_value(&target, path.state_at(s.t), p));
            }
            Some(out)
        }
        None => None,
    };
    Ok(RunOutput {
        norms_sq: tr.norms.iter().map(|n| n * n).collect(),
        lyap,
        times: tr.times,
        tenth,
        dispersion: time_average_dispersion(&path, &setup.nominal),
        jumps: path.jump_times.len() - 1,
    })
}

/// Run `n_runs` independent closed loops in parallel (run `r` uses
/// `derive_seed(master_seed, r)`), average the squared norms in run order,
/// and fit the decay over `[fit_start, horizon]`.
pub fn mc_mean_square(
    setup: &McSetup,
    source: &dyn PathSource,
    n_runs: usize,
    master_seed: u64,
) -> Result<McReport> {
    if n_runs < 2 {
        return Err(Error::InvalidParameter("need at least two runs".into()));
    }
    let runs: Vec<Result<RunOutput>> = (0..n_runs)
        .into_par_iter()
        .map(|r| one_run(setup, source, derive_seed(master_seed, r as u64)))
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let times = runs[0].times.clone();
    let mut mean = vec![0.0; times.len()];
    let mut lyap = setup.lyapunov.as_ref().map(|_| vec![0.0; times.len()]);
    for r in &runs {
        for (m, v) in mean.iter_mut().zip(&r.norms_sq) {
            *m += v;
        }
        if let (Some(acc), Some(v)) = (lyap.as_mut(), r.lyap.as_ref()) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
    }
    let nf = n_runs as f64;
    mean.iter_mut().for_each(|m| *m /= nf);
    if let Some(l) = lyap.as_mut() {
        l.iter_mut().for_each(|m| *m /= nf);
    }
    let (ft, fv): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&mean)
        .filter(|(t, _)| **t >= setup.fit_start - 1e-9)
        .map(|(t, m)| (*t, *m))
        .unzip();
    let mut estimate = fit_decay(&ft, &fv)?;
    estimate.n_runs = n_runs;
    Ok(McReport {
        times,
        mean_square: mean,
        lyapunov: lyap,
        estimate,
        time_to_tenth: runs.iter().map(|r| r.tenth).collect(),
        dispersion: runs.iter().map(|r| r.dispersion).sum::<f64>() / nf,
        jumps: runs.iter().map(|r| r.jumps).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speed_scaled_weights_stay_bounded() {
        let mut a = NominalParams::constant(0.02, 0.04, 0.0, 0.0, -2.0, 0.4).as_delta();
        let mut b = a.clone();
        b.mu = 0.005;
        b.phi = -3.0;
        a.lambda = 0.01;
        let p = LyapunovParams::speed_scaled(&[a, b]);
        assert!((p.nu - 0.0025).abs() < 1e-15);
        assert!((p.a - 10.0).abs() < 1e-12);
        assert!(p.nu / 0.005 <= 0.5 + 1e-12);
    }
    use rand::{Rng, SeedableRng};

    fn delta(lambda: f64, mu: f64) -> DeltaState {
        let mut d = NominalParams::constant(lambda, mu, 0.0, 0.0, 1.0, 0.5).as_delta();
        d.mode = 0;
        d
    }

    #[test]
    fn lyapunov_trivial_cases() {
        let p = LyapunovParams::new(0.5, 2.0).unwrap();
        assert_eq!(
            lyapunov_value(&Snapshot::zeros(10), &delta(1.0, 2.0), &p),
            0.0
        );
        let s = Snapshot::from_fn(400, |x| x.sin(), |x| 1.0 + x);
        let p0 = LyapunovParams { nu: 1e-14, a: 1.0 };
        let v = lyapunov_value(&s, &delta(1.0, 1.0), &p0);
        let n = s.l2_norm();
        assert!((v - n * n).abs() < 1e-10);
        assert!(LyapunovParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn lyapunov_sandwich() {
        let (l, m) = (0.7, 1.3);
        let p = LyapunovParams::new(0.8, 3.0).unwrap();
        let m3 = ((-p.nu / l).exp() / l).min(p.a / m);
        let m4 = (1.0 / l).max(p.a * (p.nu / m).exp() / m);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let s = Snapshot::from_fn(
                200,
                |x| c[0] * (3.0 * x).sin() + c[1],
                |x| c[2] * x * x + c[3],
            );
            let v = lyapunov_value(&s, &delta(l, m), &p);
            let n2 = s.l2_norm().powi(2);
            assert!(m3 * n2 <= v * (1.0 + 1e-12) && v <= m4 * n2 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn fit_exact_and_constant() {
        let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let y: Vec<f64> = t.iter().map(|t| 3.0 * (-2.0 * t).exp()).collect();
        let e = fit_decay(&t, &y).unwrap();
        assert!((e.sigma_hat - 2.0).abs() < 1e-6 && (e.kappa_hat - 3.0).abs() < 1e-9);
        assert!((e.r_squared - 1.0).abs() < 1e-12);
        let e = fit_decay(&t, &vec![1.5; 50]).unwrap();
        assert!(e.sigma_hat.abs() < 1e-12);
        let mut y2 = y.clone();
        y2[3] = 0.0;
        y2[7] = -1.0;
        assert_eq!(fit_decay(&t, &y2).unwrap().excluded, 2);
        assert!(fit_decay(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn fit_noisy_exponential() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let t: Vec<f64> = (0..200).map(|k| k as f64 * 0.05).collect();
        let y: Vec<f64> = t
            .iter()
            .map(|t| {
                let g: f64 = (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0;
                (-t).exp() * (1.0 + 0.01 * g)
            })
            .collect();
        let e = fit_decay(&t, &y).unwrap();
        assert!((0.95..=1.05).contains(&e.sigma_hat), "{}", e.sigma_hat);
        assert!(e.band.0 <= e.sigma_hat && e.sigma_hat <= e.band.1);
    }
}
