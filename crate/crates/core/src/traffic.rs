//! Freeway case study: the linearized Aw-Rascle-Zhang model around an
//! equilibrium density, its Riemann coordinates, the outlet speed-limit
//! control law, and the stochastic upstream-demand scenario.
//!
//! Internal units are SI (m, s, veh/m). The configuration accepts km/h and
//! veh/km and converts on the way in.
//!
//! Riemann coordinates on the normalized domain `s = x / L`:
//!
//! ```text
//! u(s) = exp(x / (iota v*)) (q~(x) - r v~(x)),   v(s) = q* / (gamma p*) v~(x),
//! r = q* (1 / v* - 1 / (gamma p*)).
//! ```
//!
//! With the outlet condition `v~(L) = q~(L) / rho* + U_speed`, the Riemann
//! system sees `v(1) = rho0 u(1) + U` with `U = rho* U_speed`; `U` is the
//! flow-valued actuation returned by [`arz_control`].

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::GainSlice;
use crate::markov::{sample_path, DeltaPath, DemandRates, MarkovChain, PathSource};
use crate::params::{CouplingProfile, DeltaState, NominalParams};
use crate::sim::Snapshot;

pub const KMH: f64 = 1000.0 / 3600.0;
pub const VEH_PER_KM: f64 = 1e-3;

/// Linearized ARZ parameters in SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficParams {
    pub length: f64,
    pub vf: f64,
    pub rho_max: f64,
    pub rho_star: f64,
    pub v_star: f64,
    pub iota: f64,
    pub gamma: f64,
}

impl TrafficParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.length,
            self.vf,
            self.rho_max,
            self.rho_star,
            self.v_star,
            self.iota,
            self.gamma,
        ];
        if all.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "traffic parameters must be positive: {self:?}"
            )));
        }
        if self.rho_star >= self.rho_max {
            return Err(Error::InvalidParameter("rho* must be below rho_max".into()));
        }
        if self.gamma * self.p_star() <= self.v_star {
            return Err(Error::InvalidParameter(format!(
                "gamma p* = {} <= v* = {}: not in the congested regime",
                self.gamma * self.p_star(),
                self.v_star
            )));
        }
        Ok(())
    }

    /// Traffic pressure at equilibrium, `vf (rho* / rho_max)^gamma`.
    pub fn p_star(&self) -> f64 {
        self.vf * (self.rho_star / self.rho_max).powf(self.gamma)
    }

    pub fn q_star(&self) -> f64 {
        self.rho_star * self.v_star
    }

    /// `r = q* (1/v* - 1/(gamma p*))`.
    pub fn r(&self) -> f64 {
        self.q_star() * (1.0 / self.v_star - 1.0 / (self.gamma * self.p_star()))
    }

    /// Same road at another equilibrium density, with `v*` from the
    /// equilibrium relation `V(rho) = vf - p(rho)`.
    pub fn at_density(&self, rho_star: f64) -> TrafficParams {
        let mut tp = TrafficParams { rho_star, ..*self };
        tp.v_star = tp.vf - tp.p_star();
        tp
    }

    fn decay(&self) -> f64 {
        1.0 / (self.iota * self.v_star)
    }
}

/// Riemann-coordinate nominal plant on the normalized domain; speeds are
/// divided by the road length.
pub fn arz_nominal(tp: &TrafficParams) -> Result<NominalParams> {
    tp.validate()?;
    let gp = tp.gamma * tp.p_star();
    Ok(NominalParams {
        lambda0: tp.v_star / tp.length,
        mu0: (gp - tp.v_star) / tp.length,
        sigma_plus0: CouplingProfile::Constant(0.0),
        sigma_minus0: CouplingProfile::Exponential {
            amplitude: -1.0 / tp.iota,
            rate: tp.length * tp.decay(),
        },
        phi0: (tp.v_star - gp) / tp.v_star,
        rho0: (-tp.length * tp.decay()).exp(),
        domain_length: tp.length,
    })
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<usize> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::GridMismatch(format!(
            "field lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.len())
}

/// `(q~, v~)` on a uniform grid over `[0, L]` to Riemann `(u, v)`.
pub fn riemann_forward(q: &[f64], vt: &[f64], tp: &TrafficParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = check_pair(q, vt)?;
    let gp = tp.gamma * tp.p_star();
    if gp == tp.v_star {
        return Err(Error::InvalidParameter(
            "singular Riemann map: gamma p* = v*".into(),
        ));
    }
    let (r, c) = (tp.r(), tp.q_star() / gp);
    let dx = tp.length / (n - 1) as f64;
    let u = (0..n)
        .map(|i| (i as f64 * dx * tp.decay()).exp() * (q[i] - r * vt[i]))
        .collect();
    let v = vt.iter().map(|x| c * x).collect();
    Ok((u, v))
}

/// Riemann `(u, v)` back to `(q~, v~)`.
pub fn riemann_inverse(u: &[f64], v: &[f64], tp: &TrafficParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = check_pair(u, v)?;
    let gp = tp.gamma * tp.p_star();
    if gp == tp.v_star {
        return Err(Error::InvalidParameter(
            "singular Riemann map: gamma p* = v*".into(),
        ));
    }
    let (r, c) = (tp.r(), tp.q_star() / gp);
    let dx = tp.length / (n - 1) as f64;
    let vt: Vec<f64> = v.iter().map(|x| x / c).collect();
    let q = (0..n)
        .map(|i| u[i] * (-(i as f64) * dx * tp.decay()).exp() + r * vt[i])
        .collect();
    Ok((q, vt))
}

/// Flow-valued outlet actuation written directly in `(q~, v~)`:
///
/// ```text
/// U = r v~(L) - q~(L) + int_0^1 Kvu(1,s) e^{Ls/(iota v*)} (q~ - r v~)(Ls) ds
///                     + q*/(gamma p*) int_0^1 Kvv(1,s) v~(Ls) ds
/// ```
///
/// with the gains of the normalized Riemann system. The speed-limit value
/// at the outlet is `U / rho*`.
pub fn arz_control(q: &[f64], vt: &[f64], gains: &GainSlice, tp: &TrafficParams) -> Result<f64> {
    let n = check_pair(q, vt)?;
    let g = gains.resample(n);
    let r = tp.r();
    let c = tp.q_star() / (tp.gamma * tp.p_star());
    let h = 1.0 / (n - 1) as f64;
    let mut integral = 0.0;
    for i in 0..n {
        let w = if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
        let e = (i as f64 * h * tp.length * tp.decay()).exp();
        integral += w * (g.kvu[i] * e * (q[i] - r * vt[i]) + c * g.kvv[i] * vt[i]);
    }
    Ok(r * vt[n - 1] - q[n - 1] + integral * h)
}

/// Outlet speed-limit deviation for a flow-valued actuation.
pub fn speed_actuation(u_flow: f64, tp: &TrafficParams) -> f64 {
    u_flow / tp.rho_star
}

/// Physical density and speed rebuilt from deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct Fields {
    pub rho: Vec<f64>,
    pub v: Vec<f64>,
    /// Nodes where `v* + v~ <= 0`; their density is NaN.
    pub nonpositive_speed: usize,
}

pub fn reconstruct_fields(q: &[f64], vt: &[f64], tp: &TrafficParams) -> Fields {
    let mut bad = 0;
    let (rho, v) = q
        .iter()
        .zip(vt)
        .map(|(&qd, &vd)| {
            let speed = tp.v_star + vd;
            if speed <= 0.0 {
                bad += 1;
                (f64::NAN, speed)
            } else {
                ((tp.q_star() + qd) / speed, speed)
            }
        })
        .unzip();
    Fields {
        rho,
        v,
        nonpositive_speed: bad,
    }
}

/// Configuration in the units of the scenario file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficConfig {
    pub length_m: f64,
    pub vf_kmh: f64,
    pub rho_max_veh_km: f64,
    pub rho_star_veh_km: f64,
    pub v_star_kmh: f64,
    pub iota_s: f64,
    pub gamma: f64,
    pub densities_veh_km: Vec<f64>,
    pub initial_probs: Vec<f64>,
    pub horizon_s: f64,
    pub grid_m: usize,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            length_m: 500.0,
            vf_kmh: 144.0,
            rho_max_veh_km: 160.0,
            rho_star_veh_km: 120.0,
            v_star_kmh: 36.0,
            iota_s: 60.0,
            gamma: 1.0,
            densities_veh_km: vec![100.0, 118.0, 120.0, 122.0, 150.0],
            initial_probs: vec![0.02, 0.32, 0.32, 0.32, 0.02],
            horizon_s: 200.0,
            grid_m: 200,
        }
    }
}

/// The stochastic freeway experiment.
#[derive(Debug, Clone)]
pub struct TrafficScenario {
    pub nominal: TrafficParams,
    /// Mode densities in veh/m, increasing.
    pub densities: Vec<f64>,
    pub initial_probs: Vec<f64>,
    pub rates: DemandRates,
    pub horizon: f64,
    pub grid_m: usize,
}

pub fn build_scenario(cfg: &TrafficConfig) -> Result<TrafficScenario> {
    let nominal = TrafficParams {
        length: cfg.length_m,
        vf: cfg.vf_kmh * KMH,
        rho_max: cfg.rho_max_veh_km * VEH_PER_KM,
        rho_star: cfg.rho_star_veh_km * VEH_PER_KM,
        v_star: cfg.v_star_kmh * KMH,
        iota: cfg.iota_s,
        gamma: cfg.gamma,
    };
    nominal.validate()?;
    let densities: Vec<f64> = cfg
        .densities_veh_km
        .iter()
        .map(|d| d * VEH_PER_KM)
        .collect();
    if densities.is_empty() || densities.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(
            "chain.densities_veh_km must be increasing".into(),
        ));
    }
    if densities.len() != cfg.initial_probs.len() {
        return Err(Error::Config(
            "chain.initial_probs must have one entry per density".into(),
        ));
    }
    if !(cfg.horizon_s > 0.0) || cfg.grid_m < 4 {
        return Err(Error::Config(
            "sim.horizon_s must be > 0 and sim.grid_m >= 4".into(),
        ));
    }
    let sc = TrafficScenario {
        nominal,
        densities,
        initial_probs: cfg.initial_probs.clone(),
        rates: DemandRates::standard(cfg.densities_veh_km.len()),
        horizon: cfg.horizon_s,
        grid_m: cfg.grid_m,
    };
    for j in 0..sc.densities.len() {
        sc.mode_params(j).validate()?;
    }
    sc.chain()?;
    Ok(sc)
}

impl TrafficScenario {
    pub fn modes(&self) -> usize {
        self.densities.len()
    }

    pub fn mode_params(&self, j: usize) -> TrafficParams {
        self.nominal.at_density(self.densities[j])
    }

    pub fn chain(&self) -> Result<MarkovChain> {
        MarkovChain::new(
            self.densities.clone(),
            Arc::new(self.rates.clone()),
            self.initial_probs.clone(),
        )
    }

    /// Riemann nominal plant at the nominal density.
    pub fn nominal_params(&self) -> NominalParams {
        arz_nominal(&self.nominal).expect("validated in build_scenario")
    }

    /// Parameter state while the chain sits in mode `j`.
    pub fn delta_state(&self, j: usize) -> DeltaState {
        let mut d = arz_nominal(&self.mode_params(j))
            .expect("validated in build_scenario")
            .as_delta();
        d.mode = j;
        d
    }

    pub fn delta_path(&self, seed: u64) -> Result<DeltaPath> {
        self.sample(seed, self.horizon)
    }

    /// Path frozen in the nominal mode.
    pub fn nominal_path(&self) -> DeltaPath {
        let mut d = self.nominal_params().as_delta();
        d.mode = self.nominal_mode().unwrap_or(0);
        DeltaPath::constant(d, self.horizon)
    }

    fn nominal_mode(&self) -> Option<usize> {
        self.densities
            .iter()
            .position(|&d| (d - self.nominal.rho_star).abs() < 1e-12)
    }

    /// Stop-and-go initial condition
    /// `rho = rho*(1 + 0.1 sin(3 pi x / L))`, `v = v*(1 - 0.1 sin(3 pi x / L))`
    /// as deviations `(q~, v~)`.
    pub fn initial_deviation(&self, m: usize) -> (Vec<f64>, Vec<f64>) {
        let tp = &self.nominal;
        let k = 3.0 * std::f64::consts::PI;
        (0..=m)
            .map(|i| {
                let s = (k * i as f64 / m as f64).sin();
                let rho = tp.rho_star * (1.0 + 0.1 * s);
                let v = tp.v_star * (1.0 - 0.1 * s);
                (rho * v - tp.q_star(), v - tp.v_star)
            })
            .unzip()
    }

    /// Initial condition in Riemann coordinates on `m + 1` nodes.
    pub fn initial_snapshot(&self, m: usize) -> Snapshot {
        let (q, vt) = self.initial_deviation(m);
        let (u, v) = riemann_forward(&q, &vt, &self.nominal).expect("valid scenario");
        Snapshot {
            t: 0.0,
            u,
            v,
            mode: 0,
        }
    }

    /// Physical fields of a Riemann snapshot, mapped with the nominal
    /// equilibrium.
    pub fn fields(&self, snap: &Snapshot) -> Result<Fields> {
        let (q, vt) = riemann_inverse(&snap.u, &snap.v, &self.nominal)?;
        Ok(reconstruct_fields(&q, &vt, &self.nominal))
    }

    /// `(q~, v~)` L2 norm over the normalized road.
    pub fn deviation_norm(&self, snap: &Snapshot) -> Result<f64> {
        let (q, vt) = riemann_inverse(&snap.u, &snap.v, &self.nominal)?;
        Ok(crate::sim::l2_norm(&q, &vt))
    }

    /// Long CSV `t,x,rho,v` with density in veh/km and speed in km/h.
    pub fn write_fields_csv<W: Write>(&self, snaps: &[Snapshot], w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "x", "rho", "v"])?;
        for s in snaps {
            let f = self.fields(s)?;
            let m = s.intervals();
            for i in 0..=m {
                let x = self.nominal.length * i as f64 / m as f64;
                wr.write_record(&[
                    s.t.to_string(),
                    x.to_string(),
                    (f.rho[i] / VEH_PER_KM).to_string(),
                    (f.v[i] / KMH).to_string(),
                ])?;
            }
        }
        wr.flush().map_err(|e| Error::io("<fields csv>", e))?;
        Ok(())
    }
}

impl PathSource for TrafficScenario {
    fn sample(&self, seed: u64, horizon: f64) -> Result<DeltaPath> {
        let path = sample_path(&self.chain()?, seed, horizon)?;
        let states: Vec<DeltaState> = (0..self.modes()).map(|j| self.delta_state(j)).collect();
        Ok(DeltaPath::from_single(&path, |j| states[j].clone()))
    }
}

/// Direct upwind solution of the linearized ARZ equations in `(q~, v~)`
/// with constant nominal coefficients; used only to cross-check the
/// Riemann-coordinate route. The `v~_x` term in the flow equation is
/// differenced along the speed-wave direction. Returns the state at
/// `horizon`.
pub fn simulate_direct(
    tp: &TrafficParams,
    q0: &[f64],
    v0: &[f64],
    gains: Option<&GainSlice>,
    horizon: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = check_pair(q0, v0)?;
    let m = n - 1;
    let gp = tp.gamma * tp.p_star();
    let (vs, qs) = (tp.v_star, tp.q_star());
    let dx = tp.length / m as f64;
    let speed = vs.max(gp - vs);
    let steps = (horizon / (0.9 * dx / speed)).ceil() as usize;
    let dt = horizon / steps as f64;
    let coupling = qs * (gp - vs) / vs;
    let (mut q, mut v) = (q0.to_vec(), v0.to_vec());
    let (mut qn, mut vn) = (q.clone(), v.clone());
    for _ in 0..steps {
        for i in 0..m {
            let vx = (v[i + 1] - v[i]) / dx;
            vn[i] = v[i]
                + dt * ((gp - vs) * vx + (gp - vs) / (tp.iota * vs) * v[i]
                    - gp / (tp.iota * qs) * q[i]);
        }
        for i in 1..=m {
            let qx = (q[i] - q[i - 1]) / dx;
            let vx = if i < m {
                (v[i + 1] - v[i]) / dx
            } else {
                (v[i] - v[i - 1]) / dx
            };
            qn[i] = q[i]
                + dt * (-vs * qx + coupling * vx + qs * (gp - vs) / (tp.iota * vs * vs) * v[i]
                    - gp / (tp.iota * vs) * q[i]);
        }
        qn[0] = 0.0;
        let u_flow = match gains {
            Some(g) => arz_control(&qn, &vn, g, tp)?,
            None => 0.0,
        };
        vn[m] = qn[m] / tp.rho_star + speed_actuation(u_flow, tp);
        std::mem::swap(&mut q, &mut qn);
        std::mem::swap(&mut v, &mut vn);
    }
    Ok((q, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nominal_freeway() -> TrafficParams {
        let sc = build_scenario(&TrafficConfig::default()).unwrap();
        sc.nominal
    }

    #[test]
    fn nominal_coefficients() {
        let tp = nominal_freeway();
        assert!((tp.p_star() - 30.0).abs() < 1e-12);
        let n = arz_nominal(&tp).unwrap();
        assert!((n.lambda0 * 500.0 - 10.0).abs() < 1e-12);
        assert!((n.mu0 * 500.0 - 20.0).abs() < 1e-12);
        assert!((n.phi0 + 2.0).abs() < 1e-12);
        assert!((n.rho0 - (-500.0f64 / 600.0).exp()).abs() < 1e-15);
        assert!((n.rho0 - 0.43460).abs() < 1e-5);
        assert!((n.sigma_minus0.eval(0.0) + 1.0 / 60.0).abs() < 1e-15);
        assert!((n.transport_time() - 75.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_free_flow_regime() {
        let mut tp = nominal_freeway();
        tp.rho_star = 0.06; // p* = 15 m/s
        assert!(arz_nominal(&tp).is_ok());
        tp.rho_star = 0.03; // p* = 7.5 m/s <= v*
        assert!(arz_nominal(&tp).is_err());
        assert!(tp.at_density(0.16).validate().is_err());
    }

    #[test]
    fn riemann_round_trip_and_boundary() {
        let tp = nominal_freeway();
        let m = 50;
        let q: Vec<f64> = (0..=m)
            .map(|i| if i == 0 { 0.0 } else { (i as f64).sin() * 0.1 })
            .collect();
        let v: Vec<f64> = (0..=m).map(|i| (i as f64 * 0.3).cos()).collect();
        let (a, b) = riemann_forward(&q, &v, &tp).unwrap();
        let (q2, v2) = riemann_inverse(&a, &b, &tp).unwrap();
        for i in 0..=m {
            assert!((q[i] - q2[i]).abs() < 1e-12 && (v[i] - v2[i]).abs() < 1e-12);
        }
        let phi0 = arz_nominal(&tp).unwrap().phi0;
        assert!((a[0] / b[0] - phi0).abs() < 1e-12);
        let (z1, z2) = riemann_forward(&[0.0; 5], &[0.0; 5], &tp).unwrap();
        assert!(z1.iter().chain(&z2).all(|&x| x == 0.0));
    }

    #[test]
    fn outlet_boundary_matches_riemann_reflection() {
        // v~(L) = q~(L)/rho* + U/rho*  <=>  v(1) = rho0 u(1) + U
        let tp = nominal_freeway();
        let n = arz_nominal(&tp).unwrap();
        let q_l = 0.037;
        let u_flow = -0.011;
        let v_l = q_l / tp.rho_star + speed_actuation(u_flow, &tp);
        let (a, b) = riemann_forward(&[0.0, q_l], &[0.0, v_l], &tp).unwrap();
        assert!((b[1] - (n.rho0 * a[1] + u_flow)).abs() < 1e-12);
    }

    #[test]
    fn control_with_zero_kernels() {
        let tp = nominal_freeway();
        let q = vec![0.0, 0.01, 0.02, 0.015];
        let v = vec![0.1, -0.2, 0.3, 0.25];
        let u = arz_control(&q, &v, &GainSlice::zeros(4), &tp).unwrap();
        assert!((u - (tp.r() * 0.25 - 0.015)).abs() < 1e-15);
        assert_eq!(
            arz_control(&[0.0; 4], &[0.0; 4], &GainSlice::zeros(4), &tp).unwrap(),
            0.0
        );
    }

    #[test]
    fn fields_reconstruction() {
        let tp = nominal_freeway();
        let f = reconstruct_fields(&[0.0; 3], &[0.0; 3], &tp);
        assert!(f.rho.iter().all(|&r| (r - tp.rho_star).abs() < 1e-15));
        assert!(f.v.iter().all(|&v| v == tp.v_star));
        let q = 0.01 * tp.q_star();
        let v = -0.01 * tp.v_star;
        let f = reconstruct_fields(&[q], &[v], &tp);
        let linear = (q - tp.rho_star * v) / tp.v_star;
        assert!(((f.rho[0] - tp.rho_star) - linear).abs() < 5e-4 * tp.rho_star);
        let f = reconstruct_fields(&[0.0], &[-2.0 * tp.v_star], &tp);
        assert_eq!(f.nonpositive_speed, 1);
    }

    #[test]
    fn scenario_defaults() {
        let sc = build_scenario(&TrafficConfig::default()).unwrap();
        let d: Vec<f64> = sc.densities.iter().map(|d| d / VEH_PER_KM).collect();
        assert_eq!(d.len(), 5);
        for (a, b) in d.iter().zip([100.0, 118.0, 120.0, 122.0, 150.0]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(sc.initial_probs, vec![0.02, 0.32, 0.32, 0.32, 0.02]);
        assert_eq!(sc.horizon, 200.0);
        let r = &sc.rates;
        use crate::markov::RateFunction;
        assert_eq!(r.rate(0, 3, 5.0), 20.0);
        assert_eq!(r.rate(4, 1, 5.0), 20.0);
        assert_eq!(r.rate(2, 0, 5.0), 10.0);
        assert_eq!(r.rate(2, 2, 5.0), 0.0);
        let t: f64 = 7.0;
        let expected = 10.0 + 20.0 * (0.01 * (2.0 + 5.0 * 4.0) * t).cos().powi(2);
        assert!((r.rate(1, 3, t) - expected).abs() < 1e-12);
        let s0 = sc.initial_snapshot(100);
        assert!(s0.u[0].abs() < 1e-12 && s0.l2_norm() > 0.0);
    }

    #[test]
    fn mode_jump_moves_every_coefficient() {
        let sc = build_scenario(&TrafficConfig::default()).unwrap();
        let a = sc.delta_state(2);
        let b = sc.delta_state(4);
        assert!(a.lambda != b.lambda && a.mu != b.mu && a.phi != b.phi && a.rho != b.rho);
        assert_ne!(a.sigma_minus, b.sigma_minus);
        let path = sc.delta_path(5).unwrap();
        let chain_path = sample_path(&sc.chain().unwrap(), 5, sc.horizon).unwrap();
        assert_eq!(path.jump_times, chain_path.jump_times);
    }

    #[test]
    fn invalid_overrides() {
        let mut cfg = TrafficConfig::default();
        cfg.densities_veh_km = vec![120.0, 110.0];
        cfg.initial_probs = vec![0.5, 0.5];
        assert!(build_scenario(&cfg).is_err());
        let mut cfg = TrafficConfig::default();
        cfg.densities_veh_km.push(160.0);
        cfg.initial_probs = vec![0.2; 6];
        assert!(build_scenario(&cfg).is_err());
    }
}
