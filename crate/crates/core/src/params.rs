//! Plant parameters: the nominal tuple, the stochastic mode sets, the
//! instantaneous parameter state and the target-system coupling functions.
//!
//! All parameters live on the normalized spatial domain `[0, 1]`. Speeds are
//! expressed in domain lengths per unit time, so a physical problem of length
//! `L` is represented with `lambda = lambda_phys / L` and the same time axis.
//! `domain_length` is kept only to map results back to physical units.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{KernelField, KernelSet};

/// In-domain coupling coefficient as a function of the normalized position.
#[derive(Debug, Clone, PartialEq)]
pub enum CouplingProfile {
    Constant(f64),
    /// `amplitude * exp(-rate * x)`.
    Exponential {
        amplitude: f64,
        rate: f64,
    },
    /// Values on a uniform grid over `[0, 1]`, linearly interpolated.
    Tabulated(Arc<[f64]>),
}

impl CouplingProfile {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            CouplingProfile::Constant(c) => *c,
            CouplingProfile::Exponential { amplitude, rate } => amplitude * (-rate * x).exp(),
            CouplingProfile::Tabulated(table) => interp_uniform(table, x),
        }
    }

    /// Value at `x = 0`; this is the scalar feature fed to the operator.
    pub fn head(&self) -> f64 {
        self.eval(0.0)
    }

    pub fn is_finite(&self) -> bool {
        match self {
            CouplingProfile::Constant(c) => c.is_finite(),
            CouplingProfile::Exponential { amplitude, rate } => {
                amplitude.is_finite() && rate.is_finite()
            }
            CouplingProfile::Tabulated(t) => !t.is_empty() && t.iter().all(|v| v.is_finite()),
        }
    }

    /// Same shape with the value at `x = 0` replaced by `head`.
    ///
    /// Tabulated profiles are rescaled; a zero table becomes a constant.
    pub fn with_head(&self, head: f64) -> CouplingProfile {
        match self {
            CouplingProfile::Constant(_) => CouplingProfile::Constant(head),
            CouplingProfile::Exponential { rate, .. } => CouplingProfile::Exponential {
                amplitude: head,
                rate: *rate,
            },
            CouplingProfile::Tabulated(t) => {
                if t[0] == 0.0 {
                    CouplingProfile::Constant(head)
                } else {
                    let s = head / t[0];
                    CouplingProfile::Tabulated(t.iter().map(|v| v * s).collect())
                }
            }
        }
    }

    /// Tabulate on `n` uniform nodes over `[0, 1]`.
    pub fn tabulate(&self, n: usize) -> Vec<f64> {
        let h = 1.0 / (n - 1) as f64;
        (0..n).map(|i| self.eval(i as f64 * h)).collect()
    }

    /// Sup-norm distance on a 101-point grid.
    pub fn sup_distance(&self, other: &CouplingProfile) -> f64 {
        (0..=100)
            .map(|k| {
                let x = k as f64 / 100.0;
                (self.eval(x) - other.eval(x)).abs()
            })
            .fold(0.0, f64::max)
    }
}

pub(crate) fn interp_uniform(table: &[f64], x: f64) -> f64 {
    let n = table.len();
    if n == 1 {
        return table[0];
    }
    let s = x.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = (s.floor() as usize).min(n - 2);
    let a = s - i as f64;
    table[i] * (1.0 - a) + table[i + 1] * a
}

/// The nominal plant `(lambda0, mu0, sigma_plus0, sigma_minus0, phi0, rho0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalParams {
    pub lambda0: f64,
    pub mu0: f64,
    pub sigma_plus0: CouplingProfile,
    pub sigma_minus0: CouplingProfile,
    /// Boundary reflection at `x = 0`.
    pub phi0: f64,
    /// Boundary reflection at `x = 1`.
    pub rho0: f64,
    pub domain_length: f64,
}

impl NominalParams {
    /// Nominal tuple with constant couplings on the unit domain.
    pub fn constant(lambda0: f64, mu0: f64, sp: f64, sm: f64, phi0: f64, rho0: f64) -> Self {
        NominalParams {
            lambda0,
            mu0,
            sigma_plus0: CouplingProfile::Constant(sp),
            sigma_minus0: CouplingProfile::Constant(sm),
            phi0,
            rho0,
            domain_length: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda0 = {} must be > 0",
                self.lambda0
            )));
        }
        if !(self.mu0 > 0.0 && self.mu0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "mu0 = {} must be > 0",
                self.mu0
            )));
        }
        if !self.sigma_plus0.is_finite() || !self.sigma_minus0.is_finite() {
            return Err(Error::InvalidParameter(
                "coupling profile is not finite".into(),
            ));
        }
        if !self.phi0.is_finite() || !self.rho0.is_finite() {
            return Err(Error::InvalidParameter(
                "boundary coupling is not finite".into(),
            ));
        }
        if !(self.domain_length > 0.0) {
            return Err(Error::InvalidParameter("domain_length must be > 0".into()));
        }
        Ok(())
    }

    /// Branch-network input: `[lambda, mu, sigma+(0), sigma-(0), phi, rho]`.
    pub fn features(&self) -> [f64; 6] {
        [
            self.lambda0,
            self.mu0,
            self.sigma_plus0.head(),
            self.sigma_minus0.head(),
            self.phi0,
            self.rho0,
        ]
    }

    /// Rebuild from a feature vector, keeping this tuple's coupling shapes.
    pub fn from_features(&self, f: &[f64; 6]) -> NominalParams {
        NominalParams {
            lambda0: f[0],
            mu0: f[1],
            sigma_plus0: self.sigma_plus0.with_head(f[2]),
            sigma_minus0: self.sigma_minus0.with_head(f[3]),
            phi0: f[4],
            rho0: f[5],
            domain_length: self.domain_length,
        }
    }

    /// The nominal tuple viewed as an instantaneous parameter state.
    pub fn as_delta(&self) -> DeltaState {
        DeltaState {
            lambda: self.lambda0,
            mu: self.mu0,
            sigma_plus: self.sigma_plus0.clone(),
            sigma_minus: self.sigma_minus0.clone(),
            phi: self.phi0,
            rho: self.rho0,
            mode: 0,
        }
    }

    /// Finite-time convergence horizon of the nominal closed loop.
    pub fn transport_time(&self) -> f64 {
        1.0 / self.lambda0 + 1.0 / self.mu0
    }
}

/// Current value of the jumping parameters plus the composite mode index.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaState {
    pub lambda: f64,
    pub mu: f64,
    pub sigma_plus: CouplingProfile,
    pub sigma_minus: CouplingProfile,
    pub phi: f64,
    pub rho: f64,
    pub mode: usize,
}

impl DeltaState {
    /// `sum_X |X0 - X|`, using the sup distance for the coupling profiles.
    pub fn dispersion(&self, nominal: &NominalParams) -> f64 {
        (self.lambda - nominal.lambda0).abs()
            + (self.mu - nominal.mu0).abs()
            + self.sigma_plus.sup_distance(&nominal.sigma_plus0)
            + self.sigma_minus.sup_distance(&nominal.sigma_minus0)
            + (self.phi - nominal.phi0).abs()
            + (self.rho - nominal.rho0).abs()
    }

    /// Whether every parameter equals its nominal value.
    pub fn is_nominal(&self, nominal: &NominalParams) -> bool {
        self.dispersion(nominal) == 0.0
    }
}

/// Per-symbol mode lists for independent jumping of all six parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticParams {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma_plus: Vec<f64>,
    pub sigma_minus: Vec<f64>,
    pub phi: Vec<f64>,
    pub rho: Vec<f64>,
}

impl StochasticParams {
    pub fn lists(&self) -> [&[f64]; 6] {
        [
            &self.lambda,
            &self.mu,
            &self.sigma_plus,
            &self.sigma_minus,
            &self.phi,
            &self.rho,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        const NAMES: [&str; 6] = ["lambda", "mu", "sigma_plus", "sigma_minus", "phi", "rho"];
        for (name, list) in NAMES.iter().zip(self.lists()) {
            if list.is_empty() {
                return Err(Error::InvalidParameter(format!("{name}: empty mode list")));
            }
            if list.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidParameter(format!(
                    "{name}: mode values must be strictly increasing"
                )));
            }
        }
        if self.lambda[0] <= 0.0 || self.mu[0] <= 0.0 {
            return Err(Error::InvalidParameter(
                "speed modes must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Mode counts `r_X` in the canonical symbol order.
    pub fn counts(&self) -> [usize; 6] {
        self.lists().map(|l| l.len())
    }

    /// Parameter state for per-symbol mode indices; the composite index is
    /// mixed-radix with `lambda` as the most significant digit.
    pub fn delta(&self, idx: [usize; 6]) -> DeltaState {
        let counts = self.counts();
        let mode = idx
            .iter()
            .zip(counts.iter())
            .fold(0usize, |acc, (&i, &r)| acc * r + i);
        DeltaState {
            lambda: self.lambda[idx[0]],
            mu: self.mu[idx[1]],
            sigma_plus: CouplingProfile::Constant(self.sigma_plus[idx[2]]),
            sigma_minus: CouplingProfile::Constant(self.sigma_minus[idx[3]]),
            phi: self.phi[idx[4]],
            rho: self.rho[idx[5]],
            mode,
        }
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda[0]
    }

    pub fn mu_min(&self) -> f64 {
        self.mu[0]
    }
}

/// Values of the target-system coupling functions at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingTerms {
    pub f: [f64; 4],
    pub g: [f64; 4],
}

impl CouplingTerms {
    pub fn max_abs(&self) -> f64 {
        self.f
            .iter()
            .chain(self.g.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Evaluates `f1..f4, g1..g4` for a fixed nominal tuple and its kernels.
///
/// Kernel partial derivatives are tabulated once by central differences on
/// the kernel grid (one-sided at the edges) and interpolated like the
/// kernels themselves.
pub struct CouplingEvaluator<'a> {
    nominal: &'a NominalParams,
    kernels: &'a KernelSet,
    kuv_x: KernelField,
    kuv_xi: KernelField,
    kvu_x: KernelField,
    kvu_xi: KernelField,
}

impl<'a> CouplingEvaluator<'a> {
    pub fn new(nominal: &'a NominalParams, kernels: &'a KernelSet) -> Result<Self> {
        if nominal.phi0 == 0.0 {
            return Err(Error::InvalidParameter(
                "phi0 = 0 makes f2 undefined".into(),
            ));
        }
        if nominal.mu0 == 0.0 || nominal.lambda0 == 0.0 {
            return Err(Error::InvalidParameter("zero nominal speed".into()));
        }
        let (kuv_x, kuv_xi) = kernels.kuv.gradient();
        let (kvu_x, kvu_xi) = kernels.kvu.gradient();
        Ok(CouplingEvaluator {
            nominal,
            kernels,
            kuv_x,
            kuv_xi,
            kvu_x,
            kvu_xi,
        })
    }

    pub fn eval(&self, delta: &DeltaState, x: f64, xi: f64) -> Result<CouplingTerms> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=x).contains(&xi) {
            return Err(Error::OutsideTriangle { x, xi });
        }
        let n = self.nominal;
        let k = self.kernels;
        let (l, m) = (delta.lambda, delta.mu);
        let (l0, m0) = (n.lambda0, n.mu0);
        let sp_x = delta.sigma_plus.eval(x);
        let sp0_x = n.sigma_plus0.eval(x);
        let sm_x = delta.sigma_minus.eval(x);
        let sm0_x = n.sigma_minus0.eval(x);
        let sp_xi = delta.sigma_plus.eval(xi);
        let sp0_xi = n.sigma_plus0.eval(xi);
        let sm_xi = delta.sigma_minus.eval(xi);
        let sm0_xi = n.sigma_minus0.eval(xi);
        let speed_ratio = (l + m) / (l0 + m0);

        let kuu = k.kuu.eval(x, xi);
        let kuv = k.kuv.eval(x, xi);
        let kvu = k.kvu.eval(x, xi);
        let kvv = k.kvv.eval(x, xi);

        let f1 = sp_x - sp0_x * speed_ratio;
        let f2 = (m - l * delta.phi * m0 / (l0 * n.phi0)) * k.kuv.eval(x, 0.0);
        let f3 = (l / l0 * sm0_xi - sm_xi) * kuv;
        let f4 = (l0 - l) * self.kuv_x.eval(x, xi) + (m - m0) * self.kuv_xi.eval(x, xi)
            - (sp_xi - sp0_xi) * kuu;

        let g1 = sm_x - speed_ratio * sm0_x;
        let g2 = (-l * delta.phi + m * l0 * n.phi0 / m0) * k.kvu.eval(x, 0.0);
        let g3 = (m - m0) * self.kvu_x.eval(x, xi)
            - (l - l0) * self.kvu_xi.eval(x, xi)
            - (sm_xi - sm0_xi) * kvv;
        let g4 = (sp0_xi * m / m0 - sp_xi) * kvu;

        Ok(CouplingTerms {
            f: [f1, f2, f3, f4],
            g: [g1, g2, g3, g4],
        })
    }

    /// Largest `|f_i|, |g_i|` over the kernel grid nodes.
    pub fn sup_over_triangle(&self, delta: &DeltaState) -> f64 {
        let grid = self.kernels.grid();
        grid.nodes()
            .map(|(x, xi)| {
                self.eval(delta, x, xi)
                    .map(|c| c.max_abs())
                    .unwrap_or(f64::NAN)
            })
            .fold(0.0, f64::max)
    }
}

/// One-shot evaluation of the coupling functions at `(x, xi)`.
pub fn coupling_terms(
    delta: &DeltaState,
    nominal: &NominalParams,
    kernels: &KernelSet,
    x: f64,
    xi: f64,
) -> Result<CouplingTerms> {
    CouplingEvaluator::new(nominal, kernels)?.eval(delta, x, xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::solve_kernels;

    fn nominal() -> NominalParams {
        NominalParams::constant(1.0, 2.0, 0.6, -0.4, 0.5, 0.3)
    }

    #[test]
    fn nominal_mode_cancels_everything() {
        let nom = nominal();
        let k = solve_kernels(&nom, 24).unwrap();
        let ev = CouplingEvaluator::new(&nom, &k).unwrap();
        let d = nom.as_delta();
        for (x, xi) in [
            (0.0, 0.0),
            (0.5, 0.25),
            (1.0, 1.0),
            (0.8, 0.0),
            (0.37, 0.11),
        ] {
            let c = ev.eval(&d, x, xi).unwrap();
            assert_eq!(c.max_abs(), 0.0, "at ({x}, {xi}): {c:?}");
        }
    }

    #[test]
    fn f1_for_shifted_sigma_plus() {
        let nom = nominal();
        let k = solve_kernels(&nom, 16).unwrap();
        let mut d = nom.as_delta();
        d.sigma_plus = CouplingProfile::Constant(0.7);
        let c = coupling_terms(&d, &nom, &k, 0.5, 0.2).unwrap();
        assert!((c.f[0] - 0.1).abs() < 1e-14);
    }

    #[test]
    fn g2_for_shifted_phi() {
        let nom = nominal();
        let k = solve_kernels(&nom, 16).unwrap();
        let mut d = nom.as_delta();
        d.phi = 0.8;
        let c = coupling_terms(&d, &nom, &k, 0.6, 0.3).unwrap();
        let expected = nom.lambda0 * (nom.phi0 - d.phi) * k.kvu.eval(0.6, 0.0);
        assert!((c.g[1] - expected).abs() < 1e-14);
        // f2 only sees phi through lambda*phi
        let f2 = (nom.mu0 - nom.lambda0 * d.phi * nom.mu0 / (nom.lambda0 * nom.phi0))
            * k.kuv.eval(0.6, 0.0);
        assert!((c.f[1] - f2).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_inputs() {
        let nom = nominal();
        let k = solve_kernels(&nom, 16).unwrap();
        assert!(matches!(
            coupling_terms(&nom.as_delta(), &nom, &k, 0.3, 0.5),
            Err(Error::OutsideTriangle { .. })
        ));
        let mut bad = nom.clone();
        bad.phi0 = 0.0;
        assert!(coupling_terms(&nom.as_delta(), &bad, &k, 0.5, 0.1).is_err());
    }

    #[test]
    fn bound_ratio_is_uniform_over_modes() {
        let nom = nominal();
        let k = solve_kernels(&nom, 24).unwrap();
        let ev = CouplingEvaluator::new(&nom, &k).unwrap();
        let sp = StochasticParams {
            lambda: vec![0.8, 1.0, 1.2],
            mu: vec![1.7, 2.0, 2.3],
            sigma_plus: vec![0.5, 0.6],
            sigma_minus: vec![-0.5, -0.4],
            phi: vec![0.4, 0.5, 0.6],
            rho: vec![0.3],
        };
        sp.validate().unwrap();
        let mut ratios = Vec::new();
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..2 {
                    for d in 0..2 {
                        for e in 0..3 {
                            let delta = sp.delta([a, b, c, d, e, 0]);
                            let disp = delta.dispersion(&nom);
                            let sup = ev.sup_over_triangle(&delta);
                            if disp == 0.0 {
                                assert_eq!(sup, 0.0);
                            } else {
                                ratios.push(sup / disp);
                            }
                        }
                    }
                }
            }
        }
        let max = ratios.iter().cloned().fold(0.0, f64::max);
        assert!(max.is_finite() && max < 10.0, "max ratio {max}");
    }

    #[test]
    fn composite_mode_index() {
        let sp = StochasticParams {
            lambda: vec![1.0, 2.0],
            mu: vec![1.0, 2.0, 3.0],
            sigma_plus: vec![0.0],
            sigma_minus: vec![0.0],
            phi: vec![0.5],
            rho: vec![0.0, 1.0],
        };
        assert_eq!(sp.delta([0, 0, 0, 0, 0, 0]).mode, 0);
        assert_eq!(sp.delta([1, 2, 0, 0, 0, 1]).mode, 11);
        assert!(StochasticParams {
            lambda: vec![2.0, 1.0],
            ..sp.clone()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn profile_helpers() {
        let p = CouplingProfile::Exponential {
            amplitude: -2.0,
            rate: 1.0,
        };
        assert_eq!(p.head(), -2.0);
        assert!((p.eval(1.0) + 2.0 / std::f64::consts::E).abs() < 1e-15);
        let t = CouplingProfile::Tabulated(p.tabulate(101).into());
        assert!((t.eval(0.505) - p.eval(0.505)).abs() < 1e-4);
        assert_eq!(p.with_head(-1.0).head(), -1.0);
    }
}
