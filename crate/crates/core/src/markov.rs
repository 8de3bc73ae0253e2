//! Continuous-time finite-state Markov chains with time-varying transition
//! rates: the forward Kolmogorov solver, a thinning path sampler, and the
//! composition of per-symbol paths into a parameter path `delta(t)`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{DeltaState, StochasticParams};

/// Transition rates `tau_{ij}(t)` of a chain with `size()` states.
///
/// `bound(i, j)` must dominate `rate(i, j, t)` for every `t`; it drives the
/// thinning sampler.
pub trait RateFunction: Send + Sync + fmt::Debug {
    fn size(&self) -> usize;
    fn rate(&self, from: usize, to: usize, t: f64) -> f64;
    fn bound(&self, from: usize, to: usize) -> f64;
}

/// Time-invariant rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantRates {
    matrix: Vec<Vec<f64>>,
}

impl ConstantRates {
    pub fn new(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let r = matrix.len();
        for (i, row) in matrix.iter().enumerate() {
            if row.len() != r {
                return Err(Error::InvalidParameter("rate matrix must be square".into()));
            }
            if row[i] != 0.0 {
                return Err(Error::InvalidParameter(format!("tau_{i}{i} must be 0")));
            }
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidParameter(
                    "rates must be finite and >= 0".into(),
                ));
            }
        }
        Ok(ConstantRates { matrix })
    }

    /// Every off-diagonal rate equal to `c`.
    pub fn uniform(r: usize, c: f64) -> Result<Self> {
        ConstantRates::new(
            (0..r)
                .map(|i| (0..r).map(|j| if i == j { 0.0 } else { c }).collect())
                .collect(),
        )
    }
}

impl RateFunction for ConstantRates {
    fn size(&self) -> usize {
        self.matrix.len()
    }

    fn rate(&self, from: usize, to: usize, _t: f64) -> f64 {
        self.matrix[from][to]
    }

    fn bound(&self, from: usize, to: usize) -> f64 {
        self.matrix[from][to]
    }
}

/// The stop-and-go demand chain: leaving an extreme mode happens at rate
/// `outer`, entering an extreme mode from an inner one at rate `to_outer`,
/// and inner-to-inner moves at `base + amp cos^2(freq (i + 5 j) t)` with
/// one-based `i, j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandRates {
    pub modes: usize,
    pub outer: f64,
    pub to_outer: f64,
    pub base: f64,
    pub amp: f64,
    pub freq: f64,
}

impl DemandRates {
    pub fn standard(modes: usize) -> Self {
        DemandRates {
            modes,
            outer: 20.0,
            to_outer: 10.0,
            base: 10.0,
            amp: 20.0,
            freq: 0.01,
        }
    }

    fn is_outer(&self, i: usize) -> bool {
        i == 0 || i + 1 == self.modes
    }
}

impl RateFunction for DemandRates {
    fn size(&self) -> usize {
        self.modes
    }

    fn rate(&self, from: usize, to: usize, t: f64) -> f64 {
        if from == to {
            0.0
        } else if self.is_outer(from) {
            self.outer
        } else if self.is_outer(to) {
            self.to_outer
        } else {
            let c = (self.freq * ((from + 1) as f64 + 5.0 * (to + 1) as f64) * t).cos();
            self.base + self.amp * c * c
        }
    }

    fn bound(&self, from: usize, to: usize) -> f64 {
        if from == to {
            0.0
        } else if self.is_outer(from) {
            self.outer
        } else if self.is_outer(to) {
            self.to_outer
        } else {
            self.base + self.amp.max(0.0)
        }
    }
}

/// A chain over one symbol's mode values.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    pub mode_values: Vec<f64>,
    pub rates: Arc<dyn RateFunction>,
    pub initial: Vec<f64>,
}

impl MarkovChain {
    pub fn new(
        mode_values: Vec<f64>,
        rates: Arc<dyn RateFunction>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let chain = MarkovChain {
            mode_values,
            rates,
            initial,
        };
        chain.validate()?;
        Ok(chain)
    }

    /// A chain that never leaves its single mode.
    pub fn frozen(value: f64) -> Self {
        MarkovChain {
            mode_values: vec![value],
            rates: Arc::new(ConstantRates {
                matrix: vec![vec![0.0]],
            }),
            initial: vec![1.0],
        }
    }

    pub fn size(&self) -> usize {
        self.mode_values.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.mode_values.len();
        if r == 0 || self.rates.size() != r || self.initial.len() != r {
            return Err(Error::InvalidParameter(format!(
                "chain sizes disagree: {} modes, {} rate states, {} initial probabilities",
                r,
                self.rates.size(),
                self.initial.len()
            )));
        }
        if self.initial.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidParameter(
                "negative initial probability".into(),
            ));
        }
        let total: f64 = self.initial.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "initial distribution sums to {total}"
            )));
        }
        for i in 0..r {
            for j in 0..r {
                let b = self.rates.bound(i, j);
                if !(b >= 0.0) || !b.is_finite() || (i == j && b != 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "bad rate bound tau*_{i}{j} = {b}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Generator `Q(t)` with `Q_kj = tau_kj(t)` and `Q_jj = -c_j(t)`.
    fn generator(&self, t: f64, q: &mut [f64]) -> Result<f64> {
        let r = self.size();
        let mut max_exit: f64 = 0.0;
        for i in 0..r {
            let mut exit = 0.0;
            for j in 0..r {
                if i == j {
                    continue;
                }
                let tau = self.rates.rate(i, j, t);
                if !(tau >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "negative rate tau_{i}{j}({t}) = {tau}"
                    )));
                }
                q[i * r + j] = tau;
                exit += tau;
            }
            q[i * r + i] = -exit;
            max_exit = max_exit.max(exit);
        }
        Ok(max_exit)
    }
}

/// Transition probabilities `P_ij(0, t)` on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTrajectory {
    pub times: Vec<f64>,
    /// One row-major `r x r` matrix per time.
    pub matrices: Vec<Vec<f64>>,
    pub size: usize,
}

impl ProbabilityTrajectory {
    pub fn p(&self, k: usize, i: usize, j: usize) -> f64 {
        self.matrices[k][i * self.size + j]
    }

    /// Mode distribution `pi0 P(0, t_k)` for each grid time.
    pub fn occupancy(&self, initial: &[f64]) -> Vec<Vec<f64>> {
        let r = self.size;
        self.matrices
            .iter()
            .map(|m| {
                (0..r)
                    .map(|j| (0..r).map(|i| initial[i] * m[i * r + j]).sum())
                    .collect()
            })
            .collect()
    }

    /// CSV `t,P_1,...,P_r` of the mode distribution.
    pub fn write_csv<W: Write>(&self, initial: &[f64], w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.size).map(|j| format!("P_{j}")));
        wr.write_record(&header)?;
        for (t, row) in self.times.iter().zip(self.occupancy(initial)) {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|p| p.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| Error::io("<probability csv>", e))?;
        Ok(())
    }
}

/// Integrate the forward Kolmogorov equation `dP/dt = P Q(t)`, `P(0) = I`,
/// with classical RK4. The step is `min(1e-2, 0.01 / max_j c_j(t))`,
/// shortened to land on every grid time.
pub fn solve_kolmogorov(chain: &MarkovChain, t_grid: &[f64]) -> Result<ProbabilityTrajectory> {
    chain.validate()?;
    if t_grid.is_empty() || t_grid[0] < 0.0 || t_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidParameter(
            "time grid must be increasing from t >= 0".into(),
        ));
    }
    let r = chain.size();
    let mut p = vec![0.0; r * r];
    for i in 0..r {
        p[i * r + i] = 1.0;
    }
    let mut q = vec![0.0; r * r];
    let mut k1 = vec![0.0; r * r];
    let mut k2 = vec![0.0; r * r];
    let mut k3 = vec![0.0; r * r];
    let mut k4 = vec![0.0; r * r];
    let mut tmp = vec![0.0; r * r];

    let mul = |p: &[f64], q: &[f64], out: &mut [f64]| {
        for i in 0..r {
            for j in 0..r {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += p[i * r + k] * q[k * r + j];
                }
                out[i * r + j] = acc;
            }
        }
    };

    let mut t = 0.0;
    let mut out = ProbabilityTrajectory {
        times: Vec::with_capacity(t_grid.len()),
        matrices: Vec::with_capacity(t_grid.len()),
        size: r,
    };
    for &target in t_grid {
        while t < target {
            let max_exit = chain.generator(t, &mut q)?;
            let mut dt = if max_exit > 0.0 {
                (0.01 / max_exit).min(1e-2)
            } else {
                1e-2
            };
            if t + dt >= target || target - (t + dt) < 1e-12 * target.max(1.0) {
                dt = target - t;
            }
            mul(&p, &q, &mut k1);
            chain.generator(t + 0.5 * dt, &mut q)?;
            for k in 0..r * r {
                tmp[k] = p[k] + 0.5 * dt * k1[k];
            }
            mul(&tmp, &q, &mut k2);
            for k in 0..r * r {
                tmp[k] = p[k] + 0.5 * dt * k2[k];
            }
            mul(&tmp, &q, &mut k3);
            chain.generator(t + dt, &mut q)?;
            for k in 0..r * r {
                tmp[k] = p[k] + dt * k3[k];
            }
            mul(&tmp, &q, &mut k4);
            for k in 0..r * r {
                p[k] += dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
                if p[k] < 0.0 && p[k] > -1e-14 {
                    p[k] = 0.0;
                }
            }
            t = if dt == target - t { target } else { t + dt };
        }
        out.times.push(target);
        out.matrices.push(p.clone());
    }
    Ok(out)
}

/// A right-continuous piecewise-constant realization of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ModePath {
    /// Starts at 0; `jump_times[k]` is when `modes[k]` becomes active.
    pub jump_times: Vec<f64>,
    pub modes: Vec<usize>,
    pub horizon: f64,
}

impl ModePath {
    pub fn constant(mode: usize, horizon: f64) -> Self {
        ModePath {
            jump_times: vec![0.0],
            modes: vec![mode],
            horizon,
        }
    }

    /// Mode active at `t`; at a jump time this is the post-jump mode.
    pub fn mode_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s <= t);
        self.modes[k.saturating_sub(1)]
    }

    pub fn jumps(&self) -> usize {
        self.jump_times.len() - 1
    }
}

/// Draw a path on `[0, horizon]` by thinning against the rate bounds.
pub fn sample_path(chain: &MarkovChain, seed: u64, horizon: f64) -> Result<ModePath> {
    chain.validate()?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidParameter("horizon must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = chain.size();
    let bounds: Vec<Vec<f64>> = (0..r)
        .map(|i| (0..r).map(|j| chain.rates.bound(i, j)).collect())
        .collect();
    let totals: Vec<f64> = bounds.iter().map(|row| row.iter().sum()).collect();

    let mut mode = pick(&chain.initial, rng.random::<f64>());
    let mut path = ModePath::constant(mode, horizon);
    let mut t = 0.0;
    loop {
        let total = totals[mode];
        if total <= 0.0 {
            break;
        }
        let e: f64 = rng.random::<f64>();
        t += -(1.0 - e).ln() / total;
        if t > horizon {
            break;
        }
        let target = pick_weighted(&bounds[mode], total, rng.random::<f64>());
        let accept = chain.rates.rate(mode, target, t) / bounds[mode][target];
        if rng.random::<f64>() < accept {
            mode = target;
            path.jump_times.push(t);
            path.modes.push(mode);
        }
    }
    Ok(path)
}

fn pick(probs: &[f64], u: f64) -> usize {
    pick_weighted(probs, probs.iter().sum(), u)
}

fn pick_weighted(weights: &[f64], total: f64, u: f64) -> usize {
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = k;
            if target < acc {
                return k;
            }
        }
    }
    last
}

/// Piecewise-constant parameter state over `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaPath {
    pub jump_times: Vec<f64>,
    pub states: Vec<DeltaState>,
    pub horizon: f64,
}

impl DeltaPath {
    pub fn constant(state: DeltaState, horizon: f64) -> Self {
        DeltaPath {
            jump_times: vec![0.0],
            states: vec![state],
            horizon,
        }
    }

    /// Map a single chain's path through `state_of(mode)`; used when one
    /// chain moves every parameter at once.
    pub fn from_single(path: &ModePath, state_of: impl Fn(usize) -> DeltaState) -> Self {
        DeltaPath {
            jump_times: path.jump_times.clone(),
            states: path.modes.iter().map(|&m| state_of(m)).collect(),
            horizon: path.horizon,
        }
    }

    pub fn state_at(&self, t: f64) -> &DeltaState {
        let k = self.jump_times.partition_point(|&s| s <= t);
        &self.states[k.saturating_sub(1)]
    }

    /// `(start, end, state)` for every interval.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64, &DeltaState)> + '_ {
        self.states.iter().enumerate().map(move |(k, s)| {
            let end = self.jump_times.get(k + 1).copied().unwrap_or(self.horizon);
            (self.jump_times[k], end, s)
        })
    }

    pub fn max_speeds(&self) -> (f64, f64) {
        self.states.iter().fold((0.0, 0.0), |(l, m), s| {
            (f64::max(l, s.lambda), f64::max(m, s.mu))
        })
    }
}

/// Merge one path per symbol (order `lambda, mu, sigma+, sigma-, phi, rho`)
/// into the product path.
pub fn product_path(paths: &[ModePath; 6], params: &StochasticParams) -> Result<DeltaPath> {
    let horizon = paths[0].horizon;
    for p in &paths[1..] {
        if p.horizon != horizon {
            return Err(Error::HorizonMismatch(horizon, p.horizon));
        }
    }
    let mut times: Vec<f64> = paths
        .iter()
        .flat_map(|p| p.jump_times.iter().copied())
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let states = times
        .iter()
        .map(|&t| params.delta([0, 1, 2, 3, 4, 5].map(|s| paths[s].mode_at(t))))
        .collect();
    Ok(DeltaPath {
        jump_times: times,
        states,
        horizon,
    })
}

/// Draws a parameter path from a seed.
pub trait PathSource: Sync {
    fn sample(&self, seed: u64, horizon: f64) -> Result<DeltaPath>;
}

/// Deterministic plant: one state for the whole horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSource(pub DeltaState);

impl PathSource for FrozenSource {
    fn sample(&self, _seed: u64, horizon: f64) -> Result<DeltaPath> {
        Ok(DeltaPath::constant(self.0.clone(), horizon))
    }
}

/// Six independent chains, one per symbol, merged with [`product_path`].
/// The chains' mode values are ignored; their indices select entries of
/// `params`.
#[derive(Debug, Clone)]
pub struct ProductChains {
    pub chains: [MarkovChain; 6],
    pub params: StochasticParams,
}

impl PathSource for ProductChains {
    fn sample(&self, seed: u64, horizon: f64) -> Result<DeltaPath> {
        let counts = self.params.counts();
        for (c, n) in self.chains.iter().zip(counts) {
            if c.size() != n {
                return Err(Error::InvalidParameter(format!(
                    "chain has {} modes, parameter list has {n}",
                    c.size()
                )));
            }
        }
        let paths = [0, 1, 2, 3, 4, 5]
            .map(|k| sample_path(&self.chains[k], derive_seed(seed, k as u64), horizon));
        let [a, b, c, d, e, f] = paths;
        product_path(&[a?, b?, c?, d?, e?, f?], &self.params)
    }
}

/// SplitMix64 step: advances `state` and returns the next output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of run `index` under `master`: the `(index + 1)`-th SplitMix64
/// output started from `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut s = master.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    splitmix64(&mut s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(c: f64) -> MarkovChain {
        MarkovChain::new(
            vec![0.0, 1.0],
            Arc::new(ConstantRates::uniform(2, c).unwrap()),
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn identity_at_time_zero() {
        let chain = MarkovChain::new(
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            Arc::new(DemandRates::standard(5)),
            vec![0.02, 0.32, 0.32, 0.32, 0.02],
        )
        .unwrap();
        let traj = solve_kolmogorov(&chain, &[0.0, 1.0]).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(traj.p(0, i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        for i in 0..5 {
            let s: f64 = (0..5).map(|j| traj.p(1, i, j)).sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn two_state_closed_form() {
        let grid: Vec<f64> = (0..=50).map(|k| k as f64 * 0.1).collect();
        for c in [0.5, 2.0, 20.0] {
            let traj = solve_kolmogorov(&two_state(c), &grid).unwrap();
            for (k, &t) in grid.iter().enumerate() {
                let exact = 0.5 * (1.0 + (-2.0 * c * t).exp());
                assert!((traj.p(k, 0, 0) - exact).abs() < 1e-8, "c={c} t={t}");
            }
        }
    }

    #[test]
    fn rejects_bad_chains() {
        assert!(ConstantRates::new(vec![vec![0.0, -1.0], vec![1.0, 0.0]]).is_err());
        assert!(ConstantRates::new(vec![vec![1.0, 1.0], vec![1.0, 0.0]]).is_err());
        assert!(MarkovChain::new(
            vec![0.0, 1.0],
            Arc::new(ConstantRates::uniform(2, 1.0).unwrap()),
            vec![0.5, 0.6]
        )
        .is_err());
    }

    #[test]
    fn negative_time_varying_rate_is_rejected() {
        #[derive(Debug)]
        struct Bad;
        impl RateFunction for Bad {
            fn size(&self) -> usize {
                2
            }
            fn rate(&self, i: usize, j: usize, t: f64) -> f64 {
                if i == j {
                    0.0
                } else {
                    1.0 - t
                }
            }
            fn bound(&self, i: usize, j: usize) -> f64 {
                if i == j {
                    0.0
                } else {
                    1.0
                }
            }
        }
        let chain = MarkovChain::new(vec![0.0, 1.0], Arc::new(Bad), vec![1.0, 0.0]).unwrap();
        assert!(solve_kolmogorov(&chain, &[0.5]).is_ok());
        assert!(solve_kolmogorov(&chain, &[2.0]).is_err());
    }

    #[test]
    fn frozen_chain_never_jumps() {
        let p = sample_path(&MarkovChain::frozen(3.0), 7, 100.0).unwrap();
        assert_eq!(p.jump_times, vec![0.0]);
        assert_eq!(p.mode_at(99.0), 0);
        let zero = MarkovChain::new(
            vec![0.0, 1.0],
            Arc::new(ConstantRates::uniform(2, 0.0).unwrap()),
            vec![0.0, 1.0],
        )
        .unwrap();
        let p = sample_path(&zero, 1, 10.0).unwrap();
        assert_eq!(p.modes, vec![1]);
    }

    #[test]
    fn sampling_is_reproducible_and_right_continuous() {
        let chain = two_state(3.0);
        let a = sample_path(&chain, 42, 10.0).unwrap();
        let b = sample_path(&chain, 42, 10.0).unwrap();
        assert_eq!(a, b);
        assert!(a.jumps() > 5);
        for (k, &t) in a.jump_times.iter().enumerate() {
            assert_eq!(a.mode_at(t), a.modes[k]);
        }
        assert_ne!(a, sample_path(&chain, 43, 10.0).unwrap());
    }

    #[test]
    fn product_merges_jump_times() {
        let sp = StochasticParams {
            lambda: vec![1.0, 2.0],
            mu: vec![1.0, 2.0],
            sigma_plus: vec![0.0],
            sigma_minus: vec![0.0],
            phi: vec![0.5],
            rho: vec![0.1],
        };
        let mk = |jumps: &[f64], modes: &[usize]| ModePath {
            jump_times: jumps.to_vec(),
            modes: modes.to_vec(),
            horizon: 3.0,
        };
        let paths = [
            mk(&[0.0, 1.0], &[0, 1]),
            mk(&[0.0, 2.0], &[1, 0]),
            ModePath::constant(0, 3.0),
            ModePath::constant(0, 3.0),
            ModePath::constant(0, 3.0),
            ModePath::constant(0, 3.0),
        ];
        let d = product_path(&paths, &sp).unwrap();
        assert_eq!(d.jump_times, vec![0.0, 1.0, 2.0]);
        let lm: Vec<(f64, f64)> = d.states.iter().map(|s| (s.lambda, s.mu)).collect();
        assert_eq!(lm, vec![(1.0, 2.0), (2.0, 2.0), (2.0, 1.0)]);
        assert_eq!(d.intervals().count(), 3);

        let constant = [0; 6].map(|_| ModePath::constant(0, 3.0));
        assert_eq!(product_path(&constant, &sp).unwrap().states.len(), 1);

        let mut bad = paths.clone();
        bad[3].horizon = 4.0;
        assert!(matches!(
            product_path(&bad, &sp),
            Err(Error::HorizonMismatch(..))
        ));
    }

    #[test]
    fn seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
