//! Backstepping kernels on the triangle `T = {0 <= xi <= x <= 1}`.
//!
//! The kernels solve the Goursat system
//!
//! ```text
//! lambda (Kuu_x + Kuu_xi) = -sigma-(xi) Kuv        mu Kvu_x - lambda Kvu_xi = sigma-(xi) Kvv
//! lambda Kuv_x - mu Kuv_xi = -sigma+(xi) Kuu       mu (Kvv_x + Kvv_xi)     = sigma+(xi) Kvu
//!
//! Kuv(x, x) =  sigma+(x) / (lambda + mu)           Kvu(x, x) = -sigma-(x) / (lambda + mu)
//! Kuu(x, 0) = mu / (lambda phi) Kuv(x, 0)          Kvv(x, 0) = lambda phi / mu Kvu(x, 0)
//! ```
//!
//! which is what makes the nominal closed loop equal to pure transport in the
//! target coordinates. The solver writes each equation as an integral along
//! its characteristic and iterates successive approximations until the sup
//! change drops below the tolerance.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::NominalParams;

/// Uniform grid on the triangle with `n` points per edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriangleGrid {
    n: usize,
}

impl TriangleGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "triangle grid needs n >= 2, got {n}"
            )));
        }
        Ok(TriangleGrid { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat index of node `(x_i, xi_j)`, `j <= i`.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i < self.n);
        i * (i + 1) / 2 + j
    }

    /// Node coordinates in storage order (row `x_i` outer, `xi_j` inner).
    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = self.h();
        (0..self.n).flat_map(move |i| (0..=i).map(move |j| (i as f64 * h, j as f64 * h)))
    }
}

/// One scalar function tabulated on a [`TriangleGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    grid: TriangleGrid,
    data: Vec<f64>,
}

impl KernelField {
    pub fn zeros(grid: TriangleGrid) -> Self {
        KernelField {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: TriangleGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        KernelField {
            grid,
            data: grid.nodes().map(|(x, xi)| f(x, xi)).collect(),
        }
    }

    pub fn from_vec(grid: TriangleGrid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} nodes",
                data.len(),
                grid.len()
            )));
        }
        Ok(KernelField { grid, data })
    }

    pub fn grid(&self) -> TriangleGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[self.grid.index(i, j)]
    }

    #[inline]
    fn get(&self, i: isize, j: isize) -> Option<f64> {
        let n = self.grid.n as isize;
        if i < 0 || j < 0 || i >= n || j > i {
            None
        } else {
            Some(self.at(i as usize, j as usize))
        }
    }

    /// Piecewise-linear interpolation on the triangulated grid.
    pub fn eval(&self, x: f64, xi: f64) -> f64 {
        let n = self.grid.n;
        let inv_h = (n - 1) as f64;
        let sx = (x * inv_h).clamp(0.0, inv_h);
        let sxi = (xi * inv_h).clamp(0.0, sx);
        let i0 = (sx.floor() as usize).min(n - 2);
        let j0 = (sxi.floor() as usize).min(i0);
        let a = sx - i0 as f64;
        let b = sxi - j0 as f64;
        let f00 = self.at(i0, j0);
        let f11 = self.at(i0 + 1, j0 + 1);
        if b <= a || j0 == i0 {
            let f10 = self.at(i0 + 1, j0);
            f00 + a * (f10 - f00) + b * (f11 - f10)
        } else {
            let f01 = self.at(i0, j0 + 1);
            f00 + b * (f01 - f00) + a * (f11 - f01)
        }
    }

    pub fn sup_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &KernelField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `(d/dx, d/dxi)` at every node: central differences where both
    /// neighbours exist, one-sided otherwise. At the two corners where a
    /// coordinate direction leaves the triangle on both sides, the diagonal
    /// difference supplies `d/dx + d/dxi`.
    pub fn gradient(&self) -> (KernelField, KernelField) {
        let n = self.grid.n;
        let h = self.grid.h();
        let mut dx = vec![0.0; self.grid.len()];
        let mut dxi = vec![0.0; self.grid.len()];
        for i in 0..n as isize {
            for j in 0..=i {
                let c = self.at(i as usize, j as usize);
                let gx = one_dir(self.get(i - 1, j), c, self.get(i + 1, j), h);
                let gxi = one_dir(self.get(i, j - 1), c, self.get(i, j + 1), h);
                let diag = || {
                    let up = self.get(i + 1, j + 1);
                    let down = self.get(i - 1, j - 1);
                    one_dir(down, c, up, h).unwrap_or(0.0)
                };
                let (gx, gxi) = match (gx, gxi) {
                    (Some(a), Some(b)) => (a, b),
                    (None, Some(b)) => (diag() - b, b),
                    (Some(a), None) => (a, diag() - a),
                    (None, None) => (0.0, 0.0),
                };
                let k = self.grid.index(i as usize, j as usize);
                dx[k] = gx;
                dxi[k] = gxi;
            }
        }
        (
            KernelField {
                grid: self.grid,
                data: dx,
            },
            KernelField {
                grid: self.grid,
                data: dxi,
            },
        )
    }

    /// Interpolate onto another grid.
    pub fn resample(&self, grid: TriangleGrid) -> KernelField {
        KernelField::from_fn(grid, |x, xi| self.eval(x, xi))
    }
}

fn one_dir(back: Option<f64>, c: f64, fwd: Option<f64>, h: f64) -> Option<f64> {
    match (back, fwd) {
        (Some(b), Some(f)) => Some((f - b) / (2.0 * h)),
        (None, Some(f)) => Some((f - c) / h),
        (Some(b), None) => Some((c - b) / h),
        (None, None) => None,
    }
}

/// The four transformation kernels of one nominal plant.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    pub kuu: KernelField,
    pub kuv: KernelField,
    pub kvu: KernelField,
    pub kvv: KernelField,
    pub nominal: NominalParams,
}

impl KernelSet {
    pub fn zeros(nominal: NominalParams, grid: TriangleGrid) -> Self {
        KernelSet {
            kuu: KernelField::zeros(grid),
            kuv: KernelField::zeros(grid),
            kvu: KernelField::zeros(grid),
            kvv: KernelField::zeros(grid),
            nominal,
        }
    }

    pub fn grid(&self) -> TriangleGrid {
        self.kuu.grid
    }

    /// Components in the order `Kuu, Kuv, Kvu, Kvv`.
    pub fn components(&self) -> [&KernelField; 4] {
        [&self.kuu, &self.kuv, &self.kvu, &self.kvv]
    }

    pub fn from_components(nominal: NominalParams, c: [KernelField; 4]) -> Result<Self> {
        let g = c[0].grid;
        if c.iter().any(|f| f.grid != g) {
            return Err(Error::GridMismatch(
                "kernel components on different grids".into(),
            ));
        }
        let [kuu, kuv, kvu, kvv] = c;
        Ok(KernelSet {
            kuu,
            kuv,
            kvu,
            kvv,
            nominal,
        })
    }

    pub fn resample(&self, n: usize) -> Result<KernelSet> {
        let g = TriangleGrid::new(n)?;
        Ok(KernelSet {
            kuu: self.kuu.resample(g),
            kuv: self.kuv.resample(g),
            kvu: self.kvu.resample(g),
            kvv: self.kvv.resample(g),
            nominal: self.nominal.clone(),
        })
    }

    /// Largest nodal difference per component.
    pub fn max_abs_diff(&self, other: &KernelSet) -> [f64; 4] {
        let a = self.components();
        let b = other.components();
        [0, 1, 2, 3].map(|c| a[c].max_abs_diff(b[c]))
    }

    /// CSV with header `x,xi,Kuu,Kuv,Kvu,Kvv`, row-major over the triangle.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "xi", "Kuu", "Kuv", "Kvu", "Kvv"])?;
        for (k, (x, xi)) in self.grid().nodes().enumerate() {
            wr.write_record(&[
                x.to_string(),
                xi.to_string(),
                self.kuu.data[k].to_string(),
                self.kuv.data[k].to_string(),
                self.kvu.data[k].to_string(),
                self.kvv.data[k].to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<kernel csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Inverse of [`KernelSet::write_csv`]; the grid size is inferred from
    /// the row count.
    pub fn read_csv<R: std::io::Read>(r: R, nominal: NominalParams) -> Result<KernelSet> {
        let mut rd = csv::Reader::from_reader(r);
        let mut cols: [Vec<f64>; 4] = Default::default();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != 6 {
                return Err(Error::GridMismatch(format!(
                    "kernel row with {} fields",
                    rec.len()
                )));
            }
            for c in 0..4 {
                let v: f64 = rec[c + 2]
                    .trim()
                    .parse()
                    .map_err(|_| Error::GridMismatch(format!("bad number {:?}", &rec[c + 2])))?;
                cols[c].push(v);
            }
        }
        let rows = cols[0].len();
        // n (n + 1) / 2 = rows
        let n = ((((8 * rows + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
        let grid = TriangleGrid::new(n)?;
        if grid.len() != rows {
            return Err(Error::GridMismatch(format!(
                "{rows} rows is not a triangular number"
            )));
        }
        let [a, b, c, d] = cols;
        KernelSet::from_components(
            nominal,
            [
                KernelField::from_vec(grid, a)?,
                KernelField::from_vec(grid, b)?,
                KernelField::from_vec(grid, c)?,
                KernelField::from_vec(grid, d)?,
            ],
        )
    }

    pub fn load_csv(path: &Path, nominal: NominalParams) -> Result<KernelSet> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        KernelSet::read_csv(std::io::BufReader::new(f), nominal)
    }
}

/// Successive-approximation controls.
#[derive(Debug, Clone, Copy)]
pub struct KernelSolverOptions {
    pub max_sweeps: usize,
    pub tolerance: f64,
}

impl Default for KernelSolverOptions {
    fn default() -> Self {
        KernelSolverOptions {
            max_sweeps: 200,
            tolerance: 1e-10,
        }
    }
}

/// Solve the kernel equations of `nominal` on an `n`-point triangle grid.
pub fn solve_kernels(nominal: &NominalParams, n: usize) -> Result<KernelSet> {
    solve_kernels_with(nominal, n, KernelSolverOptions::default())
}

pub fn solve_kernels_with(
    nominal: &NominalParams,
    n: usize,
    opts: KernelSolverOptions,
) -> Result<KernelSet> {
    nominal.validate()?;
    if n < 8 {
        return Err(Error::InvalidParameter(format!(
            "kernel grid needs n >= 8, got {n}"
        )));
    }
    if nominal.phi0 == 0.0 {
        return Err(Error::InvalidParameter("phi0 = 0 is not supported".into()));
    }
    let grid = TriangleGrid::new(n)?;
    let h = grid.h();
    let l = nominal.lambda0;
    let m = nominal.mu0;
    let phi = nominal.phi0;
    let sp = |x: f64| nominal.sigma_plus0.eval(x);
    let sm = |x: f64| nominal.sigma_minus0.eval(x);
    let sp_nodes: Vec<f64> = nominal.sigma_plus0.tabulate(n);
    let sm_nodes: Vec<f64> = nominal.sigma_minus0.tabulate(n);

    let mut kuu = KernelField::zeros(grid);
    let mut kuv = KernelField::zeros(grid);
    let mut kvu = KernelField::zeros(grid);
    let mut kvv = KernelField::zeros(grid);

    let mut last_change = f64::INFINITY;
    for _sweep in 0..opts.max_sweeps {
        let mut change: f64 = 0.0;

        // Kuv along (x - lambda s, xi + mu s) back to the diagonal.
        let mut next_uv = KernelField::zeros(grid);
        for i in 0..n {
            let x = i as f64 * h;
            for j in 0..=i {
                let xi = j as f64 * h;
                let y = (m * x + l * xi) / (l + m);
                let mut val = sp(y) / (l + m);
                let cells = i - j;
                if cells > 0 {
                    let s_end = (x - xi) / (l + m);
                    let ds = s_end / cells as f64;
                    let integrand = |k: usize| {
                        let s = k as f64 * ds;
                        sp(xi + m * s) * kuu.eval(x - l * s, xi + m * s)
                    };
                    val -= trapezoid(cells, ds, integrand);
                }
                next_uv.data[grid.index(i, j)] = val;
            }
        }
        // Kuu along (x - xi + s, s) from the xi = 0 edge.
        let mut next_uu = KernelField::zeros(grid);
        for i in 0..n {
            for j in 0..=i {
                let base = i - j;
                let mut val = m / (l * phi) * next_uv.at(base, 0);
                if j > 0 {
                    let integrand = |k: usize| sm_nodes[k] * next_uv.at(base + k, k);
                    val -= trapezoid(j, h, integrand) / l;
                }
                next_uu.data[grid.index(i, j)] = val;
            }
        }
        // Kvu along (x - mu s, xi + lambda s) back to the diagonal.
        let mut next_vu = KernelField::zeros(grid);
        for i in 0..n {
            let x = i as f64 * h;
            for j in 0..=i {
                let xi = j as f64 * h;
                let y = (l * x + m * xi) / (l + m);
                let mut val = -sm(y) / (l + m);
                let cells = i - j;
                if cells > 0 {
                    let s_end = (x - xi) / (l + m);
                    let ds = s_end / cells as f64;
                    let integrand = |k: usize| {
                        let s = k as f64 * ds;
                        sm(xi + l * s) * kvv.eval(x - m * s, xi + l * s)
                    };
                    val += trapezoid(cells, ds, integrand);
                }
                next_vu.data[grid.index(i, j)] = val;
            }
        }
        // Kvv along (x - xi + s, s) from the xi = 0 edge.
        let mut next_vv = KernelField::zeros(grid);
        for i in 0..n {
            for j in 0..=i {
                let base = i - j;
                let mut val = l * phi / m * next_vu.at(base, 0);
                if j > 0 {
                    let integrand = |k: usize| sp_nodes[k] * next_vu.at(base + k, k);
                    val += trapezoid(j, h, integrand) / m;
                }
                next_vv.data[grid.index(i, j)] = val;
            }
        }

        change = change
            .max(next_uu.max_abs_diff(&kuu))
            .max(next_uv.max_abs_diff(&kuv))
            .max(next_vu.max_abs_diff(&kvu))
            .max(next_vv.max_abs_diff(&kvv));
        kuu = next_uu;
        kuv = next_uv;
        kvu = next_vu;
        kvv = next_vv;
        if !change.is_finite() {
            break;
        }
        last_change = change;
        if change <= opts.tolerance {
            return Ok(KernelSet {
                kuu,
                kuv,
                kvu,
                kvv,
                nominal: nominal.clone(),
            });
        }
    }
    Err(Error::KernelNonConvergence {
        iterations: opts.max_sweeps,
        last_change,
    })
}

#[inline]
fn trapezoid(cells: usize, step: f64, f: impl Fn(usize) -> f64) -> f64 {
    let mut acc = 0.5 * (f(0) + f(cells));
    for k in 1..cells {
        acc += f(k);
    }
    acc * step
}

/// Sup and L2 residuals of the kernel equations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResidualReport {
    /// Interior equations in the order `Kuu, Kuv, Kvu, Kvv`.
    pub pde_sup: [f64; 4],
    pub pde_l2: [f64; 4],
    /// `Kuv` diagonal, `Kvu` diagonal, `Kuu` edge, `Kvv` edge.
    pub boundary_sup: [f64; 4],
    pub boundary_l2: [f64; 4],
}

impl ResidualReport {
    pub fn pde_max(&self) -> f64 {
        self.pde_sup.iter().cloned().fold(0.0, f64::max)
    }

    pub fn boundary_max(&self) -> f64 {
        self.boundary_sup.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max(&self) -> f64 {
        self.pde_max().max(self.boundary_max())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["condition", "sup", "l2"])?;
        let names = ["pde_Kuu", "pde_Kuv", "pde_Kvu", "pde_Kvv"];
        for c in 0..4 {
            wr.write_record(&[
                names[c].to_string(),
                self.pde_sup[c].to_string(),
                self.pde_l2[c].to_string(),
            ])?;
        }
        let names = ["diag_Kuv", "diag_Kvu", "edge_Kuu", "edge_Kvv"];
        for c in 0..4 {
            wr.write_record(&[
                names[c].to_string(),
                self.boundary_sup[c].to_string(),
                self.boundary_l2[c].to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<residual csv>", e))?;
        Ok(())
    }
}

/// Evaluate the kernel equations on the tabulated kernels with grid
/// differences. Independent of how the kernels were produced, so it serves
/// both the direct solver and operator outputs.
pub fn kernel_residual(kernels: &KernelSet) -> ResidualReport {
    let nom = &kernels.nominal;
    let grid = kernels.grid();
    let n = grid.n();
    let h = grid.h();
    let (l, m, phi) = (nom.lambda0, nom.mu0, nom.phi0);
    let (uu_x, uu_xi) = kernels.kuu.gradient();
    let (uv_x, uv_xi) = kernels.kuv.gradient();
    let (vu_x, vu_xi) = kernels.kvu.gradient();
    let (vv_x, vv_xi) = kernels.kvv.gradient();

    let mut rep = ResidualReport::default();
    let mut pde_sq = [0.0; 4];
    for i in 0..n {
        for j in 0..=i {
            let k = grid.index(i, j);
            let xi = j as f64 * h;
            let sp = nom.sigma_plus0.eval(xi);
            let sm = nom.sigma_minus0.eval(xi);
            let r = [
                l * uu_x.data[k] + l * uu_xi.data[k] + sm * kernels.kuv.data[k],
                l * uv_x.data[k] - m * uv_xi.data[k] + sp * kernels.kuu.data[k],
                m * vu_x.data[k] - l * vu_xi.data[k] - sm * kernels.kvv.data[k],
                m * vv_x.data[k] + m * vv_xi.data[k] - sp * kernels.kvu.data[k],
            ];
            for c in 0..4 {
                rep.pde_sup[c] = rep.pde_sup[c].max(r[c].abs());
                pde_sq[c] += r[c] * r[c];
            }
        }
    }
    let mut bnd_sq = [0.0; 4];
    for i in 0..n {
        let x = i as f64 * h;
        let r = [
            kernels.kuv.at(i, i) - nom.sigma_plus0.eval(x) / (l + m),
            kernels.kvu.at(i, i) + nom.sigma_minus0.eval(x) / (l + m),
            if phi != 0.0 {
                kernels.kuu.at(i, 0) - m / (l * phi) * kernels.kuv.at(i, 0)
            } else {
                f64::NAN
            },
            kernels.kvv.at(i, 0) - l * phi / m * kernels.kvu.at(i, 0),
        ];
        for c in 0..4 {
            rep.boundary_sup[c] = rep.boundary_sup[c].max(r[c].abs());
            bnd_sq[c] += r[c] * r[c];
        }
    }
    for c in 0..4 {
        rep.pde_l2[c] = (pde_sq[c] * h * h).sqrt();
        rep.boundary_l2[c] = (bnd_sq[c] * h).sqrt();
    }
    rep
}

/// Control gains `Kvu(1, .)` and `Kvv(1, .)` on a uniform grid over `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSlice {
    pub kvu: Vec<f64>,
    pub kvv: Vec<f64>,
}

impl GainSlice {
    pub fn zeros(nodes: usize) -> Self {
        GainSlice {
            kvu: vec![0.0; nodes],
            kvv: vec![0.0; nodes],
        }
    }

    pub fn len(&self) -> usize {
        self.kvu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kvu.is_empty()
    }

    /// Linear interpolation at `xi`.
    pub fn at(&self, xi: f64) -> (f64, f64) {
        (
            crate::params::interp_uniform(&self.kvu, xi),
            crate::params::interp_uniform(&self.kvv, xi),
        )
    }

    /// Interpolate onto `nodes` uniform points.
    pub fn resample(&self, nodes: usize) -> GainSlice {
        if nodes == self.len() {
            return self.clone();
        }
        let h = 1.0 / (nodes - 1) as f64;
        let (kvu, kvv) = (0..nodes).map(|k| self.at(k as f64 * h)).unzip();
        GainSlice { kvu, kvv }
    }

    pub fn sup_abs_diff(&self, other: &GainSlice) -> f64 {
        let o = other.resample(self.len());
        self.kvu
            .iter()
            .zip(&o.kvu)
            .chain(self.kvv.iter().zip(&o.kvv))
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Extract the `x = 1` row.
pub fn gain_slice(kernels: &KernelSet) -> GainSlice {
    let n = kernels.grid().n();
    let i = n - 1;
    GainSlice {
        kvu: (0..n).map(|j| kernels.kvu.at(i, j)).collect(),
        kvv: (0..n).map(|j| kernels.kvv.at(i, j)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Volterra transform `(u, v) -> (alpha, beta)` and its inverse. States must
/// live on the `n` nodes of the kernel grid.
pub fn backstepping_transform(
    a: &[f64],
    b: &[f64],
    kernels: &KernelSet,
    direction: Direction,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = kernels.grid().n();
    if a.len() != n || b.len() != n {
        return Err(Error::GridMismatch(format!(
            "state has {}/{} nodes, kernels have {n}",
            a.len(),
            b.len()
        )));
    }
    let h = kernels.grid().h();
    let (kuu, kuv, kvu, kvv) = (&kernels.kuu, &kernels.kuv, &kernels.kvu, &kernels.kvv);
    match direction {
        Direction::Forward => {
            let mut alpha = vec![0.0; n];
            let mut beta = vec![0.0; n];
            for i in 0..n {
                let (mut ia, mut ib) = (0.0, 0.0);
                for j in 0..=i {
                    let w = trap_weight(i, j, h);
                    ia += w * (kuu.at(i, j) * a[j] + kuv.at(i, j) * b[j]);
                    ib += w * (kvu.at(i, j) * a[j] + kvv.at(i, j) * b[j]);
                }
                alpha[i] = a[i] - ia;
                beta[i] = b[i] - ib;
            }
            Ok((alpha, beta))
        }
        Direction::Inverse => {
            let mut u = vec![0.0; n];
            let mut v = vec![0.0; n];
            for i in 0..n {
                let (mut ra, mut rb) = (a[i], b[i]);
                for j in 0..i {
                    let w = trap_weight(i, j, h);
                    ra += w * (kuu.at(i, j) * u[j] + kuv.at(i, j) * v[j]);
                    rb += w * (kvu.at(i, j) * u[j] + kvv.at(i, j) * v[j]);
                }
                let w = trap_weight(i, i, h);
                // [1 - w Kuu, -w Kuv; -w Kvu, 1 - w Kvv] (u_i, v_i) = (ra, rb)
                let m11 = 1.0 - w * kuu.at(i, i);
                let m12 = -w * kuv.at(i, i);
                let m21 = -w * kvu.at(i, i);
                let m22 = 1.0 - w * kvv.at(i, i);
                let det = m11 * m22 - m12 * m21;
                u[i] = (m22 * ra - m12 * rb) / det;
                v[i] = (m11 * rb - m21 * ra) / det;
            }
            Ok((u, v))
        }
    }
}

#[inline]
fn trap_weight(i: usize, j: usize, h: f64) -> f64 {
    if i == 0 {
        0.0
    } else if j == 0 || j == i {
        0.5 * h
    } else {
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::CouplingProfile;

    fn plant() -> NominalParams {
        NominalParams::constant(1.0, 2.0, 0.8, -0.6, 0.7, 0.4)
    }

    #[test]
    fn zero_couplings_give_zero_kernels() {
        let nom = NominalParams::constant(1.0, 1.5, 0.0, 0.0, 0.5, 0.2);
        let k = solve_kernels(&nom, 16).unwrap();
        for c in k.components() {
            assert_eq!(c.sup_abs(), 0.0);
        }
        assert_eq!(gain_slice(&k), GainSlice::zeros(16));
        assert_eq!(kernel_residual(&k).max(), 0.0);
    }

    #[test]
    fn diagonal_traces() {
        let nom = plant();
        let k = solve_kernels(&nom, 32).unwrap();
        for i in 0..32 {
            assert!((k.kuv.at(i, i) - 0.8 / 3.0).abs() < 1e-12);
            assert!((k.kvu.at(i, i) - 0.6 / 3.0).abs() < 1e-12);
        }
        let rep = kernel_residual(&k);
        assert!(rep.boundary_max() < 1e-9, "{rep:?}");
    }

    #[test]
    fn zero_field_residual_is_diagonal_data() {
        let nom = plant();
        let k = KernelSet::zeros(nom, TriangleGrid::new(16).unwrap());
        let rep = kernel_residual(&k);
        assert_eq!(rep.pde_max(), 0.0);
        assert!((rep.boundary_max() - 0.8 / 3.0).abs() < 1e-15);
        assert!((rep.boundary_sup[1] - 0.6 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn residual_is_first_order() {
        let nom = plant();
        let r1 = kernel_residual(&solve_kernels(&nom, 33).unwrap()).pde_max();
        let r2 = kernel_residual(&solve_kernels(&nom, 65).unwrap()).pde_max();
        let ratio = r1 / r2;
        assert!(
            (1.7..=2.3).contains(&ratio),
            "r1 {r1:e} r2 {r2:e} ratio {ratio}"
        );
    }

    #[test]
    fn spatially_varying_sigma() {
        let mut nom = plant();
        nom.sigma_plus0 = CouplingProfile::Constant(0.0);
        nom.sigma_minus0 = CouplingProfile::Exponential {
            amplitude: -0.8,
            rate: 0.9,
        };
        nom.phi0 = -2.0;
        let k = solve_kernels(&nom, 64).unwrap();
        let rep = kernel_residual(&k);
        assert!(rep.max() < 10.0 * k.grid().h(), "{rep:?}");
        assert_eq!(k.kuu.sup_abs(), 0.0);
        assert!((k.kvu.at(63, 63) - 0.8 * (-0.9f64).exp() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gain_slice_matches_last_row() {
        let k = solve_kernels(&plant(), 20).unwrap();
        let g = gain_slice(&k);
        for j in 0..20 {
            assert_eq!(g.kvu[j], k.kvu.at(19, j));
            assert_eq!(g.kvv[j], k.kvv.at(19, j));
        }
        let (a, _) = g.at(1.0);
        assert_eq!(a, k.kvu.at(19, 19));
    }

    #[test]
    fn transform_constant_example() {
        let n = 11;
        let g = TriangleGrid::new(n).unwrap();
        let one = KernelField::from_fn(g, |_, _| 1.0);
        let zero = KernelField::zeros(g);
        let k =
            KernelSet::from_components(plant(), [one.clone(), one, zero.clone(), zero]).unwrap();
        let ones = vec![1.0; n];
        let (alpha, beta) = backstepping_transform(&ones, &ones, &k, Direction::Forward).unwrap();
        for i in 0..n {
            let x = i as f64 / 10.0;
            assert!((alpha[i] - (1.0 - 2.0 * x)).abs() < 1e-14);
            assert_eq!(beta[i], 1.0);
        }
    }

    #[test]
    fn zero_kernels_transform_is_identity() {
        let k = KernelSet::zeros(plant(), TriangleGrid::new(9).unwrap());
        let u: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let v: Vec<f64> = (0..9).map(|i| (i as f64).cos()).collect();
        let (a, b) = backstepping_transform(&u, &v, &k, Direction::Forward).unwrap();
        assert_eq!((a, b), (u.clone(), v.clone()));
        assert!(backstepping_transform(&u[..8], &v, &k, Direction::Inverse).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let k = solve_kernels(&plant(), 12).unwrap();
        let mut buf = Vec::new();
        k.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,xi,Kuu,Kuv,Kvu,Kvv\n"));
        let back = KernelSet::read_csv(&buf[..], plant()).unwrap();
        assert_eq!(back, k);
    }

    #[test]
    fn interpolation_reproduces_linear_functions() {
        let g = TriangleGrid::new(7).unwrap();
        let f = KernelField::from_fn(g, |x, xi| 2.0 * x - 3.0 * xi + 0.5);
        for &(x, xi) in &[
            (0.33, 0.1),
            (0.9, 0.85),
            (1.0, 1.0),
            (0.5, 0.0),
            (0.71, 0.7),
        ] {
            assert!((f.eval(x, xi) - (2.0 * x - 3.0 * xi + 0.5)).abs() < 1e-12);
        }
        let (dx, dxi) = f.gradient();
        for k in 0..g.len() {
            assert!((dx.values()[k] - 2.0).abs() < 1e-12);
            assert!((dxi.values()[k] + 3.0).abs() < 1e-12);
        }
    }
}
