//! Incompressible two-phase (water/oil) flow on a rectangular grid.
//!
//! Each time step solves the elliptic pressure equation with a two-point
//! flux approximation, then advances water saturation with a backward-Euler
//! upwind scheme. Log-permeability fields come from a truncated
//! Karhunen–Loève expansion of an exponential covariance.

use std::path::Path;

use log::{error, warn};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_array, save_array};
use crate::tensor::Tensor;

/// Total injection rate shared by the two injectors.
pub const IR: f64 = 9.3529;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReservoirGrid {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub porosity: f64,
}

impl ReservoirGrid {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(Error::InvalidArgument(format!(
                "grid needs nx, ny ≥ 4, got {nx}×{ny}"
            )));
        }
        Ok(Self {
            nx,
            ny,
            lx: 333.58,
            ly: 670.56,
            porosity: 1e-3,
        })
    }

    /// 28 rows × 16 columns.
    pub fn desk() -> Self {
        Self::new(16, 28).expect("valid grid")
    }

    /// 110 rows × 60 columns.
    pub fn full_scale() -> Self {
        Self::new(60, 110).expect("valid grid")
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn pore_volume(&self) -> f64 {
        self.porosity * self.lx * self.ly
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn center(&self, cell: usize) -> (f64, f64) {
        let (ix, iy) = (cell % self.nx, cell / self.nx);
        ((ix as f64 + 0.5) * self.dx(), (iy as f64 + 0.5) * self.dy())
    }

    /// Cell mirrored across `x = Lx/2`.
    pub fn mirror(&self, cell: usize) -> usize {
        let (ix, iy) = (cell % self.nx, cell / self.nx);
        self.index(self.nx - 1 - ix, iy)
    }

    /// Cells whose centers are nearest to `(x, y)`; ties are all returned.
    pub fn nearest_cells(&self, x: f64, y: f64) -> Vec<usize> {
        let d: Vec<f64> = (0..self.cells())
            .map(|c| {
                let (cx, cy) = self.center(c);
                ((cx - x).powi(2) + (cy - y).powi(2)).sqrt()
            })
            .collect();
        let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let tol = 1e-9 * (self.dx() + self.dy());
        (0..self.cells()).filter(|&c| d[c] <= best + tol).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidParams {
    pub mu_w: f64,
    pub mu_o: f64,
    pub s_wc: f64,
    pub s_or: f64,
}

impl Default for FluidParams {
    fn default() -> Self {
        Self {
            mu_w: 3e-4,
            mu_o: 3e-3,
            s_wc: 0.2,
            s_or: 0.2,
        }
    }
}

impl FluidParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mu_w > 0.0
            && self.mu_o > 0.0
            && self.s_wc >= 0.0
            && self.s_or >= 0.0
            && self.s_wc + self.s_or < 1.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid fluid parameters {self:?}"
            )));
        }
        Ok(())
    }

    pub fn s_max(&self) -> f64 {
        1.0 - self.s_or
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mobility {
    pub water: f64,
    pub oil: f64,
    /// Water fractional flow `λ_w / (λ_w + λ_o)`.
    pub frac: f64,
}

impl Mobility {
    pub fn total(&self) -> f64 {
        self.water + self.oil
    }

    pub fn oil_cut(&self) -> f64 {
        self.oil / self.total()
    }
}

/// Quadratic relative permeabilities on the normalized saturation.
pub fn mobilities(s_w: f64, fluid: &FluidParams) -> Mobility {
    let s = normalized_saturation(s_w, fluid);
    let water = s * s / fluid.mu_w;
    let oil = (1.0 - s) * (1.0 - s) / fluid.mu_o;
    Mobility {
        water,
        oil,
        frac: water / (water + oil),
    }
}

fn normalized_saturation(s_w: f64, fluid: &FluidParams) -> f64 {
    ((s_w - fluid.s_wc) / (1.0 - fluid.s_or - fluid.s_wc)).clamp(0.0, 1.0)
}

/// `d f_w / d s_w`, zero outside the mobile range.
pub fn frac_derivative(s_w: f64, fluid: &FluidParams) -> f64 {
    let width = 1.0 - fluid.s_or - fluid.s_wc;
    let s = (s_w - fluid.s_wc) / width;
    if !(0.0..=1.0).contains(&s) {
        return 0.0;
    }
    let (lw, lo) = (s * s / fluid.mu_w, (1.0 - s) * (1.0 - s) / fluid.mu_o);
    let (dlw, dlo) = (2.0 * s / fluid.mu_w, -2.0 * (1.0 - s) / fluid.mu_o);
    let tot = lw + lo;
    (dlw * lo - lw * dlo) / (tot * tot) / width
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Well {
    pub name: String,
    /// Signed total rate: positive injects water, negative produces.
    pub rate: f64,
    /// The rate is split equally over these cells.
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellSet {
    pub injectors: Vec<Well>,
    pub producers: Vec<Well>,
}

impl WellSet {
    /// Two injectors on the south corners and five producers along the
    /// west, north and east edges. A location equidistant from several cell
    /// centers spreads its rate over all of them.
    pub fn standard(grid: &ReservoirGrid, ir: f64) -> Self {
        let (lx, ly) = (grid.lx, grid.ly);
        let well = |name: &str, rate: f64, x: f64, y: f64| Well {
            name: name.into(),
            rate,
            cells: grid.nearest_cells(x, y),
        };
        Self {
            injectors: vec![
                well("I1", ir / 2.0, 0.0, 0.0),
                well("I2", ir / 2.0, lx, 0.0),
            ],
            producers: vec![
                well("P1", -ir / 5.0, 0.0, 0.7 * ly),
                well("P2", -ir / 5.0, 0.0, ly),
                well("P3", -ir / 5.0, 0.5 * lx, ly),
                well("P4", -ir / 5.0, lx, ly),
                well("P5", -ir / 5.0, lx, 0.7 * ly),
            ],
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &Well> {
        self.injectors.iter().chain(&self.producers)
    }

    pub fn net_rate(&self) -> f64 {
        self.all().map(|w| w.rate).sum()
    }

    pub fn injection_rate(&self) -> f64 {
        self.injectors.iter().map(|w| w.rate).sum()
    }

    /// Per-cell source vector `q`.
    pub fn sources(&self, grid: &ReservoirGrid) -> Result<Vec<f64>> {
        let mut q = vec![0.0; grid.cells()];
        for w in self.all() {
            if w.cells.is_empty() || w.cells.iter().any(|&c| c >= grid.cells()) {
                return Err(Error::InvalidArgument(format!(
                    "well {} has invalid cells {:?}",
                    w.name, w.cells
                )));
            }
            let share = w.rate / w.cells.len() as f64;
            for &c in &w.cells {
                q[c] += share;
            }
        }
        Ok(q)
    }

    fn validate(&self, grid: &ReservoirGrid) -> Result<Vec<f64>> {
        let scale: f64 = self.all().map(|w| w.rate.abs()).sum::<f64>().max(1e-300);
        if self.net_rate().abs() > 1e-12 * scale {
            return Err(Error::InvalidArgument(format!(
                "well rates must sum to zero, got {}",
                self.net_rate()
            )));
        }
        self.sources(grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlConfig {
    pub modes: usize,
    pub sigma: f64,
    /// Correlation length as a fraction of `Ly`.
    pub corr_len_frac: f64,
    pub gamma: f64,
    pub kappa0: f64,
    /// Constant mean log-permeability.
    pub mean: f64,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            modes: 20,
            sigma: 1.0,
            corr_len_frac: 0.3,
            gamma: 0.3,
            kappa0: 1e-12,
            mean: 0.0,
        }
    }
}

/// Truncated KL expansion of the log-permeability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KLBasis {
    pub grid: ReservoirGrid,
    /// `ny×nx` mean field.
    pub mean: Tensor,
    pub eigenvalues: Vec<f64>,
    /// `L×cells`, orthonormal rows.
    pub modes: Tensor,
    /// Sum of all eigenvalues before truncation.
    pub total_variance: f64,
    pub config: KlConfig,
}

impl KLBasis {
    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }
}

/// Eigendecomposition of the exponential kernel `σ² exp(−‖x − x′‖₁/ℓ)` on
/// the cell centers, keeping the `modes` largest eigenpairs. The inner
/// product is the plain sum over cells, so the eigenvalues add up to
/// `σ² · cells`.
pub fn build_kl_basis(grid: &ReservoirGrid, cfg: &KlConfig) -> Result<KLBasis> {
    let n = grid.cells();
    if cfg.modes == 0 || cfg.modes > n {
        return Err(Error::Config(format!(
            "KL modes must be in 1..={n}, got {}",
            cfg.modes
        )));
    }
    if !(cfg.sigma > 0.0 && cfg.corr_len_frac > 0.0 && cfg.gamma >= 0.0) {
        return Err(Error::Config(format!("invalid KL parameters {cfg:?}")));
    }
    let ell = cfg.corr_len_frac * grid.ly;
    let centers: Vec<(f64, f64)> = (0..n).map(|c| grid.center(c)).collect();
    let var = cfg.sigma * cfg.sigma;
    let cov = DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = (centers[i], centers[j]);
        var * (-((a.0 - b.0).abs() + (a.1 - b.1).abs()) / ell).exp()
    });
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let total_variance: f64 = eig.eigenvalues.iter().sum();

    let mut eigenvalues = Vec::with_capacity(cfg.modes);
    let mut modes = Vec::with_capacity(cfg.modes * n);
    for &k in order.iter().take(cfg.modes) {
        let mut lambda = eig.eigenvalues[k];
        if lambda < 0.0 {
            warn!("clamping negative KL eigenvalue {lambda:e} to 0");
            lambda = 0.0;
        }
        eigenvalues.push(lambda);
        let v = eig.eigenvectors.column(k);
        // fix the sign so the largest-magnitude entry is positive
        let pivot = v
            .iter()
            .cloned()
            .fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        modes.extend(v.iter().map(|x| sign * x));
    }
    Ok(KLBasis {
        grid: *grid,
        mean: Tensor::filled(&[grid.ny, grid.nx], cfg.mean),
        eigenvalues,
        modes: Tensor::matrix(cfg.modes, n, modes)?,
        total_variance,
        config: *cfg,
    })
}

/// `G = Ĝ₀ + γσ Σᵢ √λᵢ ξᵢ φᵢ` as an `ny×nx` field.
pub fn kl_sample(basis: &KLBasis, xi: &[f64]) -> Result<Tensor> {
    if xi.len() != basis.n_modes() {
        return Err(Error::shape("kl_sample", basis.n_modes(), xi.len()));
    }
    let mut g = basis.mean.clone();
    let scale = basis.config.gamma * basis.config.sigma;
    for (i, (&lambda, &z)) in basis.eigenvalues.iter().zip(xi).enumerate() {
        let w = scale * lambda.sqrt() * z;
        if w == 0.0 {
            continue;
        }
        for (gc, phi) in g.data_mut().iter_mut().zip(basis.modes.row(i)) {
            *gc += w * phi;
        }
    }
    Ok(g)
}

/// `K = exp(G) + κ₀` cellwise.
pub fn permeability(g: &Tensor, kappa0: f64) -> Vec<f64> {
    g.data().iter().map(|v| v.exp() + kappa0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirState {
    pub k: Vec<f64>,
    pub s_w: Vec<f64>,
    pub p: Vec<f64>,
    pub t: f64,
}

impl ReservoirState {
    /// Zero initial water saturation and pressure.
    pub fn initial(k: Vec<f64>) -> Self {
        let n = k.len();
        Self {
            k,
            s_w: vec![0.0; n],
            p: vec![0.0; n],
            t: 0.0,
        }
    }
}

/// One interior face between cells `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Face {
    pub a: usize,
    pub b: usize,
    /// Transmissibility including total mobility.
    pub trans: f64,
}

/// TPFA system `A p = q` stored by faces, with one reference cell pinned.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureSystem {
    pub n: usize,
    pub faces: Vec<Face>,
    pub rhs: Vec<f64>,
    pub pinned: usize,
    /// Bandwidth of `A` in the row-major cell ordering.
    pub bandwidth: usize,
}

impl PressureSystem {
    /// Dense `A` before pinning (for inspection and tests).
    pub fn matrix(&self) -> Tensor {
        let n = self.n;
        let mut a = Tensor::zeros(&[n, n]);
        for f in &self.faces {
            let d = a.data_mut();
            d[f.a * n + f.a] += f.trans;
            d[f.b * n + f.b] += f.trans;
            d[f.a * n + f.b] -= f.trans;
            d[f.b * n + f.a] -= f.trans;
        }
        a
    }

    /// Solves with the reference cell held at 0 via banded Cholesky.
    pub fn solve(&self) -> Result<Vec<f64>> {
        let n = self.n;
        let bw = self.bandwidth;
        let mut band = Banded::zeros(n, bw);
        for f in &self.faces {
            band.add(f.a, f.a, f.trans);
            band.add(f.b, f.b, f.trans);
            band.add(f.b.max(f.a), f.a.min(f.b), -f.trans);
        }
        // Pin: replace the reference row and column by the identity.
        let r = self.pinned;
        for j in r.saturating_sub(bw)..r {
            band.set(r, j, 0.0);
        }
        for i in r + 1..(r + bw + 1).min(n) {
            band.set(i, r, 0.0);
        }
        band.set(r, r, 1.0);
        let mut rhs = self.rhs.clone();
        rhs[r] = 0.0;

        let chol = band.clone().cholesky()?;
        let mut p = chol.solve(&rhs);
        // one step of iterative refinement keeps the residual near round-off
        let res: Vec<f64> = band
            .mul(&p)
            .iter()
            .zip(&rhs)
            .map(|(ap, b)| b - ap)
            .collect();
        let corr = chol.solve(&res);
        for (x, c) in p.iter_mut().zip(corr) {
            *x += c;
        }
        Ok(p)
    }
}

/// Lower band of a symmetric matrix, `row i` holding columns `i−bw..=i`.
#[derive(Debug, Clone)]
struct Banded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Banded {
    fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (self.bw - (i - j))
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.at(i, j);
        self.data[k] += v;
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.at(i, j);
        self.data[k] = v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.at(i, j)]
    }

    fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            for j in i.saturating_sub(self.bw)..=i {
                let v = self.get(i, j);
                y[i] += v * x[j];
                if j != i {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    fn cholesky(mut self) -> Result<Self> {
        let bw = self.bw;
        for i in 0..self.n {
            for j in i.saturating_sub(bw)..=i {
                let lo = i.saturating_sub(bw).max(j.saturating_sub(bw));
                let mut s = self.get(i, j);
                for k in lo..j {
                    s -= self.get(i, k) * self.get(j, k);
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::Singular(format!(
                            "pressure matrix is not positive definite at cell {i} (pivot {s:e})"
                        )));
                    }
                    self.set(i, i, s.sqrt());
                } else {
                    let d = self.get(j, j);
                    self.set(i, j, s / d);
                }
            }
        }
        Ok(self)
    }

    /// Solves `L Lᵀ x = b` for a factored band.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y = b.to_vec();
        for i in 0..self.n {
            let mut s = y[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.get(i, k) * y[k];
            }
            y[i] = s / self.get(i, i);
        }
        for i in (0..self.n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + self.bw + 1).min(self.n) {
                s -= self.get(k, i) * y[k];
            }
            y[i] = s / self.get(i, i);
        }
        y
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

/// Two-point flux system for the current saturation: face transmissibility
/// is the harmonic mean of `K·λ_total` scaled by face length over center
/// distance; boundaries carry no flux.
pub fn assemble_pressure(
    state: &ReservoirState,
    grid: &ReservoirGrid,
    fluid: &FluidParams,
    q: &[f64],
) -> Result<PressureSystem> {
    let n = grid.cells();
    if state.k.len() != n || state.s_w.len() != n || q.len() != n {
        return Err(Error::shape(
            "assemble_pressure",
            n,
            format!("k {}, s {}, q {}", state.k.len(), state.s_w.len(), q.len()),
        ));
    }
    let kl: Vec<f64> = state
        .k
        .iter()
        .zip(&state.s_w)
        .map(|(&k, &s)| k * mobilities(s, fluid).total())
        .collect();
    let (tx, ty) = (grid.dy() / grid.dx(), grid.dx() / grid.dy());
    let mut faces = Vec::with_capacity(2 * n);
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let c = grid.index(ix, iy);
            if ix + 1 < grid.nx {
                let e = grid.index(ix + 1, iy);
                faces.push(Face {
                    a: c,
                    b: e,
                    trans: tx * harmonic(kl[c], kl[e]),
                });
            }
            if iy + 1 < grid.ny {
                let nn = grid.index(ix, iy + 1);
                faces.push(Face {
                    a: c,
                    b: nn,
                    trans: ty * harmonic(kl[c], kl[nn]),
                });
            }
        }
    }
    Ok(PressureSystem {
        n,
        faces,
        rhs: q.to_vec(),
        pinned: 0,
        bandwidth: grid.nx,
    })
}

/// Flux across each face from `a` to `b`: `−T (p_b − p_a)`.
pub fn darcy_velocity(faces: &[Face], p: &[f64]) -> Vec<f64> {
    faces.iter().map(|f| -f.trans * (p[f.b] - p[f.a])).collect()
}

/// Net outflow of every cell given face fluxes.
pub fn cell_outflow(n: usize, faces: &[Face], flux: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (f, &v) in faces.iter().zip(flux) {
        out[f.a] += v;
        out[f.b] -= v;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-13,
            max_iters: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaturationStep {
    pub s_w: Vec<f64>,
    pub newton_iters: usize,
    /// Water injected and produced over the step (volumes).
    pub injected: f64,
    pub produced: f64,
}

/// Backward-Euler upwind transport with fixed total fluxes.
///
/// Upwinding makes every cell depend only on itself and cells with higher
/// pressure, so the Newton system is triangular after sorting cells by
/// descending pressure. Each cell is then solved by scalar Newton with the
/// analytic derivative of `f_w`. Returns `NotConverged` if any cell fails
/// within `max_iters`, signalling the caller to cut the step.
#[allow(clippy::too_many_arguments)]
pub fn advance_saturation(
    s_old: &[f64],
    p: &[f64],
    faces: &[Face],
    flux: &[f64],
    q: &[f64],
    grid: &ReservoirGrid,
    fluid: &FluidParams,
    dt: f64,
    newton: &NewtonConfig,
) -> Result<SaturationStep> {
    let n = grid.cells();
    let pv = grid.porosity * grid.cell_volume();
    // adjacency: (neighbor, flux out of this cell)
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(4); n];
    for (f, &v) in faces.iter().zip(flux) {
        adj[f.a].push((f.b, v));
        adj[f.b].push((f.a, -v));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut done = vec![false; n];

    let s_max = fluid.s_max();
    let mut s = s_old.to_vec();
    let mut iters = 0;
    let (mut injected, mut produced) = (0.0, 0.0);
    for &c in &order {
        let mut water_in = q[c].max(0.0);
        let mut out = (-q[c]).max(0.0);
        for &(nb, v) in &adj[c] {
            if v > 0.0 {
                out += v;
            } else if v < 0.0 {
                debug_assert!(done[nb], "upwind cell {nb} unsolved before {c}");
                water_in += -v * mobilities(s[nb], fluid).frac;
            }
        }
        // g(x) = pv (x − s_old) + dt (out f_w(x) − water_in), increasing in x
        let g = |x: f64| pv * (x - s_old[c]) + dt * (out * mobilities(x, fluid).frac - water_in);
        let scale = pv.max(dt * (out + water_in));
        // g(0) ≤ 0 ≤ g(s_max), so the root is bracketed; Newton steps that
        // leave the bracket fall back to bisection.
        let (mut lo, mut hi) = (0.0, s_max);
        let mut x = s_old[c].clamp(lo, hi);
        let mut ok = false;
        for _ in 0..newton.max_iters {
            iters += 1;
            let r = g(x);
            if r.abs() <= newton.tol * scale {
                ok = true;
                break;
            }
            if r > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let d = pv + dt * out * frac_derivative(x, fluid);
            let nx = x - r / d;
            x = if nx > lo && nx < hi {
                nx
            } else {
                0.5 * (lo + hi)
            };
        }
        if !ok && g(x).abs() <= newton.tol * scale {
            ok = true;
        }
        if !ok {
            return Err(Error::NotConverged {
                iters,
                last_update: g(x).abs() / scale,
            });
        }
        s[c] = x;
        done[c] = true;
        injected += dt * q[c].max(0.0);
        produced += dt * (-q[c]).max(0.0) * mobilities(x, fluid).frac;
    }
    Ok(SaturationStep {
        s_w: s,
        newton_iters: iters,
        injected,
        produced,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub t_end: f64,
    pub n_report: usize,
    pub dt_min: f64,
    pub newton: NewtonConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            t_end: 15.0,
            n_report: 100,
            dt_min: 1e-9,
            newton: NewtonConfig::default(),
        }
    }
}

/// Per-run conservation diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceLog {
    /// Largest per-step `|Σ pv Δs − (inj − prod)| / (inj + prod)`.
    pub max_step_residual: f64,
    /// Largest relative deviation of injector-cell outflux from the injection rate.
    pub max_injector_error: f64,
    pub water_in_place: f64,
    pub injected: f64,
    pub produced: f64,
    pub min_saturation: f64,
    pub max_saturation: f64,
    pub steps: usize,
    pub rejected_steps: usize,
}

impl BalanceLog {
    /// `|water in place − (injected − produced)|` relative to injected volume.
    pub fn cumulative_residual(&self) -> f64 {
        (self.water_in_place - (self.injected - self.produced)).abs() / self.injected.max(1e-300)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// Oil saturation `1 − s_w` at `t_end`, `ny×nx`.
    pub s_oil: Tensor,
    /// Producer oil cuts, `producers × n_report`.
    pub oil_cut: Tensor,
    pub report_times: Vec<f64>,
    pub state: ReservoirState,
    pub balance: BalanceLog,
}

/// Sequential pressure/transport loop from zero water saturation.
///
/// Steps start at `t_end/200`, halve whenever the saturation Newton fails,
/// double after five consecutive successes and never cross a report time.
pub fn simulate(
    g: &Tensor,
    kappa0: f64,
    grid: &ReservoirGrid,
    fluid: &FluidParams,
    wells: &WellSet,
    cfg: &SimConfig,
) -> Result<SimOutput> {
    fluid.validate()?;
    if g.len() != grid.cells() {
        return Err(Error::shape("simulate", grid.cells(), g.len()));
    }
    g.ensure_finite("log-permeability")?;
    if !(cfg.t_end > 0.0) || cfg.n_report == 0 {
        return Err(Error::Config(format!(
            "need t_end > 0 and n_report ≥ 1, got {cfg:?}"
        )));
    }
    let q = wells.validate(grid)?;
    let inj_rate = wells.injection_rate();
    let injector_cells: Vec<usize> = wells
        .injectors
        .iter()
        .flat_map(|w| w.cells.iter().copied())
        .collect();

    let mut state = ReservoirState::initial(permeability(g, kappa0));
    let report_times: Vec<f64> = (1..=cfg.n_report)
        .map(|k| cfg.t_end * k as f64 / cfg.n_report as f64)
        .collect();
    let interval = cfg.t_end / cfg.n_report as f64;
    let mut oil_cut = Tensor::zeros(&[wells.producers.len(), cfg.n_report]);
    let pv = grid.porosity * grid.cell_volume();

    let mut log = BalanceLog {
        max_step_residual: 0.0,
        max_injector_error: 0.0,
        water_in_place: 0.0,
        injected: 0.0,
        produced: 0.0,
        min_saturation: 0.0,
        max_saturation: 0.0,
        steps: 0,
        rejected_steps: 0,
    };
    let mut dt = (cfg.t_end / 200.0).min(interval);
    let mut streak = 0;
    let mut next_report = 0;
    while next_report < cfg.n_report {
        let target = report_times[next_report];
        let remaining = target - state.t;
        let last = dt >= remaining * (1.0 - 1e-12);
        let step_dt = if last { remaining } else { dt };

        let sys = assemble_pressure(&state, grid, fluid, &q)?;
        let p = sys.solve()?;
        let flux = darcy_velocity(&sys.faces, &p);
        let out = cell_outflow(grid.cells(), &sys.faces, &flux);
        let inj_out: f64 = injector_cells.iter().map(|&c| out[c]).sum();
        log.max_injector_error = log
            .max_injector_error
            .max((inj_out - inj_rate).abs() / inj_rate.abs().max(1e-300));

        match advance_saturation(
            &state.s_w,
            &p,
            &sys.faces,
            &flux,
            &q,
            grid,
            fluid,
            step_dt,
            &cfg.newton,
        ) {
            Ok(step) => {
                let stored: f64 = step
                    .s_w
                    .iter()
                    .zip(&state.s_w)
                    .map(|(a, b)| pv * (a - b))
                    .sum();
                let net = step.injected - step.produced;
                let res = (stored - net).abs() / (step.injected + step.produced).max(1e-300);
                log.max_step_residual = log.max_step_residual.max(res);
                log.injected += step.injected;
                log.produced += step.produced;
                state.s_w = step.s_w;
                state.p = p;
                state.t = if last { target } else { state.t + step_dt };
                log.steps += 1;
                streak += 1;
                if streak >= 5 {
                    dt = (2.0 * dt).min(interval);
                    streak = 0;
                }
                if last {
                    for (w, well) in wells.producers.iter().enumerate() {
                        oil_cut.set(w, next_report, producer_oil_cut(well, &state.s_w, fluid));
                    }
                    next_report += 1;
                }
            }
            Err(Error::NotConverged { .. }) => {
                log.rejected_steps += 1;
                streak = 0;
                dt = step_dt / 2.0;
                if dt < cfg.dt_min {
                    let (lo, hi) = min_max(&state.s_w);
                    error!(
                        "time step underflow at t={} dt={dt:e}; s_w range [{lo}, {hi}], pressure range {:?}",
                        state.t,
                        min_max(&state.p)
                    );
                    return Err(Error::StepUnderflow { t: state.t, dt });
                }
            }
            Err(e) => return Err(e),
        }
    }
    let (lo, hi) = min_max(&state.s_w);
    log.min_saturation = lo;
    log.max_saturation = hi;
    log.water_in_place = state.s_w.iter().map(|s| pv * s).sum();
    let s_oil = Tensor::matrix(
        grid.ny,
        grid.nx,
        state.s_w.iter().map(|s| 1.0 - s).collect(),
    )?;
    Ok(SimOutput {
        s_oil,
        oil_cut,
        report_times,
        state,
        balance: log,
    })
}

/// Rate-weighted oil cut over the well's cells.
fn producer_oil_cut(well: &Well, s_w: &[f64], fluid: &FluidParams) -> f64 {
    well.cells
        .iter()
        .map(|&c| mobilities(s_w[c], fluid).oil_cut())
        .sum::<f64>()
        / well.cells.len() as f64
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResConfig {
    pub n: usize,
    pub n_train: usize,
    pub nx: usize,
    pub ny: usize,
    pub ir: f64,
    pub kl: KlConfig,
    pub fluid: FluidParams,
    pub sim: SimConfig,
    pub seed: u64,
}

impl Default for ResConfig {
    fn default() -> Self {
        Self {
            n: 200,
            n_train: 150,
            nx: 16,
            ny: 28,
            ir: IR,
            kl: KlConfig::default(),
            fluid: FluidParams::default(),
            sim: SimConfig::default(),
            seed: 0,
        }
    }
}

impl ResConfig {
    pub fn grid(&self) -> Result<ReservoirGrid> {
        ReservoirGrid::new(self.nx, self.ny)
    }
}

/// Simulated reservoir samples, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ResDataset {
    /// KL coefficients, `N×L`.
    pub xi: Tensor,
    /// Log-permeability fields, `N×(ny·nx)`.
    pub g: Tensor,
    /// Oil saturation at `t_end`, `N×(ny·nx)`.
    pub s: Tensor,
    /// Oil cuts, `N×(producers·n_report)`, producer-major.
    pub f: Tensor,
    pub balance: Vec<BalanceLog>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub config: ResConfig,
}

impl ResDataset {
    pub fn n_report(&self) -> usize {
        self.config.sim.n_report
    }

    /// Oil-cut columns of the first `k` producers.
    pub fn oil_cuts(&self, k: usize) -> Tensor {
        let cols: Vec<usize> = (0..k * self.n_report()).collect();
        self.f.select_cols(&cols)
    }
}

/// Per-sample RNG stream: a shared seed with the sample index as stream id.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws `cfg.n` permeability fields and simulates each one.
pub fn generate_reservoir_batch(cfg: &ResConfig) -> Result<ResDataset> {
    if cfg.n == 0 || cfg.n_train > cfg.n {
        return Err(Error::Config(format!(
            "need n ≥ 1 and n_train ≤ n, got {} and {}",
            cfg.n, cfg.n_train
        )));
    }
    let grid = cfg.grid()?;
    let basis = build_kl_basis(&grid, &cfg.kl)?;
    let wells = WellSet::standard(&grid, cfg.ir);
    let cells = grid.cells();
    let l = basis.n_modes();
    let nf = wells.producers.len() * cfg.sim.n_report;
    let (mut xi_all, mut g_all, mut s_all, mut f_all) = (
        Vec::with_capacity(cfg.n * l),
        Vec::with_capacity(cfg.n * cells),
        Vec::with_capacity(cfg.n * cells),
        Vec::with_capacity(cfg.n * nf),
    );
    let mut balance = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = sample_rng(cfg.seed, i);
        let xi: Vec<f64> = (0..l).map(|_| StandardNormal.sample(&mut rng)).collect();
        let g = kl_sample(&basis, &xi)?;
        let out = simulate(&g, cfg.kl.kappa0, &grid, &cfg.fluid, &wells, &cfg.sim)?;
        xi_all.extend(xi);
        g_all.extend_from_slice(g.data());
        s_all.extend_from_slice(out.s_oil.data());
        f_all.extend_from_slice(out.oil_cut.data());
        balance.push(out.balance);
    }
    Ok(ResDataset {
        xi: Tensor::matrix(cfg.n, l, xi_all)?,
        g: Tensor::matrix(cfg.n, cells, g_all)?,
        s: Tensor::matrix(cfg.n, cells, s_all)?,
        f: Tensor::matrix(cfg.n, nf, f_all)?,
        balance,
        train_ids: (0..cfg.n_train).collect(),
        test_ids: (cfg.n_train..cfg.n).collect(),
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResMeta {
    config: ResConfig,
    grid: ReservoirGrid,
    wells: WellSet,
    kl_eigenvalues: Vec<f64>,
    train_ids: Vec<usize>,
    test_ids: Vec<usize>,
    field_shape: [usize; 2],
}

const BALANCE_COLUMNS: [&str; 9] = [
    "max_step_residual",
    "max_injector_error",
    "water_in_place",
    "injected",
    "produced",
    "min_saturation",
    "max_saturation",
    "steps",
    "rejected_steps",
];

/// Writes `res_xi`, `res_g`, `res_s` and `res_f` with shared metadata.
pub fn save_res_dataset(dir: &Path, ds: &ResDataset) -> Result<()> {
    let grid = ds.config.grid()?;
    let basis = build_kl_basis(&grid, &ds.config.kl)?;
    let meta = serde_json::to_value(ResMeta {
        config: ds.config.clone(),
        grid,
        wells: WellSet::standard(&grid, ds.config.ir),
        kl_eigenvalues: basis.eigenvalues,
        train_ids: ds.train_ids.clone(),
        test_ids: ds.test_ids.clone(),
        field_shape: [grid.ny, grid.nx],
    })?;
    save_array(dir, "res_xi", &ds.xi, &[], meta.clone())?;
    save_array(dir, "res_g", &ds.g, &[], meta.clone())?;
    save_array(dir, "res_s", &ds.s, &[], meta.clone())?;
    save_array(dir, "res_f", &ds.f, &[], meta)?;
    let rows: Vec<f64> = ds
        .balance
        .iter()
        .flat_map(|b| {
            [
                b.max_step_residual,
                b.max_injector_error,
                b.water_in_place,
                b.injected,
                b.produced,
                b.min_saturation,
                b.max_saturation,
                b.steps as f64,
                b.rejected_steps as f64,
            ]
        })
        .collect();
    save_array(
        dir,
        "res_balance",
        &Tensor::matrix(ds.balance.len(), BALANCE_COLUMNS.len(), rows)?,
        &BALANCE_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>(),
        serde_json::Value::Null,
    )?;
    Ok(())
}

pub fn load_res_dataset(dir: &Path) -> Result<ResDataset> {
    let (xi, side) = load_array(dir, "res_xi")?;
    let (g, _) = load_array(dir, "res_g")?;
    let (s, _) = load_array(dir, "res_s")?;
    let (f, _) = load_array(dir, "res_f")?;
    let (bal, _) = load_array(dir, "res_balance")?;
    let meta: ResMeta = serde_json::from_value(side.meta)?;
    let n = xi.rows();
    let cells = meta.grid.cells();
    if g.rows() != n || s.rows() != n || f.rows() != n || g.cols() != cells || s.cols() != cells {
        return Err(Error::Artifact {
            path: dir.join("res_g.json"),
            reason: format!(
                "expected {n}×{cells} fields, found G {:?} and S {:?}",
                g.shape(),
                s.shape()
            ),
        });
    }
    let balance = bal
        .rows_iter()
        .map(|r| BalanceLog {
            max_step_residual: r[0],
            max_injector_error: r[1],
            water_in_place: r[2],
            injected: r[3],
            produced: r[4],
            min_saturation: r[5],
            max_saturation: r[6],
            steps: r[7] as usize,
            rejected_steps: r[8] as usize,
        })
        .collect();
    Ok(ResDataset {
        xi,
        g,
        s,
        f,
        balance,
        train_ids: meta.train_ids,
        test_ids: meta.test_ids,
        config: meta.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fluid() -> FluidParams {
        FluidParams::default()
    }

    #[test]
    fn mobility_endpoints() {
        let m = mobilities(0.2, &fluid());
        assert_eq!(m.water, 0.0);
        assert!((m.oil - 1.0 / 0.003).abs() < 1e-9);
        assert_eq!(m.frac, 0.0);
        let m = mobilities(0.8, &fluid());
        assert_eq!(m.oil, 0.0);
        assert_eq!(m.frac, 1.0);
        for i in 0..=100 {
            let m = mobilities(i as f64 / 100.0, &fluid());
            assert!((m.frac + m.oil_cut() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn frac_derivative_matches_differences() {
        let f = fluid();
        for s in [0.25, 0.4, 0.55, 0.7, 0.79] {
            let h = 1e-6;
            let fd = (mobilities(s + h, &f).frac - mobilities(s - h, &f).frac) / (2.0 * h);
            assert!((fd - frac_derivative(s, &f)).abs() < 1e-6 * fd.abs().max(1.0));
        }
        assert_eq!(frac_derivative(0.1, &f), 0.0);
    }

    #[test]
    fn standard_wells_balance_and_placement() {
        let grid = ReservoirGrid::desk();
        let w = WellSet::standard(&grid, IR);
        assert!(w.net_rate().abs() < 1e-14);
        assert_eq!(w.injectors[0].cells, vec![0]);
        assert_eq!(w.injectors[1].cells, vec![grid.nx - 1]);
        // 0.5·Lx lies between the two middle columns
        assert_eq!(w.producers[2].cells.len(), 2);
        let q = w.sources(&grid).unwrap();
        assert!(q.iter().sum::<f64>().abs() < 1e-12);
        for c in 0..grid.cells() {
            assert!((q[c] - q[grid.mirror(c)]).abs() < 1e-15);
        }
    }

    fn small_basis() -> KLBasis {
        let grid = ReservoirGrid::new(6, 8).unwrap();
        build_kl_basis(&grid, &KlConfig::default()).unwrap()
    }

    #[test]
    fn kl_basis_properties() {
        let b = small_basis();
        assert!(b.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(b.eigenvalues.iter().all(|&l| l >= 0.0));
        let n = b.grid.cells() as f64;
        assert!((b.total_variance - n).abs() < 1e-6 * n);
        let m = &b.modes;
        for i in 0..m.rows() {
            for j in 0..m.rows() {
                let d: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn kl_sample_is_affine() {
        let b = small_basis();
        let zero = kl_sample(&b, &[0.0; 20]).unwrap();
        assert_eq!(zero, b.mean);
        let mut rng = sample_rng(3, 0);
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let lhs = kl_sample(&b, &x)
            .unwrap()
            .add(&kl_sample(&b, &y).unwrap())
            .unwrap()
            .sub(&b.mean)
            .unwrap();
        let rhs = kl_sample(&b, &xy).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
        assert!(kl_sample(&b, &[0.0; 3]).is_err());
    }

    #[test]
    fn kl_field_variance_monte_carlo() {
        let b = small_basis();
        let n = b.grid.cells();
        let draws = 10_000;
        let mut rng = sample_rng(9, 0);
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for _ in 0..draws {
            let xi: Vec<f64> = (0..20).map(|_| StandardNormal.sample(&mut rng)).collect();
            let g = kl_sample(&b, &xi).unwrap();
            for (c, v) in g.data().iter().enumerate() {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let s2 = (b.config.gamma * b.config.sigma).powi(2);
        for c in 0..n {
            let mean = sum[c] / draws as f64;
            let var = sq[c] / draws as f64 - mean * mean;
            let want: f64 = s2
                * (0..20)
                    .map(|i| b.eigenvalues[i] * b.modes.get(i, c).powi(2))
                    .sum::<f64>();
            assert!((var - want).abs() < 0.1 * want, "cell {c}: {var} vs {want}");
        }
    }

    fn uniform_state(grid: &ReservoirGrid, k: f64) -> ReservoirState {
        ReservoirState::initial(vec![k; grid.cells()])
    }

    #[test]
    fn pressure_without_sources_is_zero() {
        let grid = ReservoirGrid::new(5, 7).unwrap();
        let st = uniform_state(&grid, 2.0);
        let sys = assemble_pressure(&st, &grid, &fluid(), &vec![0.0; grid.cells()]).unwrap();
        assert!(sys.solve().unwrap().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn tpfa_matrix_structure() {
        let grid = ReservoirGrid::new(5, 6).unwrap();
        let mut st = uniform_state(&grid, 1.0);
        let mut rng = sample_rng(1, 0);
        st.k.iter_mut()
            .for_each(|k| *k = rng.random_range(0.1..3.0));
        st.s_w
            .iter_mut()
            .for_each(|s| *s = rng.random_range(0.0..0.8));
        let sys = assemble_pressure(&st, &grid, &fluid(), &vec![0.0; grid.cells()]).unwrap();
        let a = sys.matrix();
        let n = grid.cells();
        for i in 0..n {
            let row: f64 = a.row(i).iter().sum();
            assert!(row.abs() < 1e-10 * a.get(i, i));
            for j in 0..n {
                assert_eq!(a.get(i, j), a.get(j, i));
                if i != j {
                    assert!(a.get(i, j) <= 0.0);
                }
            }
        }
    }

    /// Injection along the south row and production along the north row
    /// makes every column carry the same flux, so the pressure drop across
    /// each row interface is `q_col / T`.
    #[test]
    fn series_resistance_column() {
        let grid = ReservoirGrid::new(4, 9).unwrap();
        let f = fluid();
        let mut st = uniform_state(&grid, 1.0);
        let row_k: Vec<f64> = (0..grid.ny).map(|r| 0.5 + 0.3 * r as f64).collect();
        for c in 0..grid.cells() {
            st.k[c] = row_k[c / grid.nx];
        }
        let rate = 3.0;
        let mut q = vec![0.0; grid.cells()];
        for ix in 0..grid.nx {
            q[grid.index(ix, 0)] = rate / grid.nx as f64;
            q[grid.index(ix, grid.ny - 1)] = -rate / grid.nx as f64;
        }
        let p = assemble_pressure(&st, &grid, &f, &q)
            .unwrap()
            .solve()
            .unwrap();
        let lam = mobilities(0.0, &f).total();
        let q_col = rate / grid.nx as f64;
        let mut want = vec![0.0; grid.ny];
        for r in 1..grid.ny {
            let t = grid.dx() / grid.dy() * harmonic(row_k[r - 1] * lam, row_k[r] * lam);
            want[r] = want[r - 1] - q_col / t;
        }
        for c in 0..grid.cells() {
            let r = c / grid.nx;
            assert!(
                (p[c] - want[r]).abs() < 1e-8 * want[grid.ny - 1].abs(),
                "cell {c}: {} vs {}",
                p[c],
                want[r]
            );
        }
    }

    #[test]
    fn velocities_conserve_mass() {
        let grid = ReservoirGrid::desk();
        let basis = build_kl_basis(&grid, &KlConfig::default()).unwrap();
        let mut rng = sample_rng(2, 0);
        let xi: Vec<f64> = (0..20).map(|_| StandardNormal.sample(&mut rng)).collect();
        let st = ReservoirState::initial(permeability(&kl_sample(&basis, &xi).unwrap(), 1e-12));
        let wells = WellSet::standard(&grid, IR);
        let q = wells.sources(&grid).unwrap();
        let sys = assemble_pressure(&st, &grid, &fluid(), &q).unwrap();
        let p = sys.solve().unwrap();
        let flux = darcy_velocity(&sys.faces, &p);
        let out = cell_outflow(grid.cells(), &sys.faces, &flux);
        for c in 0..grid.cells() {
            assert!(
                (out[c] - q[c]).abs() < 1e-10 * IR,
                "cell {c}: {} vs {}",
                out[c],
                q[c]
            );
        }
        let inj: f64 = wells
            .injectors
            .iter()
            .flat_map(|w| &w.cells)
            .map(|&c| out[c])
            .sum();
        assert!((inj - IR).abs() < 1e-8 * IR);
        let constant = darcy_velocity(&sys.faces, &vec![4.0; grid.cells()]);
        assert!(constant.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn still_fluid_keeps_saturation() {
        let grid = ReservoirGrid::new(4, 4).unwrap();
        let st = uniform_state(&grid, 1.0);
        let sys = assemble_pressure(&st, &grid, &fluid(), &[0.0; 16]).unwrap();
        let s0: Vec<f64> = (0..16).map(|i| 0.05 * i as f64 % 0.8).collect();
        let zero = vec![0.0; sys.faces.len()];
        let step = advance_saturation(
            &s0,
            &[0.0; 16],
            &sys.faces,
            &zero,
            &[0.0; 16],
            &grid,
            &fluid(),
            1.0,
            &NewtonConfig::default(),
        )
        .unwrap();
        assert_eq!(step.s_w, s0);
    }

    #[test]
    fn cell_mass_balance() {
        let grid = ReservoirGrid::desk();
        let f = fluid();
        let wells = WellSet::standard(&grid, IR);
        let q = wells.sources(&grid).unwrap();
        let mut st = uniform_state(&grid, 1.0);
        let mut rng = sample_rng(5, 0);
        st.s_w
            .iter_mut()
            .for_each(|s| *s = rng.random_range(0.0..0.8));
        let sys = assemble_pressure(&st, &grid, &f, &q).unwrap();
        let p = sys.solve().unwrap();
        let flux = darcy_velocity(&sys.faces, &p);
        let dt = 0.4;
        let step = advance_saturation(
            &st.s_w,
            &p,
            &sys.faces,
            &flux,
            &q,
            &grid,
            &f,
            dt,
            &NewtonConfig::default(),
        )
        .unwrap();
        let s = &step.s_w;
        let pv = grid.porosity * grid.cell_volume();
        let mut net = vec![0.0; grid.cells()];
        for (fc, &v) in sys.faces.iter().zip(&flux) {
            // upwind fractional flow carried across the face
            let up = if v > 0.0 { fc.a } else { fc.b };
            let w = v * mobilities(s[up], &f).frac;
            net[fc.a] -= w;
            net[fc.b] += w;
        }
        for c in 0..grid.cells() {
            let src = q[c].max(0.0) + q[c].min(0.0) * mobilities(s[c], &f).frac;
            let lhs = pv * (s[c] - st.s_w[c]);
            let rhs = dt * (net[c] + src);
            assert!((lhs - rhs).abs() < 1e-10, "cell {c}: {lhs} vs {rhs}");
            assert!((0.0..=0.8).contains(&s[c]));
        }
    }

    fn column_run(ny: usize, t_end: f64) -> Vec<f64> {
        let grid = ReservoirGrid::new(4, ny).unwrap();
        let mut wells = WellSet {
            injectors: vec![],
            producers: vec![],
        };
        for ix in 0..grid.nx {
            wells.injectors.push(Well {
                name: format!("I{ix}"),
                rate: 1.0,
                cells: vec![grid.index(ix, 0)],
            });
            wells.producers.push(Well {
                name: format!("P{ix}"),
                rate: -1.0,
                cells: vec![grid.index(ix, ny - 1)],
            });
        }
        let g = Tensor::zeros(&[ny, grid.nx]);
        let cfg = SimConfig {
            t_end,
            n_report: 10,
            ..SimConfig::default()
        };
        let out = simulate(&g, 0.0, &grid, &fluid(), &wells, &cfg).unwrap();
        (0..ny).map(|r| out.state.s_w[grid.index(0, r)]).collect()
    }

    #[test]
    fn buckley_leverett_front() {
        let coarse = column_run(20, 25.0);
        assert!(
            coarse.windows(2).all(|w| w[0] >= w[1] - 1e-12),
            "{coarse:?}"
        );
        assert!(coarse.iter().all(|&s| (0.0..=0.8).contains(&s)));
        assert!(coarse[0] > 0.5 && coarse[19] < 0.2);

        // self-convergence of the column profile under refinement
        let mid = column_run(40, 25.0);
        let fine = column_run(80, 25.0);
        let avg = |v: &[f64], k: usize| -> Vec<f64> {
            v.chunks(k)
                .map(|c| c.iter().sum::<f64>() / k as f64)
                .collect()
        };
        let e1: f64 = coarse
            .iter()
            .zip(avg(&mid, 2))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 20.0;
        let e2: f64 = avg(&mid, 2)
            .iter()
            .zip(avg(&fine, 4))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 20.0;
        assert!(e2 < e1, "{e1} then {e2}");
    }

    fn desk_run(g: &Tensor, t_end: f64) -> SimOutput {
        let grid = ReservoirGrid::desk();
        let cfg = SimConfig {
            t_end,
            ..SimConfig::default()
        };
        simulate(
            g,
            1e-12,
            &grid,
            &fluid(),
            &WellSet::standard(&grid, IR),
            &cfg,
        )
        .unwrap()
    }

    #[test]
    fn homogeneous_run_is_mirror_symmetric() {
        let grid = ReservoirGrid::desk();
        let out = desk_run(&Tensor::zeros(&[grid.ny, grid.nx]), 15.0);
        let s = out.s_oil.data();
        let err = (0..grid.cells())
            .map(|c| (s[c] - s[grid.mirror(c)]).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        for t in 0..out.oil_cut.cols() {
            assert!((out.oil_cut.get(0, t) - out.oil_cut.get(4, t)).abs() < 1e-6);
            assert!((out.oil_cut.get(1, t) - out.oil_cut.get(3, t)).abs() < 1e-6);
        }
    }

    #[test]
    fn random_field_run_balances() {
        let grid = ReservoirGrid::desk();
        let basis = build_kl_basis(&grid, &KlConfig::default()).unwrap();
        let mut rng = sample_rng(8, 0);
        let xi: Vec<f64> = (0..20).map(|_| StandardNormal.sample(&mut rng)).collect();
        let out = desk_run(&kl_sample(&basis, &xi).unwrap(), 15.0);
        let b = out.balance;
        assert!(b.max_step_residual < 1e-8, "{b:?}");
        assert!(b.cumulative_residual() < 1e-6, "{b:?}");
        assert!(b.max_injector_error < 1e-8);
        assert!(b.min_saturation >= 0.0 && b.max_saturation <= 0.8);
        assert!((0..5).all(|w| out.oil_cut.get(w, 0) == 1.0));
        assert_eq!(out.oil_cut.cols(), 100);
        // water reaches at least one producer by the end
        assert!((0..5).any(|w| out.oil_cut.get(w, 99) < 1.0));
    }

    #[test]
    fn batch_round_trip() {
        let cfg = ResConfig {
            n: 3,
            n_train: 2,
            nx: 6,
            ny: 8,
            sim: SimConfig {
                t_end: 5.0,
                n_report: 10,
                ..SimConfig::default()
            },
            ..ResConfig::default()
        };
        let ds = generate_reservoir_batch(&cfg).unwrap();
        assert_eq!(ds.f.cols(), 50);
        assert_eq!(ds.oil_cuts(1).cols(), 10);
        let again = generate_reservoir_batch(&cfg).unwrap();
        assert_eq!(ds, again);
        let dir = tempfile::tempdir().unwrap();
        save_res_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_res_dataset(dir.path()).unwrap(), ds);
    }
}
