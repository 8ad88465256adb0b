//! Kraichnan–Orszag three-mode system: integration, prior and dataset.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_array, save_array};
use crate::normalize::MinMax;
use crate::tensor::Tensor;

pub const XI1_RANGE: (f64, f64) = (-0.1, 0.1);
pub const XI2_RANGE: (f64, f64) = (-1.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KOParams {
    pub dt: f64,
    pub t_end: f64,
    pub xi: [f64; 2],
}

impl Default for KOParams {
    fn default() -> Self {
        Self {
            dt: 0.003,
            t_end: 30.0,
            xi: [0.0, 0.0],
        }
    }
}

impl KOParams {
    pub fn with_xi(xi1: f64, xi2: f64) -> Self {
        Self {
            xi: [xi1, xi2],
            ..Self::default()
        }
    }

    /// Number of stored states, `floor(t_end/dt) + 1`.
    pub fn trajectory_len(&self) -> usize {
        // guard against 30/0.003 = 9999.999…
        ((self.t_end / self.dt) * (1.0 + 1e-12)).floor() as usize + 1
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.t_end > 0.0 && self.t_end.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "dt and t_end must be positive, got dt={} t_end={}",
                self.dt, self.t_end
            )));
        }
        if !self.xi.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("initial condition".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KOTrajectory {
    pub times: Vec<f64>,
    /// `T×3` states `(y₁, y₂, y₃)`.
    pub y: Tensor,
}

impl KOTrajectory {
    pub fn y1(&self) -> Vec<f64> {
        (0..self.y.rows()).map(|i| self.y.get(i, 0)).collect()
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("non-empty trajectory")
    }
}

#[inline]
pub fn ko_rhs(y: [f64; 3]) -> [f64; 3] {
    [y[0] * y[2], -y[1] * y[2], -y[0] * y[0] + y[1] * y[1]]
}

#[inline]
fn axpy(y: [f64; 3], h: f64, k: [f64; 3]) -> [f64; 3] {
    [y[0] + h * k[0], y[1] + h * k[1], y[2] + h * k[2]]
}

/// Classical fixed-step RK4 from `y(0) = (1, ξ₁, ξ₂)`.
pub fn rk4_solve(params: &KOParams) -> Result<KOTrajectory> {
    params.validate()?;
    let n = params.trajectory_len();
    let h = params.dt;
    let mut y = [1.0, params.xi[0], params.xi[1]];
    let mut data = Vec::with_capacity(n * 3);
    data.extend_from_slice(&y);
    for step in 1..n {
        let k1 = ko_rhs(y);
        let k2 = ko_rhs(axpy(y, 0.5 * h, k1));
        let k3 = ko_rhs(axpy(y, 0.5 * h, k2));
        let k4 = ko_rhs(axpy(y, h, k3));
        for i in 0..3 {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Integration {
                step,
                reason: "non-finite state".into(),
            });
        }
        data.extend_from_slice(&y);
    }
    Ok(KOTrajectory {
        times: (0..n).map(|i| i as f64 * h).collect(),
        y: Tensor::matrix(n, 3, data)?,
    })
}

/// `n` draws of `(ξ₁, ξ₂)` from the uniform prior box.
pub fn sample_prior<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "prior sample size must be positive".into(),
        ));
    }
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        data.push(rng.random_range(XI1_RANGE.0..=XI1_RANGE.1));
        data.push(rng.random_range(XI2_RANGE.0..=XI2_RANGE.1));
    }
    Tensor::matrix(n, 2, data)
}

/// Piecewise-linear interpolation of `values` (on `times`, increasing) at `t`,
/// clamped to the end values.
pub fn interp(times: &[f64], values: &[f64], t: f64) -> f64 {
    let last = times.len() - 1;
    if t <= times[0] {
        return values[0];
    }
    if t >= times[last] {
        return values[last];
    }
    let i = times.partition_point(|&s| s <= t) - 1;
    let (t0, t1) = (times[i], times[i + 1]);
    let w = (t - t0) / (t1 - t0);
    values[i] + w * (values[i + 1] - values[i])
}

/// `m` equally spaced times on `[t0, t1]`, endpoints included.
pub fn uniform_grid(t0: f64, t1: f64, m: usize) -> Vec<f64> {
    (0..m)
        .map(|i| t0 + (t1 - t0) * i as f64 / (m - 1) as f64)
        .collect()
}

/// Linear resampling of `y₁` onto `m` equally spaced times over the trajectory span.
pub fn resample_y1(traj: &KOTrajectory, m: usize) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "resample length must be at least 2, got {m}"
        )));
    }
    let y1 = traj.y1();
    if m == y1.len() {
        return Ok(y1);
    }
    let grid = uniform_grid(traj.times[0], traj.t_end(), m);
    Ok(grid.iter().map(|&t| interp(&traj.times, &y1, t)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KoConfig {
    pub n: usize,
    pub n_train: usize,
    pub dt: f64,
    pub t_end: f64,
    pub resample: usize,
    pub seed: u64,
}

impl Default for KoConfig {
    fn default() -> Self {
        Self {
            n: 2048,
            n_train: 1536,
            dt: 0.003,
            t_end: 30.0,
            resample: 256,
            seed: 0,
        }
    }
}

impl KoConfig {
    /// Sampling rate implied by the resampled length.
    pub fn sampling_rate(&self) -> f64 {
        (self.resample - 1) as f64 / self.t_end
    }
}

/// Simulated `(ξ, y₁)` pairs, normalized with bounds from the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct KoDataset {
    pub xi: Tensor,
    pub y1: Tensor,
    pub xi_norm: MinMax,
    pub y1_norm: MinMax,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub config: KoConfig,
}

impl KoDataset {
    pub fn xi_raw(&self) -> Result<Tensor> {
        self.xi_norm.invert(&self.xi)
    }

    pub fn y1_raw(&self) -> Result<Tensor> {
        self.y1_norm.invert(&self.y1)
    }

    pub fn train(&self) -> (Tensor, Tensor) {
        (
            self.xi.select_rows(&self.train_ids),
            self.y1.select_rows(&self.train_ids),
        )
    }

    pub fn test(&self) -> (Tensor, Tensor) {
        (
            self.xi.select_rows(&self.test_ids),
            self.y1.select_rows(&self.test_ids),
        )
    }
}

/// Simulates `cfg.n` trajectories with priors drawn from `rng`. The first
/// `n_train` rows form the training split.
pub fn build_ko_dataset<R: Rng + ?Sized>(cfg: &KoConfig, rng: &mut R) -> Result<KoDataset> {
    if cfg.n == 0 || cfg.n_train == 0 || cfg.n_train > cfg.n {
        return Err(Error::Config(format!(
            "need 0 < n_train ≤ n, got n={} n_train={}",
            cfg.n, cfg.n_train
        )));
    }
    let xi = sample_prior(cfg.n, rng)?;
    let mut y1 = Vec::with_capacity(cfg.n * cfg.resample);
    for r in xi.rows_iter() {
        let traj = rk4_solve(&KOParams {
            dt: cfg.dt,
            t_end: cfg.t_end,
            xi: [r[0], r[1]],
        })?;
        y1.extend(resample_y1(&traj, cfg.resample)?);
    }
    let y1 = Tensor::matrix(cfg.n, cfg.resample, y1)?;
    let train_ids: Vec<usize> = (0..cfg.n_train).collect();
    let test_ids: Vec<usize> = (cfg.n_train..cfg.n).collect();
    let xi_norm = MinMax::fit(&xi.select_rows(&train_ids))?;
    let y1_norm = MinMax::fit(&y1.select_rows(&train_ids))?;
    Ok(KoDataset {
        xi: xi_norm.apply(&xi)?,
        y1: y1_norm.apply(&y1)?,
        xi_norm,
        y1_norm,
        train_ids,
        test_ids,
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KoMeta {
    normalization: MinMax,
    seed: u64,
    dt: f64,
    t_end: f64,
    sampling_rate_hz: f64,
    train_ids: Vec<usize>,
    test_ids: Vec<usize>,
    config: KoConfig,
}

/// Writes `ko_xi` and `ko_y1` (normalized) with their sidecars.
pub fn save_ko_dataset(dir: &Path, ds: &KoDataset) -> Result<()> {
    let meta = |norm: &MinMax| -> Result<serde_json::Value> {
        Ok(serde_json::to_value(KoMeta {
            normalization: norm.clone(),
            seed: ds.config.seed,
            dt: ds.config.dt,
            t_end: ds.config.t_end,
            sampling_rate_hz: ds.config.sampling_rate(),
            train_ids: ds.train_ids.clone(),
            test_ids: ds.test_ids.clone(),
            config: ds.config.clone(),
        })?)
    };
    save_array(
        dir,
        "ko_xi",
        &ds.xi,
        &["xi1".into(), "xi2".into()],
        meta(&ds.xi_norm)?,
    )?;
    let cols: Vec<String> = (0..ds.y1.cols()).map(|i| format!("y1_{i}")).collect();
    save_array(dir, "ko_y1", &ds.y1, &cols, meta(&ds.y1_norm)?)?;
    Ok(())
}

pub fn load_ko_dataset(dir: &Path) -> Result<KoDataset> {
    let (xi, xs) = load_array(dir, "ko_xi")?;
    let (y1, ys) = load_array(dir, "ko_y1")?;
    let xm: KoMeta = serde_json::from_value(xs.meta)?;
    let ym: KoMeta = serde_json::from_value(ys.meta)?;
    if xi.cols() != 2 || xi.rows() != y1.rows() || y1.cols() != ym.normalization.dim() {
        return Err(Error::Artifact {
            path: dir.join("ko_y1.json"),
            reason: format!(
                "expected n×2 ξ and n×{} y₁, found {:?} and {:?}",
                ym.normalization.dim(),
                xi.shape(),
                y1.shape()
            ),
        });
    }
    Ok(KoDataset {
        xi,
        y1,
        xi_norm: xm.normalization,
        y1_norm: ym.normalization,
        train_ids: xm.train_ids,
        test_ids: xm.test_ids,
        config: xm.config,
    })
}
