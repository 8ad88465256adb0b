//! Entropy-regularized optimal transport between weighted point clouds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostSpec {
    L1,
    L2,
    #[default]
    HalfSqL2,
}

impl CostSpec {
    #[inline]
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            CostSpec::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            CostSpec::L2 => sq_dist(a, b).sqrt(),
            CostSpec::HalfSqL2 => 0.5 * sq_dist(a, b),
        }
    }

    /// Adds `w · ∇_b c(a, b)` to `out`. Non-smooth points use the zero subgradient.
    #[inline]
    pub fn add_grad_second(self, a: &[f64], b: &[f64], w: f64, out: &mut [f64]) {
        match self {
            CostSpec::L1 => {
                for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                    let d = y - x;
                    if d != 0.0 {
                        *o += w * d.signum();
                    }
                }
            }
            CostSpec::L2 => {
                let n = sq_dist(a, b).sqrt();
                if n > 0.0 {
                    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                        *o += w * (y - x) / n;
                    }
                }
            }
            CostSpec::HalfSqL2 => {
                for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                    *o += w * (y - x);
                }
            }
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Solver settings. `scaling` in (0, 1) anneals the regularization from the
/// largest cost down to `rho` geometrically, warm-starting each stage; 0
/// solves at `rho` directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub rho: f64,
    pub max_iters: usize,
    pub stop_tol: f64,
    pub cost: CostSpec,
    pub scaling: f64,
    /// Over-relaxation factor ω ∈ [1, 2) for the two-sided sweeps; 1 is plain Sinkhorn.
    pub relaxation: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            rho: 0.05,
            max_iters: 500,
            stop_tol: 1e-6,
            cost: CostSpec::HalfSqL2,
            scaling: 0.0,
            relaxation: 1.0,
        }
    }
}

impl SinkhornConfig {
    pub fn with_rho(rho: f64) -> Self {
        Self {
            rho,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if !(self.stop_tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "stop_tol must be positive, got {}",
                self.stop_tol
            )));
        }
        if !(0.0..1.0).contains(&self.scaling) {
            return Err(Error::InvalidArgument(format!(
                "scaling must lie in [0, 1), got {}",
                self.scaling
            )));
        }
        if !(1.0..2.0).contains(&self.relaxation) {
            return Err(Error::InvalidArgument(format!(
                "relaxation must lie in [1, 2), got {}",
                self.relaxation
            )));
        }
        Ok(())
    }
}

/// Dual variables of one regularized transport problem.
///
/// The implied plan is `P_jk = a_j b_k exp((α_j + β_k − C_jk)/ρ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    /// Sup-norm potential change of the last sweep, in units of ρ.
    pub last_update: f64,
    pub converged: bool,
}

impl DualPotentials {
    pub fn plan(&self, a: &[f64], b: &[f64], c: &Tensor) -> Tensor {
        let m = b.len();
        let mut p = vec![0.0; a.len() * m];
        for (j, row) in p.chunks_mut(m).enumerate() {
            if a[j] == 0.0 {
                continue;
            }
            let cj = c.row(j);
            for k in 0..m {
                if b[k] > 0.0 {
                    row[k] =
                        a[j] * b[k] * ((self.alpha[j] + self.beta[k] - cj[k]) / self.rho).exp();
                }
            }
        }
        Tensor::matrix(a.len(), m, p).expect("plan shape")
    }

    /// `⟨a, α⟩ + ⟨b, β⟩ − ρ (Σ P − 1)`.
    pub fn dual_value(&self, a: &[f64], b: &[f64], c: &Tensor) -> f64 {
        let mass = self.plan(a, b, c).sum();
        dot(a, &self.alpha) + dot(b, &self.beta) - self.rho * (mass - 1.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cost_matrix(x: &Tensor, y: &Tensor, cost: CostSpec) -> Result<Tensor> {
    if x.cols() != y.cols() {
        return Err(Error::shape("cost_matrix", x.cols(), y.cols()));
    }
    let (n, m) = (x.rows(), y.rows());
    let mut c = Vec::with_capacity(n * m);
    for xi in x.rows_iter().take(n) {
        for yk in y.rows_iter().take(m) {
            c.push(cost.eval(xi, yk));
        }
    }
    Tensor::matrix(n, m, c)
}

fn check_weights(w: &[f64], what: &str) -> Result<()> {
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{what} weights must be finite and nonnegative"
        )));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "{what} weights sum to {s}, expected 1"
        )));
    }
    Ok(())
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// `−ρ log Σ_k exp(log_w_k + (pot_k − c_k)/ρ)` evaluated stably.
#[inline]
fn soft_min(
    c: impl Iterator<Item = f64>,
    pot: &[f64],
    log_w: &[f64],
    rho: f64,
    buf: &mut [f64],
) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for ((z, ck), (p, lw)) in buf.iter_mut().zip(c).zip(pot.iter().zip(log_w)) {
        *z = lw + (p - ck) / rho;
        mx = mx.max(*z);
    }
    let s: f64 = buf.iter().map(|z| (z - mx).exp()).sum();
    -rho * (mx + s.ln())
}

fn stage_schedule(cfg: &SinkhornConfig, c: &Tensor) -> Vec<f64> {
    let mut stages = Vec::new();
    if cfg.scaling > 0.0 {
        let mut r = c.max_abs();
        while r > cfg.rho {
            stages.push(r);
            r *= cfg.scaling;
        }
    }
    stages.push(cfg.rho);
    stages
}

/// Annealing stages only need a rough warm start for the next one.
fn stage_tol(cfg: &SinkhornConfig, last: bool) -> f64 {
    if last {
        cfg.stop_tol
    } else {
        cfg.stop_tol.max(STAGE_TOL)
    }
}

const STAGE_TOL: f64 = 1e-2;

/// Newton refinement is only attempted on problems this small (dense solve).
const NEWTON_MAX_ATOMS: usize = 512;
const NEWTON_MAX_STEPS: usize = 30;

struct Polish {
    steps: usize,
    residual: f64,
    converged: bool,
}

/// Newton ascent on the semi-dual `F(α) = ⟨a, α⟩ + ⟨b, αᶜ⟩`, used when the
/// sweeps stall. Sinkhorn contracts slowly along directions that move mass
/// between weakly coupled clusters; Newton resolves those in a few steps.
/// On exit `β` is the exact c-transform of `α`, and `residual` is the
/// largest relative row-marginal error.
#[allow(clippy::too_many_arguments)]
fn newton_polish(
    cs: &Tensor,
    ct: &Tensor,
    a: &[f64],
    la: &[f64],
    lb: &[f64],
    rho: f64,
    tol: f64,
    alpha: &mut [f64],
    beta: &mut [f64],
) -> Polish {
    let (n, m) = (alpha.len(), beta.len());
    let mut buf = vec![0.0; n.max(m)];
    let c_transform = |alpha: &[f64], beta: &mut [f64], buf: &mut [f64]| {
        for k in 0..m {
            beta[k] = soft_min(ct.row(k).iter().copied(), alpha, la, rho, &mut buf[..n]);
        }
    };
    let semi_dual = |alpha: &[f64], beta: &[f64]| -> f64 {
        dot(a, alpha) + lb.iter().zip(beta).map(|(l, b)| l.exp() * b).sum::<f64>()
    };
    // Row sums of the plan, given β = αᶜ.
    let plan = |alpha: &[f64], beta: &[f64]| -> Vec<f64> {
        let mut p = vec![0.0; n * m];
        for j in 0..n {
            let cj = cs.row(j);
            for k in 0..m {
                p[j * m + k] = (la[j] + lb[k] + (alpha[j] + beta[k] - cj[k]) / rho).exp();
            }
        }
        p
    };

    c_transform(alpha, beta, &mut buf);
    let mut value = semi_dual(alpha, beta);
    let mut out = Polish {
        steps: 0,
        residual: f64::INFINITY,
        converged: false,
    };
    for _ in 0..NEWTON_MAX_STEPS {
        let p = plan(alpha, beta);
        let r: Vec<f64> = p.chunks(m).map(|row| row.iter().sum()).collect();
        let g: Vec<f64> = a.iter().zip(&r).map(|(a, r)| a - r).collect();
        out.residual = g
            .iter()
            .zip(a)
            .fold(0.0_f64, |acc, (g, a)| acc.max(g.abs() / a));
        if out.residual < tol {
            out.converged = true;
            break;
        }
        // −∇²F = (diag(r) − P diag(b)⁻¹ Pᵀ)/ρ, singular along 1; g ⟂ 1 so
        // adding a multiple of 11ᵀ fixes the gauge without changing the step.
        let mut h = nalgebra::DMatrix::<f64>::zeros(n, n);
        let inv_b: Vec<f64> = lb.iter().map(|l| (-l).exp()).collect();
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..m).map(|k| p[i * m + k] * p[j * m + k] * inv_b[k]).sum();
                let v = -s / rho;
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
            h[(i, i)] += r[i] / rho;
        }
        let gauge = h.trace() / (n * n) as f64;
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] += gauge;
            }
        }
        // Underflowed couplings can leave blocks numerically singular.
        let scale = h.trace() / n as f64;
        let Some(chol) = [1e-14, 1e-11, 1e-8, 1e-5].iter().find_map(|&eps| {
            let mut hr = h.clone();
            for i in 0..n {
                hr[(i, i)] += eps * scale;
            }
            nalgebra::linalg::Cholesky::new(hr)
        }) else {
            break;
        };
        let step = chol.solve(&nalgebra::DVector::from_column_slice(&g));
        let slope: f64 = step.iter().zip(&g).map(|(d, g)| d * g).sum();
        let mut t = 1.0;
        let mut trial = alpha.to_vec();
        let mut trial_beta = beta.to_vec();
        let accepted = loop {
            for (x, (a0, d)) in trial.iter_mut().zip(alpha.iter().zip(step.iter())) {
                *x = a0 + t * d;
            }
            c_transform(&trial, &mut trial_beta, &mut buf);
            let v = semi_dual(&trial, &trial_beta);
            if v >= value + 1e-4 * t * slope {
                value = v;
                break true;
            }
            t *= 0.5;
            if t < 1e-10 {
                break false;
            }
        };
        out.steps += 1;
        if !accepted {
            break;
        }
        alpha.copy_from_slice(&trial);
        beta.copy_from_slice(&trial_beta);
    }
    out
}

/// Log-domain Sinkhorn–Knopp. Atoms with zero weight are excluded from
/// the solve; their potentials are filled in by the matching c-transform.
pub fn sinkhorn_potentials(
    a: &[f64],
    b: &[f64],
    c: &Tensor,
    cfg: &SinkhornConfig,
) -> Result<DualPotentials> {
    cfg.validate()?;
    if c.rows() != a.len() || c.cols() != b.len() {
        return Err(Error::shape(
            "sinkhorn_potentials",
            format!("{}×{}", a.len(), b.len()),
            format!("{}×{}", c.rows(), c.cols()),
        ));
    }
    check_weights(a, "source")?;
    check_weights(b, "target")?;
    c.ensure_finite("cost matrix")?;

    let rows: Vec<usize> = (0..a.len()).filter(|&j| a[j] > 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&k| b[k] > 0.0).collect();
    let cs = c.select_rows(&rows).select_cols(&cols);
    let la: Vec<f64> = rows.iter().map(|&j| a[j].ln()).collect();
    let lb: Vec<f64> = cols.iter().map(|&k| b[k].ln()).collect();
    let ct = cs.transpose();
    let (n, m) = (rows.len(), cols.len());

    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; m];
    let mut buf = vec![0.0; n.max(m)];
    let mut iterations = 0;
    let mut last_update = f64::INFINITY;
    let mut converged = false;
    let stages = stage_schedule(cfg, &cs);
    let final_rho = cfg.rho;
    for (si, &rho) in stages.iter().enumerate() {
        converged = false;
        let tol = stage_tol(cfg, si + 1 == stages.len());
        let omega = cfg.relaxation;
        for _ in 0..cfg.max_iters {
            iterations += 1;
            let mut delta = 0.0_f64;
            for j in 0..n {
                let t = soft_min(cs.row(j).iter().copied(), &beta, &lb, rho, &mut buf[..m]);
                delta = delta.max((t - alpha[j]).abs());
                alpha[j] += omega * (t - alpha[j]);
            }
            for k in 0..m {
                let t = soft_min(ct.row(k).iter().copied(), &alpha, &la, rho, &mut buf[..n]);
                delta = delta.max((t - beta[k]).abs());
                beta[k] += omega * (t - beta[k]);
            }
            last_update = delta / rho;
            if last_update < tol {
                converged = true;
                break;
            }
        }
    }
    if !converged && n.max(m) <= NEWTON_MAX_ATOMS {
        let a_s: Vec<f64> = rows.iter().map(|&j| a[j]).collect();
        let polish = newton_polish(
            &cs,
            &ct,
            &a_s,
            &la,
            &lb,
            final_rho,
            cfg.stop_tol,
            &mut alpha,
            &mut beta,
        );
        iterations += polish.steps;
        last_update = polish.residual;
        converged = polish.converged;
    }

    let mut full_alpha = vec![0.0; a.len()];
    let mut full_beta = vec![0.0; b.len()];
    for (&j, &v) in rows.iter().zip(&alpha) {
        full_alpha[j] = v;
    }
    for (&k, &v) in cols.iter().zip(&beta) {
        full_beta[k] = v;
    }
    let mut buf_m = vec![0.0; m];
    for j in (0..a.len()).filter(|&j| a[j] == 0.0) {
        let cj = c.row(j);
        full_alpha[j] = soft_min(
            cols.iter().map(|&k| cj[k]),
            &beta,
            &lb,
            final_rho,
            &mut buf_m,
        );
    }
    let mut buf_n = vec![0.0; n];
    for k in (0..b.len()).filter(|&k| b[k] == 0.0) {
        full_beta[k] = soft_min(
            rows.iter().map(|&j| c.get(j, k)),
            &alpha,
            &la,
            final_rho,
            &mut buf_n,
        );
    }
    Ok(DualPotentials {
        alpha: full_alpha,
        beta: full_beta,
        rho: final_rho,
        iterations,
        last_update,
        converged,
    })
}

/// Self-transport potentials (α = β) through the averaged fixed point
/// `α ← ½(α + T(α))`. `c` must be symmetric.
pub fn symmetric_potentials(a: &[f64], c: &Tensor, cfg: &SinkhornConfig) -> Result<DualPotentials> {
    cfg.validate()?;
    if c.rows() != a.len() || c.cols() != a.len() {
        return Err(Error::shape(
            "symmetric_potentials",
            a.len(),
            format!("{}×{}", c.rows(), c.cols()),
        ));
    }
    check_weights(a, "self")?;
    c.ensure_finite("cost matrix")?;
    let support: Vec<usize> = (0..a.len()).filter(|&j| a[j] > 0.0).collect();
    let cs = c.select_rows(&support).select_cols(&support);
    let la: Vec<f64> = support.iter().map(|&j| a[j].ln()).collect();
    let n = support.len();

    let mut alpha = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let mut iterations = 0;
    let mut last_update = f64::INFINITY;
    let mut converged = false;
    let stages = stage_schedule(cfg, &cs);
    for (si, &rho) in stages.iter().enumerate() {
        converged = false;
        let tol = stage_tol(cfg, si + 1 == stages.len());
        for _ in 0..cfg.max_iters {
            iterations += 1;
            for j in 0..n {
                next[j] = 0.5
                    * (alpha[j] + soft_min(cs.row(j).iter().copied(), &alpha, &la, rho, &mut buf));
            }
            let delta = next
                .iter()
                .zip(&alpha)
                .fold(0.0_f64, |d, (x, y)| d.max((x - y).abs()));
            std::mem::swap(&mut alpha, &mut next);
            last_update = delta / rho;
            if last_update < tol {
                converged = true;
                break;
            }
        }
    }
    let mut full = vec![0.0; a.len()];
    for j in 0..a.len() {
        full[j] = soft_min(
            support.iter().map(|&k| c.get(j, k)),
            &alpha,
            &la,
            cfg.rho,
            &mut buf,
        );
    }
    // One exact c-transform leaves α ≈ β to second order; symmetrize it.
    for (&j, &v) in support.iter().zip(&alpha) {
        full[j] = 0.5 * (full[j] + v);
    }
    Ok(DualPotentials {
        beta: full.clone(),
        alpha: full,
        rho: cfg.rho,
        iterations,
        last_update,
        converged,
    })
}

/// A transport value with its convergence record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtValue {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Dual value of the regularized transport problem between `(X, a)` and `(Y, b)`.
pub fn ot_rho(
    x: &Tensor,
    y: &Tensor,
    a: &[f64],
    b: &[f64],
    cfg: &SinkhornConfig,
) -> Result<OtValue> {
    let c = cost_matrix(x, y, cfg.cost)?;
    let pot = sinkhorn_potentials(a, b, &c, cfg)?;
    Ok(OtValue {
        value: pot.dual_value(a, b, &c),
        converged: pot.converged,
        iterations: pot.iterations,
    })
}

fn self_ot(x: &Tensor, a: &[f64], cfg: &SinkhornConfig) -> Result<(DualPotentials, Tensor, f64)> {
    let c = cost_matrix(x, x, cfg.cost)?;
    let pot = symmetric_potentials(a, &c, cfg)?;
    let v = pot.dual_value(a, a, &c);
    Ok((pot, c, v))
}

/// Debiased divergence with its three components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub value: f64,
    pub cross: f64,
    pub self_x: f64,
    pub self_y: f64,
    pub converged: bool,
}

/// `S_ρ = OT_ρ(P, Q) − ½ OT_ρ(P, P) − ½ OT_ρ(Q, Q)`.
pub fn sinkhorn_divergence(
    x: &Tensor,
    y: &Tensor,
    a: &[f64],
    b: &[f64],
    cfg: &SinkhornConfig,
) -> Result<Divergence> {
    let cross = ot_rho(x, y, a, b, cfg)?;
    let (px, _, sx) = self_ot(x, a, cfg)?;
    let (py, _, sy) = self_ot(y, b, cfg)?;
    Ok(Divergence {
        value: cross.value - 0.5 * sx - 0.5 * sy,
        cross: cross.value,
        self_x: sx,
        self_y: sy,
        converged: cross.converged && px.converged && py.converged,
    })
}

/// Gradient of `S_ρ((X, a), (X̂, b))` with respect to the rows of `X̂`,
/// holding the converged potentials fixed.
pub fn sinkhorn_grad(
    x: &Tensor,
    x_hat: &Tensor,
    a: &[f64],
    b: &[f64],
    cfg: &SinkhornConfig,
) -> Result<(Tensor, Divergence)> {
    let c_xy = cost_matrix(x, x_hat, cfg.cost)?;
    let p_xy = sinkhorn_potentials(a, b, &c_xy, cfg)?;
    let (px, _, sx) = self_ot(x, a, cfg)?;
    let (py, c_yy, sy) = self_ot(x_hat, b, cfg)?;
    let cross = p_xy.dual_value(a, b, &c_xy);

    let plan_xy = p_xy.plan(a, b, &c_xy);
    let plan_yy = py.plan(b, b, &c_yy);
    let (n, m, d) = (x.rows(), x_hat.rows(), x_hat.cols());
    let mut g = vec![0.0; m * d];
    for k in 0..m {
        let out = &mut g[k * d..(k + 1) * d];
        let xk = x_hat.row(k);
        for j in 0..n {
            let w = plan_xy.get(j, k);
            if w != 0.0 {
                cfg.cost.add_grad_second(x.row(j), xk, w, out);
            }
        }
        for j in 0..m {
            let w = plan_yy.get(j, k);
            if w != 0.0 {
                cfg.cost.add_grad_second(x_hat.row(j), xk, -w, out);
            }
        }
    }
    let div = Divergence {
        value: cross - 0.5 * sx - 0.5 * sy,
        cross,
        self_x: sx,
        self_y: sy,
        converged: p_xy.converged && px.converged && py.converged,
    };
    Ok((Tensor::matrix(m, d, g)?, div))
}

/// Mean cost of the best one-to-one matching, by exhaustive permutation scan.
pub fn exact_ot_assignment(x: &Tensor, y: &Tensor, cost: CostSpec) -> Result<f64> {
    let n = x.rows();
    if y.rows() != n {
        return Err(Error::shape("exact_ot_assignment", n, y.rows()));
    }
    if n > 8 {
        return Err(Error::InvalidArgument(format!(
            "exact assignment limited to n ≤ 8, got {n}"
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let c = cost_matrix(x, y, cost)?;
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(j, &k)| c.get(j, k)).sum::<f64>();
    let mut best = eval(&perm);
    // Heap's algorithm
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(eval(&perm));
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}
