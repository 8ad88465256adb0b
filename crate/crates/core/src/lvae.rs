//! Least-volume autoencoders: volume-regularized training, latent pruning
//! and a PCA baseline.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::nn::checkpoint::{load_mlp, save_mlp};
use crate::nn::{Activation, AdamState, Mlp, MlpGrads};
use crate::tensor::Tensor;

/// Network shapes and training schedule of one autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LvConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Decoder Lipschitz scale `K`, applied as the decoder's input scale.
    pub k: f64,
    pub eta: f64,
    pub lambda_final: f64,
    pub ramp_epochs: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LvConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden: vec![128, 64],
            hidden_activation: Activation::leaky(),
            output_activation: Activation::Sigmoid,
            k: 1.0,
            eta: 0.004,
            lambda_final: 0.2,
            ramp_epochs: 2000,
            epochs: 2000,
            batch: 50,
            lr: 1e-4,
            seed: 0,
        }
    }
}

impl LvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.lambda_final >= 0.0) {
            return bad(format!(
                "lambda_final must be nonnegative, got {}",
                self.lambda_final
            ));
        }
        if self.ramp_epochs > self.epochs {
            return bad(format!(
                "ramp_epochs {} exceeds epochs {}",
                self.ramp_epochs, self.epochs
            ));
        }
        if self.latent_dim == 0 || self.batch == 0 {
            return bad("latent_dim and batch must be positive".into());
        }
        if !(self.k > 0.0) {
            return bad(format!("k must be positive, got {}", self.k));
        }
        Ok(())
    }
}

/// Encoder/decoder pair with the latent statistics used for pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct AEModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub latent_dim: usize,
    pub latent_means: Vec<f64>,
    pub latent_stds: Vec<f64>,
    pub kept_indices: Vec<usize>,
}

impl AEModel {
    pub fn new(data_dim: usize, cfg: &LvConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let h = cfg.hidden_activation;
        let build = |inputs: usize,
                     hidden: &[usize],
                     outputs: usize,
                     head: Activation,
                     sn: bool,
                     scale: f64,
                     rng: &mut ChaCha8Rng| {
            let mut specs: Vec<crate::nn::LayerSpec> = hidden
                .iter()
                .map(|&o| crate::nn::LayerSpec {
                    outputs: o,
                    activation: h,
                    spectral_norm: sn,
                })
                .collect();
            specs.push(crate::nn::LayerSpec {
                outputs,
                activation: head,
                spectral_norm: sn,
            });
            Mlp::build(inputs, &specs, scale, rng)
        };
        let encoder = build(
            data_dim,
            &cfg.hidden,
            cfg.latent_dim,
            Activation::Identity,
            false,
            1.0,
            rng,
        )?;
        let rev: Vec<usize> = cfg.hidden.iter().rev().copied().collect();
        let mut decoder = build(
            cfg.latent_dim,
            &rev,
            data_dim,
            cfg.output_activation,
            true,
            cfg.k,
            rng,
        )?;
        decoder.power_iterate(20);
        Ok(Self {
            encoder,
            decoder,
            latent_dim: cfg.latent_dim,
            latent_means: vec![0.0; cfg.latent_dim],
            latent_stds: vec![0.0; cfg.latent_dim],
            kept_indices: (0..cfg.latent_dim).collect(),
        })
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.inputs()
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    /// Encodes and replaces every non-kept coordinate by its latent mean.
    pub fn encode_pruned(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode(x)?;
        Ok(self.apply_pruning(&z, &self.kept_indices))
    }

    /// Codes restricted to `kept_indices`, in that order.
    pub fn encode_kept(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode(x)?.select_cols(&self.kept_indices))
    }

    /// Decodes kept-coordinate codes, filling the rest with latent means.
    pub fn decode_kept(&self, z_kept: &Tensor) -> Result<Tensor> {
        if z_kept.cols() != self.kept_indices.len() {
            return Err(Error::shape(
                "decode_kept",
                self.kept_indices.len(),
                z_kept.cols(),
            ));
        }
        let n = z_kept.rows();
        let mut z = Tensor::zeros(&[n, self.latent_dim]);
        for i in 0..n {
            let row = z.row_mut(i);
            row.copy_from_slice(&self.latent_means);
            for (c, &k) in self.kept_indices.iter().enumerate() {
                row[k] = z_kept.get(i, c);
            }
        }
        self.decoder.forward(&z)
    }

    pub fn apply_pruning(&self, z: &Tensor, kept: &[usize]) -> Tensor {
        let mut out = z.clone();
        let mut mask = vec![false; self.latent_dim];
        for &k in kept {
            mask[k] = true;
        }
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                if !mask[j] {
                    *v = self.latent_means[j];
                }
            }
        }
        out
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decoder.forward(&self.encode_pruned(x)?)
    }

    /// Per-sample ℓ2 reconstruction errors with the given kept set.
    pub fn reconstruction_errors_with(&self, x: &Tensor, kept: &[usize]) -> Result<Vec<f64>> {
        let z = self.apply_pruning(&self.encode(x)?, kept);
        let xr = self.decoder.forward(&z)?;
        Ok(row_distances(&xr, x))
    }

    pub fn reconstruction_errors(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.reconstruction_errors_with(x, &self.kept_indices)
    }

    /// Recomputes latent means and population standard deviations over `x`.
    pub fn refresh_latent_stats(&mut self, x: &Tensor) -> Result<()> {
        let z = self.encode(x)?;
        self.latent_means = shifted_means(&z);
        self.latent_stds = latent_std(&z)?;
        Ok(())
    }

    /// Data-space displacement `g(z̄ + e_i) − g(z̄)` for each kept coordinate
    /// (rows), exact for affine decoders.
    pub fn latent_directions(&self) -> Result<Tensor> {
        let l = self.latent_dim;
        let mut z = Tensor::zeros(&[self.kept_indices.len() + 1, l]);
        for r in 0..z.rows() {
            z.row_mut(r).copy_from_slice(&self.latent_means);
        }
        for (r, &k) in self.kept_indices.iter().enumerate() {
            z.set(r + 1, k, self.latent_means[k] + 1.0);
        }
        let out = self.decoder.forward(&z)?;
        let base = out.row(0).to_vec();
        let rows: Vec<Vec<f64>> = (1..out.rows())
            .map(|r| out.row(r).iter().zip(&base).map(|(a, b)| a - b).collect())
            .collect();
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.data_dim()]));
        }
        Tensor::from_rows(&rows)
    }
}

fn row_distances(a: &Tensor, b: &Tensor) -> Vec<f64> {
    a.rows_iter()
        .zip(b.rows_iter())
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Column means accumulated relative to the first row, so a constant
/// column yields its value exactly.
fn shifted_means(z: &Tensor) -> Vec<f64> {
    if z.rows() == 0 {
        return vec![0.0; z.cols()];
    }
    let first = z.row(0).to_vec();
    let mut acc = vec![0.0; z.cols()];
    for r in z.rows_iter().take(z.rows()) {
        for ((a, x), f) in acc.iter_mut().zip(r).zip(&first) {
            *a += x - f;
        }
    }
    let n = z.rows() as f64;
    first.iter().zip(&acc).map(|(f, a)| f + a / n).collect()
}

/// Per-column population standard deviation.
pub fn latent_std(z: &Tensor) -> Result<Vec<f64>> {
    let n = z.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "latent_std needs at least 2 rows, got {n}"
        )));
    }
    let mu = shifted_means(z);
    let mut var = vec![0.0; z.cols()];
    for r in z.rows_iter().take(n) {
        for ((v, x), m) in var.iter_mut().zip(r).zip(&mu) {
            *v += (x - m) * (x - m);
        }
    }
    Ok(var.iter().map(|v| (v / n as f64).sqrt()).collect())
}

/// Geometric mean of `σ_i + η`, as `exp(mean(log(σ_i + η)))`.
pub fn volume_loss(sigma: &[f64], eta: f64) -> f64 {
    if sigma.iter().any(|&s| s + eta <= 0.0) {
        return 0.0;
    }
    (sigma.iter().map(|&s| (s + eta).ln()).sum::<f64>() / sigma.len() as f64).exp()
}

/// Objective value, its parts and parameter gradients.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub reconstruction: f64,
    pub volume: f64,
    pub encoder_grads: MlpGrads,
    pub decoder_grads: MlpGrads,
}

/// `mean_b ‖g(e(x_b)) − x_b‖₂ + λ·vol(σ_batch)` with exact gradients,
/// including the path through the batch standard deviations.
pub fn lvae_objective(
    batch: &Tensor,
    model: &AEModel,
    lambda: f64,
    eta: f64,
) -> Result<ObjectiveEval> {
    let n = batch.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let enc = model.encoder.forward_cached(batch)?;
    let z = enc.output().clone();
    let dec = model.decoder.forward_cached(&z)?;
    let xr = dec.output();
    let dists = row_distances(xr, batch);
    let recon = mean(&dists);

    let d = batch.cols();
    let mut d_xr = Tensor::zeros(&[n, d]);
    for (i, &e) in dists.iter().enumerate() {
        if e > 0.0 {
            let scale = 1.0 / (n as f64 * e);
            for j in 0..d {
                d_xr.set(i, j, scale * (xr.get(i, j) - batch.get(i, j)));
            }
        }
    }
    let (decoder_grads, mut d_z) = model.decoder.backward(&dec, &d_xr)?;

    let mut volume = 0.0;
    if n >= 2 && lambda != 0.0 {
        let sigma = latent_std(&z)?;
        let mu = shifted_means(&z);
        volume = volume_loss(&sigma, eta);
        let l = sigma.len() as f64;
        if volume > 0.0 {
            for (i, (&s, &m)) in sigma.iter().zip(&mu).enumerate() {
                if s == 0.0 {
                    continue;
                }
                let dv_ds = volume / (l * (s + eta));
                let coef = lambda * dv_ds / (n as f64 * s);
                for b in 0..n {
                    let g = d_z.get(b, i) + coef * (z.get(b, i) - m);
                    d_z.set(b, i, g);
                }
            }
        }
    } else if n >= 2 {
        volume = volume_loss(&latent_std(&z)?, eta);
    }
    let (encoder_grads, _) = model.encoder.backward(&enc, &d_z)?;
    Ok(ObjectiveEval {
        value: recon + lambda * volume,
        reconstruction: recon,
        volume,
        encoder_grads,
        decoder_grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda: f64,
    pub objective: f64,
    pub reconstruction: f64,
    pub volume: f64,
}

/// Outcome of [`train_lvae`]. On divergence `model` is the last finite state.
#[derive(Debug, Clone)]
pub struct LvaeRun {
    pub model: AEModel,
    pub log: Vec<EpochLog>,
    pub diverged_at: Option<usize>,
}

/// Adam training with a linear λ ramp and one power iteration per step on
/// every decoder layer. Latent statistics are refreshed over `data` at the end.
pub fn train_lvae(data: &Tensor, cfg: &LvConfig) -> Result<LvaeRun> {
    cfg.validate()?;
    data.ensure_finite("training data")?;
    let n = data.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "training needs at least 2 samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = AEModel::new(data.cols(), cfg, &mut rng)?;
    let mut names = model.encoder.param_names("encoder.");
    names.extend(model.decoder.param_names("decoder."));
    let mut sizes = model.encoder.param_sizes();
    sizes.extend(model.decoder.param_sizes());
    let mut adam = AdamState::new(&sizes, cfg.lr);

    let batch = cfg.batch.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let ramp_steps = (cfg.ramp_epochs * steps_per_epoch) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut last_good = model.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut obj, mut rec, mut vol, mut count) = (0.0, 0.0, 0.0, 0usize);
        let mut lambda = 0.0;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 && n >= 2 {
                continue;
            }
            lambda = if ramp_steps > 0.0 {
                cfg.lambda_final * (step as f64 / ramp_steps).min(1.0)
            } else {
                cfg.lambda_final
            };
            model.decoder.power_iterate(1);
            let xb = data.select_rows(chunk);
            let ev = lvae_objective(&xb, &model, lambda, cfg.eta)?;
            if !ev.value.is_finite() {
                return Ok(LvaeRun {
                    model: last_good,
                    log,
                    diverged_at: Some(epoch),
                });
            }
            let mut grads: Vec<&[f64]> = ev.encoder_grads.slices();
            grads.extend(ev.decoder_grads.slices());
            let mut params = model.encoder.params_mut();
            params.extend(model.decoder.params_mut());
            if let Err(e) = adam.step(&mut params, &grads, &names) {
                if matches!(e, Error::NonFinite(_)) {
                    return Ok(LvaeRun {
                        model: last_good,
                        log,
                        diverged_at: Some(epoch),
                    });
                }
                return Err(e);
            }
            step += 1;
            obj += ev.value;
            rec += ev.reconstruction;
            vol += ev.volume;
            count += 1;
        }
        let c = count.max(1) as f64;
        log.push(EpochLog {
            epoch,
            lambda,
            objective: obj / c,
            reconstruction: rec / c,
            volume: vol / c,
        });
        last_good.clone_from(&model);
    }
    model.refresh_latent_stats(data)?;
    Ok(LvaeRun {
        model,
        log,
        diverged_at: None,
    })
}

/// JSON record written next to a pruned checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    /// `(index, σ)` in ascending σ order, ties by index.
    pub sigma_sorted: Vec<(usize, f64)>,
    pub kept_indices: Vec<usize>,
    pub pruned_order: Vec<usize>,
    pub baseline_error: f64,
    pub pruned_error: f64,
    pub delta: f64,
    /// Threshold is `(1 + delta) · baseline_error`.
    pub threshold_mode: String,
    pub k_hat: f64,
    pub k_hat_linear: f64,
}

/// Greedy pruning in ascending σ until the mean reconstruction error would
/// exceed `(1 + delta)` times the unpruned error.
pub fn prune(model: &AEModel, data: &Tensor, delta: f64) -> Result<(AEModel, PruneReport)> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must be nonnegative, got {delta}"
        )));
    }
    let all: Vec<usize> = (0..model.latent_dim).collect();
    let baseline = mean(&model.reconstruction_errors_with(data, &all)?);
    let limit = (1.0 + delta) * baseline;
    let mut sorted: Vec<(usize, f64)> = model.latent_stds.iter().copied().enumerate().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let mut kept = all.clone();
    let mut pruned_order = Vec::new();
    let mut current = baseline;
    for &(i, _) in &sorted {
        if kept.len() == 1 {
            break;
        }
        let trial: Vec<usize> = kept.iter().copied().filter(|&k| k != i).collect();
        let err = mean(&model.reconstruction_errors_with(data, &trial)?);
        if err > limit {
            break;
        }
        kept = trial;
        pruned_order.push(i);
        current = err;
    }
    let mut out = model.clone();
    out.kept_indices = kept.clone();
    let report = PruneReport {
        sigma_sorted: sorted,
        kept_indices: kept,
        pruned_order,
        baseline_error: baseline,
        pruned_error: current,
        delta,
        threshold_mode: "relative".into(),
        k_hat: model.decoder.lipschitz_bound(),
        k_hat_linear: model.decoder.linear_lipschitz_bound(),
    };
    Ok((out, report))
}

/// Per-sample comparison of the pruning error increase with its Lipschitz bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneBoundCheck {
    /// `‖x − d(e_P(x))‖ − ‖x − d(e(x))‖` per sample.
    pub increases: Vec<f64>,
    /// `K̂·sqrt(Σ_{i∈P} σᵢ²)` with `K̂` the decoder's product Lipschitz bound.
    pub bound: f64,
    pub violations: usize,
}

/// Checks every row of `data` against the bound for the dimensions outside
/// `model.kept_indices`.
pub fn prune_bound_check(model: &AEModel, data: &Tensor) -> Result<PruneBoundCheck> {
    let all: Vec<usize> = (0..model.latent_dim).collect();
    let full = model.reconstruction_errors_with(data, &all)?;
    let pruned = model.reconstruction_errors_with(data, &model.kept_indices)?;
    let sum_sq: f64 = all
        .iter()
        .filter(|i| !model.kept_indices.contains(i))
        .map(|&i| model.latent_stds[i].powi(2))
        .sum();
    let bound = model.decoder.lipschitz_bound() * sum_sq.sqrt();
    let increases: Vec<f64> = pruned.iter().zip(&full).map(|(p, f)| p - f).collect();
    let violations = increases.iter().filter(|&&d| d > bound).count();
    Ok(PruneBoundCheck {
        increases,
        bound,
        violations,
    })
}

pub fn dimension_estimate(model: &AEModel) -> usize {
    model.kept_indices.len()
}

/// Principal-component fit of the centered data.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub mean: Vec<f64>,
    /// `k × D`, orthonormal rows.
    pub components: Tensor,
    /// All singular values of the centered data, descending.
    pub singular_values: Vec<f64>,
    /// Per-sample ℓ2 error of the rank-k reconstruction.
    pub errors: Vec<f64>,
}

impl PcaFit {
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let centered = center(x, &self.mean);
        centered.matmul(&self.components.transpose())
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let mut r = self.project(x)?.matmul(&self.components)?;
        for i in 0..r.rows() {
            for (v, m) in r.row_mut(i).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(r)
    }
}

fn center(x: &Tensor, mean: &[f64]) -> Tensor {
    let mut c = x.clone();
    for i in 0..c.rows() {
        for (v, m) in c.row_mut(i).iter_mut().zip(mean) {
            *v -= m;
        }
    }
    c
}

pub fn pca_fit(data: &Tensor, k: usize) -> Result<PcaFit> {
    let (n, d) = (data.rows(), data.cols());
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidArgument(format!(
            "k must lie in 1..={}, got {k}",
            n.min(d)
        )));
    }
    let mean = data.column_means();
    let centered = center(data, &mean);
    let m = DMatrix::from_row_slice(n, d, centered.data());
    let svd = m.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Singular("SVD did not return right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut comps = Vec::with_capacity(k * d);
    for &i in order.iter().take(k) {
        comps.extend(v_t.row(i).iter());
    }
    let mut fit = PcaFit {
        mean,
        components: Tensor::matrix(k, d, comps)?,
        singular_values,
        errors: Vec::new(),
    };
    let r = fit.reconstruct(data)?;
    fit.errors = row_distances(&r, data);
    Ok(fit)
}

/// Principal angles in degrees between the row spans of `a` and `b`, ascending.
pub fn principal_angles(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.cols() != b.cols() {
        return Err(Error::shape("principal_angles", a.cols(), b.cols()));
    }
    let qa = DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
        .transpose()
        .qr()
        .q();
    let qb = DMatrix::from_row_slice(b.rows(), b.cols(), b.data())
        .transpose()
        .qr()
        .q();
    let s = (qa.transpose() * qb).singular_values();
    let mut angles: Vec<f64> = s
        .iter()
        .map(|c| c.clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AeManifest {
    latent_dim: usize,
    latent_means: Vec<f64>,
    latent_stds: Vec<f64>,
    kept_indices: Vec<usize>,
    encoder: String,
    decoder: String,
}

/// Saves `<dir>/<name>.json` plus encoder and decoder checkpoints.
pub fn save_ae(model: &AEModel, dir: &Path, name: &str, step: u64) -> Result<PathBuf> {
    let enc = save_mlp(&model.encoder, dir, &format!("{name}.encoder"), step)?;
    let dec = save_mlp(&model.decoder, dir, &format!("{name}.decoder"), step)?;
    let file_name = |p: PathBuf| {
        p.file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let manifest = AeManifest {
        latent_dim: model.latent_dim,
        latent_means: model.latent_means.clone(),
        latent_stds: model.latent_stds.clone(),
        kept_indices: model.kept_indices.clone(),
        encoder: file_name(enc),
        decoder: file_name(dec),
    };
    let path = dir.join(format!("{name}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_ae(path: &Path) -> Result<AEModel> {
    let m: AeManifest = read_json(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let (encoder, _) = load_mlp(&dir.join(&m.encoder))?;
    let (decoder, _) = load_mlp(&dir.join(&m.decoder))?;
    if encoder.outputs() != m.latent_dim
        || decoder.inputs() != m.latent_dim
        || m.kept_indices.iter().any(|&k| k >= m.latent_dim)
    {
        return Err(Error::Artifact {
            path: path.to_path_buf(),
            reason: "latent dimension disagrees with the stored networks".into(),
        });
    }
    Ok(AEModel {
        encoder,
        decoder,
        latent_dim: m.latent_dim,
        latent_means: m.latent_means,
        latent_stds: m.latent_stds,
        kept_indices: m.kept_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_model(seed: u64, hidden: Vec<usize>) -> AEModel {
        let cfg = LvConfig {
            latent_dim: 3,
            hidden,
            k: 1.5,
            ..LvConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AEModel::new(4, &cfg, &mut rng).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(
            n,
            d,
            (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn latent_std_examples() {
        let z = Tensor::matrix(2, 2, vec![3.0, 0.0, 3.0, 2.0]).unwrap();
        assert_eq!(latent_std(&z).unwrap(), vec![0.0, 1.0]);
        assert!(latent_std(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn latent_std_matches_two_pass_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random(&mut rng, 100, 5);
        let s = latent_std(&z).unwrap();
        for j in 0..5 {
            let col: Vec<f64> = (0..100).map(|i| z.get(i, j)).collect();
            let m = col.iter().sum::<f64>() / 100.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 100.0;
            assert!((s[j] - v.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn volume_examples() {
        assert!((volume_loss(&[1.0, 2.0, 0.5], 0.0) - 1.0).abs() < 1e-15);
        assert!((volume_loss(&[0.3; 4], 0.1) - 0.4).abs() < 1e-15);
        assert_eq!(volume_loss(&[0.0, 2.0], 0.0), 0.0);
    }

    #[test]
    fn perfect_autoencoder_has_zero_objective() {
        let mut m = toy_model(0, vec![]);
        for l in m
            .encoder
            .layers
            .iter_mut()
            .chain(m.decoder.layers.iter_mut())
        {
            l.weight = Tensor::zeros(l.weight.shape());
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        m.decoder.layers[0].activation = Activation::Identity;
        let x = Tensor::zeros(&[5, 4]);
        let ev = lvae_objective(&x, &m, 0.0, 0.004).unwrap();
        assert_eq!(ev.value, 0.0);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 6, 4);
        for hidden in [vec![], vec![5]] {
            let model = toy_model(9, hidden);
            let ev = lvae_objective(&x, &model, 0.7, 0.01).unwrap();
            let mut analytic: Vec<f64> = ev.encoder_grads.slices().concat();
            analytic.extend(ev.decoder_grads.slices().concat());
            let mut point: Vec<f64> = model.encoder.params().concat();
            point.extend(model.decoder.params().concat());
            let f = |p: &[f64]| {
                let mut m = model.clone();
                let mut off = 0;
                let mut params = m.encoder.params_mut();
                params.extend(m.decoder.params_mut());
                for s in params {
                    s.copy_from_slice(&p[off..off + s.len()]);
                    off += s.len();
                }
                lvae_objective(&x, &m, 0.7, 0.01).unwrap().value
            };
            let d = grad_check(f, &point, &analytic, 1e-5);
            assert!(d < 1e-4, "{d}");
        }
    }

    #[test]
    fn single_sample_batch_skips_volume() {
        let model = toy_model(2, vec![]);
        let x = Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let ev = lvae_objective(&x, &model, 1.0, 0.004).unwrap();
        assert_eq!(ev.value, ev.reconstruction);
    }

    #[test]
    fn rank_one_data_keeps_one_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(0.2..0.8)).collect();
        let data: Vec<f64> = (0..400)
            .flat_map(|_| {
                let t = rng.random_range(0.0..1.0);
                v.iter().map(move |x| 0.1 + 0.8 * t * x).collect::<Vec<_>>()
            })
            .collect();
        let x = Tensor::matrix(400, 8, data).unwrap();
        let cfg = LvConfig {
            latent_dim: 4,
            hidden: vec![32],
            k: 4.0,
            eta: 1e-3,
            lambda_final: 0.3,
            epochs: 1000,
            ramp_epochs: 300,
            batch: 50,
            lr: 3e-3,
            seed: 1,
            ..LvConfig::default()
        };
        let run = train_lvae(&x, &cfg).unwrap();
        assert!(run.diverged_at.is_none());
        let s = &run.model.latent_stds;
        let top = s.iter().cloned().fold(0.0, f64::max);
        assert_eq!(s.iter().filter(|&&x| x > 0.05 * top).count(), 1, "{s:?}");
        let (pruned, _) = prune(&run.model, &x, 0.05).unwrap();
        assert_eq!(dimension_estimate(&pruned), 1);
    }

    #[test]
    fn strict_prune_of_untrained_model_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 30, 4);
        let mut m = toy_model(3, vec![6]);
        m.refresh_latent_stats(&x).unwrap();
        let (p, r) = prune(&m, &x, 0.0).unwrap();
        assert_eq!(dimension_estimate(&p), 3);
        assert_eq!(p.encoder, m.encoder);
        assert!(r.pruned_order.is_empty());
        assert!(prune(&m, &x, -0.1).is_err());
    }

    #[test]
    fn zero_sigma_dimension_prunes_bit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 20, 4);
        let mut m = toy_model(4, vec![]);
        // latent 2 ignores the input entirely
        for j in 0..4 {
            m.encoder.layers[0].weight.set(2, j, 0.0);
        }
        m.refresh_latent_stats(&x).unwrap();
        assert_eq!(m.latent_stds[2], 0.0);
        let full = m.reconstruction_errors_with(&x, &[0, 1, 2]).unwrap();
        let cut = m.reconstruction_errors_with(&x, &[0, 1]).unwrap();
        assert_eq!(full, cut);
    }

    #[test]
    fn pca_line_example() {
        let x = Tensor::matrix(4, 2, vec![0., 0., 1., 2., 2., 4., -1., -2.]).unwrap();
        let fit = pca_fit(&x, 1).unwrap();
        let c = fit.components.row(0);
        let s = 5f64.sqrt();
        assert!((c[0].abs() - 1.0 / s).abs() < 1e-12 && (c[1].abs() - 2.0 / s).abs() < 1e-12);
        assert!(c[0] * c[1] > 0.0);
        assert!(fit.singular_values[1].abs() < 1e-12);
        assert!(pca_fit(&x, 3).is_err());
    }

    #[test]
    fn pca_full_basis_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 12, 5);
        let fit = pca_fit(&x, 5).unwrap();
        assert!(fit.errors.iter().all(|&e| e < 1e-12));
    }

    #[test]
    fn principal_angles_of_rotated_span() {
        let a = Tensor::matrix(2, 3, vec![1., 0., 0., 0., 1., 0.]).unwrap();
        let b = Tensor::matrix(2, 3, vec![1., 1., 0., 1., -1., 0.]).unwrap();
        assert!(principal_angles(&a, &b).unwrap().iter().all(|&t| t < 1e-6));
        let c = Tensor::matrix(1, 3, vec![0., 0., 1.]).unwrap();
        assert!((principal_angles(&a.select_rows(&[0]), &c).unwrap()[0] - 90.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&mut rng, 10, 4);
        let mut m = toy_model(5, vec![6]);
        m.refresh_latent_stats(&x).unwrap();
        m.kept_indices = vec![0, 2];
        let dir = tempfile::tempdir().unwrap();
        let p = save_ae(&m, dir.path(), "lv", 3).unwrap();
        assert_eq!(load_ae(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn volume_is_monotone(s in prop::collection::vec(0.0f64..3.0, 1..6), i in 0usize..6, bump in 0.0f64..1.0, eta in 1e-4f64..0.1) {
            let i = i % s.len();
            let mut t = s.clone();
            t[i] += bump;
            prop_assert!(volume_loss(&t, eta) >= volume_loss(&s, eta) * (1.0 - 1e-12));
        }

        #[test]
        fn volume_is_homogeneous(s in prop::collection::vec(0.0f64..3.0, 1..6), a in 0.01f64..10.0, eta in 1e-4f64..0.1) {
            let scaled: Vec<f64> = s.iter().map(|x| a * x).collect();
            let lhs = volume_loss(&scaled, a * eta);
            let rhs = a * volume_loss(&s, eta);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1.0));
        }

        #[test]
        fn pruned_round_trip_matches_mean_substitution(seed in 0u64..200, mask in 0u8..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 8, 4);
            let mut m = toy_model(seed, vec![5]);
            m.refresh_latent_stats(&x).unwrap();
            m.kept_indices = (0..3).filter(|i| mask & (1 << i) != 0).collect();
            let mut z = m.encode(&x).unwrap();
            for r in 0..z.rows() {
                for j in 0..3 {
                    if !m.kept_indices.contains(&j) {
                        z.set(r, j, m.latent_means[j]);
                    }
                }
            }
            prop_assert_eq!(m.reconstruct(&x).unwrap(), m.decoder.forward(&z).unwrap());
            if !m.kept_indices.is_empty() {
                let via_kept = m.decode_kept(&m.encode_kept(&x).unwrap()).unwrap();
                prop_assert_eq!(via_kept, m.decoder.forward(&z).unwrap());
            }
        }
    }
}
