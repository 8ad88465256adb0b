//! Conditional Sinkhorn GAN between latent spaces and the composed
//! encode–generate–decode posterior sampler.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::lvae::{load_ae, AEModel};
use crate::nn::checkpoint::{load_mlp, save_mlp};
use crate::nn::{Activation, AdamState, Mlp};
use crate::normalize::MinMax;
use crate::ot::{sinkhorn_grad, uniform_weights, CostSpec, SinkhornConfig};
use crate::tensor::Tensor;

/// Map `(u, z_y) ↦ ẑ_x` with noise `u ~ Uniform[0,1]^{dim_u}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub net: Mlp,
    pub dim_u: usize,
    pub dim_y: usize,
}

impl Generator {
    pub fn new(
        dim_u: usize,
        dim_y: usize,
        dim_x: usize,
        hidden: &[usize],
        head: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let net = Mlp::stack(dim_u + dim_y, hidden, dim_x, head, false, 1.0, rng)?;
        Ok(Self { net, dim_u, dim_y })
    }

    pub fn from_net(net: Mlp, dim_u: usize) -> Result<Self> {
        if dim_u > net.inputs() {
            return Err(Error::shape(
                "Generator",
                format!("at least {dim_u} inputs"),
                net.inputs(),
            ));
        }
        let dim_y = net.inputs() - dim_u;
        Ok(Self { net, dim_u, dim_y })
    }

    pub fn dim_x(&self) -> usize {
        self.net.outputs()
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let data = (0..n * self.dim_u).map(|_| rng.random::<f64>()).collect();
        Tensor::matrix(n, self.dim_u, data).expect("noise shape")
    }
}

pub fn generator_forward(g: &Generator, u: &Tensor, z_y: &Tensor) -> Result<Tensor> {
    if u.cols() != g.dim_u || z_y.cols() != g.dim_y {
        return Err(Error::shape(
            "generator_forward",
            format!("u: {} cols, z_y: {} cols", g.dim_u, g.dim_y),
            format!("u: {} cols, z_y: {} cols", u.cols(), z_y.cols()),
        ));
    }
    if u.rows() != z_y.rows() {
        return Err(Error::shape("generator_forward rows", u.rows(), z_y.rows()));
    }
    g.net.forward(&u.hcat(z_y)?)
}

/// Paired latent codes; row `i` of both blocks comes from sample `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPairSet {
    pub z_x: Tensor,
    pub z_y: Tensor,
    pub ids: Vec<usize>,
}

impl LatentPairSet {
    pub fn new(z_x: Tensor, z_y: Tensor, ids: Vec<usize>) -> Result<Self> {
        if z_x.rows() != z_y.rows() || ids.len() != z_x.rows() {
            return Err(Error::shape(
                "LatentPairSet",
                format!("{} rows", z_x.rows()),
                format!("z_y {} rows, {} ids", z_y.rows(), ids.len()),
            ));
        }
        Ok(Self { z_x, z_y, ids })
    }

    pub fn len(&self) -> usize {
        self.z_x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A joint batch: data-side block, condition block and the source row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct JointBatch {
    pub z_x: Tensor,
    pub z_y: Tensor,
    pub rows: Vec<usize>,
}

fn draw_rows<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::InvalidArgument(format!(
            "batch of {n} exceeds {len} available pairs"
        )));
    }
    Ok(rand::seq::index::sample(rng, len, n).into_vec())
}

/// `n` distinct rows of the pair set, uniformly at random.
pub fn sample_joint_real<R: Rng + ?Sized>(
    pairs: &LatentPairSet,
    n: usize,
    rng: &mut R,
) -> Result<JointBatch> {
    let rows = draw_rows(pairs.len(), n, rng)?;
    Ok(JointBatch {
        z_x: pairs.z_x.select_rows(&rows),
        z_y: pairs.z_y.select_rows(&rows),
        rows,
    })
}

/// Conditions drawn like [`sample_joint_real`], paired with generated `ẑ_x`.
pub fn sample_joint_fake<R: Rng + ?Sized>(
    g: &Generator,
    pairs: &LatentPairSet,
    n: usize,
    rng: &mut R,
) -> Result<JointBatch> {
    let rows = draw_rows(pairs.len(), n, rng)?;
    let z_y = pairs.z_y.select_rows(&rows);
    let u = g.sample_noise(n, rng);
    Ok(JointBatch {
        z_x: generator_forward(g, &u, &z_y)?,
        z_y,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsganConfig {
    pub rho: f64,
    pub cost: CostSpec,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Multiplies the condition block of every joint vector inside the cost.
    pub condition_weight: f64,
    /// Noise dimension; `None` uses the data-side latent dimension.
    pub dim_u: Option<usize>,
    pub hidden: Vec<usize>,
    pub output_activation: Activation,
    pub max_iters: usize,
    pub stop_tol: f64,
    pub scaling: f64,
    pub relaxation: f64,
}

impl Default for CsganConfig {
    fn default() -> Self {
        Self {
            rho: 0.05,
            cost: CostSpec::HalfSqL2,
            epochs: 2000,
            batch: 128,
            lr: 1e-4,
            seed: 0,
            condition_weight: 1.0,
            dim_u: None,
            hidden: vec![128, 128],
            output_activation: Activation::Identity,
            max_iters: 500,
            stop_tol: 1e-4,
            scaling: 0.0,
            relaxation: 1.0,
        }
    }
}

impl CsganConfig {
    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            rho: self.rho,
            max_iters: self.max_iters,
            stop_tol: self.stop_tol,
            cost: self.cost,
            scaling: self.scaling,
            relaxation: self.relaxation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub epoch: usize,
    pub divergence: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct CsganRun {
    pub generator: Generator,
    pub trace: Vec<TracePoint>,
    pub nonconverged_steps: usize,
}

fn joint(z_x: &Tensor, z_y: &Tensor, w: f64) -> Result<Tensor> {
    z_x.hcat(&z_y.scale(w))
}

/// Minimizes `S_ρ` between real and generated joint batches with Adam.
/// Real rows follow a shuffled pass per epoch; fake conditions come from an
/// independent shuffled pass.
pub fn train_csgan(pairs: &LatentPairSet, cfg: &CsganConfig) -> Result<CsganRun> {
    if !(cfg.rho > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rho must be positive, got {}",
            cfg.rho
        )));
    }
    let n = pairs.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "training needs at least 2 pairs".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim_x = pairs.z_x.cols();
    let dim_u = cfg.dim_u.unwrap_or(dim_x);
    let mut g = Generator::new(
        dim_u,
        pairs.z_y.cols(),
        dim_x,
        &cfg.hidden,
        cfg.output_activation,
        &mut rng,
    )?;
    let names = g.net.param_names("generator.");
    let mut adam = AdamState::new(&g.net.param_sizes(), cfg.lr);
    let sk = cfg.sinkhorn();
    let batch = cfg.batch.min(n);
    let w = uniform_weights(batch);

    let mut real_order: Vec<usize> = (0..n).collect();
    let mut fake_order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::new();
    let mut nonconverged = 0usize;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        real_order.shuffle(&mut rng);
        fake_order.shuffle(&mut rng);
        for (real_rows, fake_rows) in real_order
            .chunks_exact(batch)
            .zip(fake_order.chunks_exact(batch))
        {
            let real = joint(
                &pairs.z_x.select_rows(real_rows),
                &pairs.z_y.select_rows(real_rows),
                cfg.condition_weight,
            )?;
            let z_y = pairs.z_y.select_rows(fake_rows);
            let u = g.sample_noise(batch, &mut rng);
            let input = u.hcat(&z_y)?;
            let cache = g.net.forward_cached(&input)?;
            let fake = joint(cache.output(), &z_y, cfg.condition_weight)?;

            let (grad, div) = sinkhorn_grad(&real, &fake, &w, &w, &sk)?;
            if !div.converged {
                nonconverged += 1;
            }
            if !div.value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let upstream = grad.select_cols(&(0..dim_x).collect::<Vec<_>>());
            let (grads, _) = g.net.backward(&cache, &upstream)?;
            adam.step(&mut g.net.params_mut(), &grads.slices(), &names)?;
            trace.push(TracePoint {
                step,
                epoch,
                divergence: div.value,
                converged: div.converged,
            });
            step += 1;
        }
        if step >= 20 && nonconverged * 10 > step {
            return Err(Error::Aborted(format!(
                "Sinkhorn failed to converge in {nonconverged} of {step} steps (rho {}, max_iters {}, stop_tol {:e})",
                cfg.rho, cfg.max_iters, cfg.stop_tol
            )));
        }
    }
    Ok(CsganRun {
        generator: g,
        trace,
        nonconverged_steps: nonconverged,
    })
}

/// Latent representation of one side of the inverse problem.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentCodec {
    /// Normalized values are used as the latent code directly.
    Identity { dim: usize },
    /// Kept coordinates of a pruned autoencoder, rescaled by `norm` so every
    /// latent coordinate spans roughly `[0, 1]` on the training set.
    Lvae { model: Box<AEModel>, norm: MinMax },
}

impl LatentCodec {
    /// Wraps a pruned autoencoder, fitting the latent rescaling on `data`.
    pub fn lvae(model: AEModel, data: &Tensor) -> Result<Self> {
        let z = model.encode_kept(data)?;
        let norm = MinMax::fit(&z)?;
        Ok(LatentCodec::Lvae {
            model: Box::new(model),
            norm,
        })
    }

    pub fn latent_norm(&self) -> Option<&MinMax> {
        match self {
            LatentCodec::Identity { .. } => None,
            LatentCodec::Lvae { norm, .. } => Some(norm),
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            LatentCodec::Identity { dim } => *dim,
            LatentCodec::Lvae { model, .. } => model.data_dim(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            LatentCodec::Identity { dim } => *dim,
            LatentCodec::Lvae { model, .. } => model.kept_indices.len(),
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            LatentCodec::Identity { dim } => {
                if x.cols() != *dim {
                    return Err(Error::shape("LatentCodec::encode", dim, x.cols()));
                }
                Ok(x.clone())
            }
            LatentCodec::Lvae { model, norm } => norm.apply(&model.encode_kept(x)?),
        }
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            LatentCodec::Identity { dim } => {
                if z.cols() != *dim {
                    return Err(Error::shape("LatentCodec::decode", dim, z.cols()));
                }
                Ok(z.clone())
            }
            LatentCodec::Lvae { model, norm } => model.decode_kept(&norm.invert(z)?),
        }
    }
}

/// Everything needed to turn a raw condition into raw posterior samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorModel {
    pub condition: LatentCodec,
    pub condition_norm: MinMax,
    pub generator: Generator,
    pub data: LatentCodec,
    pub data_norm: MinMax,
}

impl PosteriorModel {
    pub fn validate(&self) -> Result<()> {
        let g = &self.generator;
        if self.condition.latent_dim() != g.dim_y || self.data.latent_dim() != g.dim_x() {
            return Err(Error::shape(
                "PosteriorModel",
                format!("generator {}→{}", g.dim_y, g.dim_x()),
                format!(
                    "codecs {}→{}",
                    self.condition.latent_dim(),
                    self.data.latent_dim()
                ),
            ));
        }
        if self.condition_norm.dim() != self.condition.data_dim()
            || self.data_norm.dim() != self.data.data_dim()
        {
            return Err(Error::shape(
                "PosteriorModel normalization",
                self.condition.data_dim(),
                self.condition_norm.dim(),
            ));
        }
        Ok(())
    }

    /// Latent condition code of one raw observation.
    pub fn condition_code(&self, y: &[f64]) -> Result<Tensor> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior condition".into()));
        }
        let yt = Tensor::matrix(1, y.len(), y.to_vec())?;
        self.condition.encode(&self.condition_norm.apply(&yt)?)
    }
}

/// Latent predictions `g(u_i, e_y(norm(y)))` for `n` i.i.d. noise draws.
pub fn posterior_latent_sample<R: Rng + ?Sized>(
    y: &[f64],
    n: usize,
    model: &PosteriorModel,
    rng: &mut R,
) -> Result<Tensor> {
    let code = model.condition_code(y)?;
    if n == 0 {
        return Ok(Tensor::zeros(&[0, model.generator.dim_x()]));
    }
    let mut z_y = Tensor::zeros(&[n, code.cols()]);
    for i in 0..n {
        z_y.row_mut(i).copy_from_slice(code.row(0));
    }
    let u = model.generator.sample_noise(n, rng);
    generator_forward(&model.generator, &u, &z_y)
}

/// `x_i = denorm(d_x(g(u_i, e_y(norm(y)))))` for `n` i.i.d. noise draws.
pub fn posterior_sample<R: Rng + ?Sized>(
    y: &[f64],
    n: usize,
    model: &PosteriorModel,
    rng: &mut R,
) -> Result<Tensor> {
    if n == 0 {
        model.condition_code(y)?;
        return Ok(Tensor::zeros(&[0, model.data_norm.dim()]));
    }
    let z_x = posterior_latent_sample(y, n, model, rng)?;
    model.data_norm.invert(&model.data.decode(&z_x)?)
}

/// JSON link tying a generator checkpoint to its two codecs and bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLink {
    pub generator: String,
    pub dim_u: usize,
    /// Path of the condition-side autoencoder manifest, or `None` for identity.
    pub condition_lvae: Option<String>,
    /// Latent rescaling paired with `condition_lvae`.
    #[serde(default)]
    pub condition_latent_norm: Option<MinMax>,
    pub condition_dim: usize,
    pub condition_norm: MinMax,
    pub data_lvae: Option<String>,
    #[serde(default)]
    pub data_latent_norm: Option<MinMax>,
    pub data_dim: usize,
    pub data_norm: MinMax,
    pub condition_weight: f64,
    pub rho: f64,
    pub cost: CostSpec,
}

/// Saves the generator network plus `<dir>/<name>.link.json`.
/// LVAE paths in `link` are stored as given (relative to `dir` when relative).
pub fn save_posterior(
    dir: &Path,
    name: &str,
    model: &PosteriorModel,
    link: &GeneratorLink,
    step: u64,
) -> Result<PathBuf> {
    let net_path = save_mlp(&model.generator.net, dir, name, step)?;
    let mut link = link.clone();
    link.generator = net_path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    link.dim_u = model.generator.dim_u;
    link.condition_latent_norm = model.condition.latent_norm().cloned();
    link.data_latent_norm = model.data.latent_norm().cloned();
    let path = dir.join(format!("{name}.link.json"));
    write_json(&path, &link)?;
    Ok(path)
}

pub fn load_posterior(link_path: &Path) -> Result<(PosteriorModel, GeneratorLink)> {
    let link: GeneratorLink = read_json(link_path)?;
    let dir = link_path.parent().unwrap_or_else(|| Path::new("."));
    let codec = |p: &Option<String>, norm: &Option<MinMax>, dim: usize| -> Result<LatentCodec> {
        Ok(match (p, norm) {
            (Some(rel), Some(norm)) => LatentCodec::Lvae {
                model: Box::new(load_ae(&dir.join(rel))?),
                norm: norm.clone(),
            },
            (Some(_), None) => {
                return Err(Error::Artifact {
                    path: link_path.to_path_buf(),
                    reason: "LVAE codec without latent normalization".into(),
                })
            }
            (None, _) => LatentCodec::Identity { dim },
        })
    };
    let (net, _) = load_mlp(&dir.join(&link.generator))?;
    let model = PosteriorModel {
        condition: codec(
            &link.condition_lvae,
            &link.condition_latent_norm,
            link.condition_dim,
        )?,
        condition_norm: link.condition_norm.clone(),
        generator: Generator::from_net(net, link.dim_u)?,
        data: codec(&link.data_lvae, &link.data_latent_norm, link.data_dim)?,
        data_norm: link.data_norm.clone(),
    };
    model.validate().map_err(|e| Error::Artifact {
        path: link_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((model, link))
}
