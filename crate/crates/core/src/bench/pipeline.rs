//! Stage runner with content-hash caching.
//!
//! Every stage owns one subdirectory of the output directory and records a
//! manifest under `manifests/` listing the SHA-256 of each input and output
//! file. A stage whose key (config blocks plus input hashes) matches its
//! manifest, and whose outputs are intact, is skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, Condition, ExperimentConfig, ExperimentKind, Stage};
use super::metrics::{
    clip_saturation, length_scale, min_l2_error, relative_error, relative_variation, CaseMetrics,
    MetricReport, Provenance, ScaleMode,
};
use crate::csgan::{
    load_posterior, posterior_latent_sample, posterior_sample, save_posterior, train_csgan,
    CsganConfig, GeneratorLink, LatentCodec, LatentPairSet, PosteriorModel,
};
use crate::error::{Error, Result};
use crate::io::{
    file_sha256, load_array, read_json, save_array, sha256_hex, write_json, write_text,
};
use crate::kosys::{build_ko_dataset, load_ko_dataset, save_ko_dataset, KoDataset};
use crate::ksgent::{entropy_report, ksg_entropy};
use crate::lvae::{
    load_ae, prune, prune_bound_check, save_ae, train_lvae, PruneBoundCheck, PruneReport,
};
use crate::normalize::MinMax;
use crate::resim::{
    generate_reservoir_batch, load_res_dataset, save_res_dataset, simulate, ResDataset, WellSet,
};
use crate::tensor::Tensor;

/// Record of one completed stage, stored at `manifests/<stage>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub key: String,
    pub config_hash: String,
    /// Output-relative path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// True when the stage was skipped because its outputs were current.
    pub cached: bool,
    pub manifest: StageManifest,
}

/// Limits on the generated reservoir batch; any violation fails the stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirChecks {
    pub max_step_residual: f64,
    pub max_injector_error: f64,
    pub min_water_saturation: f64,
    pub max_water_saturation: f64,
    pub s_max: f64,
    pub min_first_report_oil_cut: f64,
    pub samples: usize,
}

/// JSON written beside each pruned checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub report: PruneReport,
    /// Bound check over the held-out rows.
    pub test_bound: PruneBoundCheck,
}

/// Tolerances enforced on generated reservoir batches.
pub const RESIDUAL_LIMIT: f64 = 1e-8;

pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    config_hash: String,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let config_hash = cfg.hash()?;
        Ok(Self {
            cfg,
            out: out.into(),
            config_hash,
        })
    }

    /// Uses `paths.out` from the config.
    pub fn from_config(cfg: ExperimentConfig) -> Result<Self> {
        let out = cfg.paths.out.clone();
        Self::new(cfg, out)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.out
            .join("manifests")
            .join(format!("{}.json", stage.name()))
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(match stage {
            Stage::Generate => "dataset",
            Stage::TrainLvae => "lvae",
            Stage::Prune => "pruned",
            Stage::TrainCsgan => "csgan",
            Stage::Sample => "samples",
            Stage::Metrics => "metrics",
            Stage::Entropy => "entropy",
        })
    }

    /// Manifest of a finished stage, or an artifact error naming what to run.
    pub fn load_manifest(&self, stage: Stage) -> Result<StageManifest> {
        let path = self.manifest_path(stage);
        if !path.exists() {
            return Err(Error::Artifact {
                path,
                reason: format!("missing; run stage `{stage}` first"),
            });
        }
        read_json(&path)
    }

    fn verify_outputs(&self, m: &StageManifest) -> Result<()> {
        for (rel, hash) in &m.outputs {
            let path = self.out.join(rel);
            if !path.exists() {
                return Err(Error::Artifact {
                    path,
                    reason: format!("missing; rerun stage `{}`", m.stage),
                });
            }
            if &file_sha256(&path)? != hash {
                return Err(Error::Artifact {
                    path,
                    reason: format!("modified since stage `{}` wrote it", m.stage),
                });
            }
        }
        Ok(())
    }

    /// Checks `stage`'s outputs and, transitively, that every upstream stage
    /// was built from the files currently on disk.
    fn verify_chain(&self, stage: Stage) -> Result<StageManifest> {
        let m = self.load_manifest(stage)?;
        self.verify_outputs(&m)?;
        for &up in stage.upstream() {
            self.verify_chain(up)?;
        }
        for (rel, hash) in &m.inputs {
            let path = self.out.join(rel);
            if !path.exists() || &file_sha256(&path)? != hash {
                return Err(Error::Artifact {
                    path,
                    reason: format!("changed since stage `{stage}` read it; rerun `{stage}`"),
                });
            }
        }
        Ok(m)
    }

    /// Runs every stage listed in the config, in order.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        self.cfg.stages.iter().map(|&s| self.run(s)).collect()
    }

    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        let mut inputs = BTreeMap::new();
        for &up in stage.upstream() {
            inputs.extend(self.verify_chain(up)?.outputs);
        }
        let key = sha256_hex(&serde_json::to_vec(&serde_json::json!({
            "config": self.cfg.stage_inputs(stage)?,
            "inputs": inputs,
        }))?);

        let manifest_path = self.manifest_path(stage);
        if manifest_path.exists() {
            if let Ok(old) = read_json::<StageManifest>(&manifest_path) {
                if old.key == key && self.verify_outputs(&old).is_ok() {
                    info!("stage {stage}: outputs current, skipping");
                    return Ok(StageOutcome {
                        stage,
                        cached: true,
                        manifest: old,
                    });
                }
            }
        }

        info!("stage {stage}: running");
        let dir = self.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let ctx = StageCtx {
            p: self,
            stage,
            dir: &dir,
            inputs: &inputs,
        };
        match (stage, self.cfg.kind) {
            (Stage::Generate, ExperimentKind::Ko) => ctx.generate_ko()?,
            (Stage::Generate, ExperimentKind::Reservoir) => ctx.generate_res()?,
            (Stage::TrainLvae, _) => ctx.train_lvae()?,
            (Stage::Prune, _) => ctx.prune()?,
            (Stage::TrainCsgan, _) => ctx.train_csgan()?,
            (Stage::Sample, _) => ctx.sample()?,
            (Stage::Metrics, ExperimentKind::Ko) => ctx.metrics_ko()?,
            (Stage::Metrics, ExperimentKind::Reservoir) => ctx.metrics_res()?,
            (Stage::Entropy, _) => ctx.entropy()?,
        }

        let mut outputs = BTreeMap::new();
        for path in list_files(&dir)? {
            outputs.insert(self.relative(&path), file_sha256(&path)?);
        }
        let manifest = StageManifest {
            stage,
            key,
            config_hash: self.config_hash.clone(),
            inputs,
            outputs,
        };
        write_json(&manifest_path, &manifest)?;
        Ok(StageOutcome {
            stage,
            cached: false,
            manifest,
        })
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.out)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// Test case ids evaluated by the sampling and metric stages.
    pub fn case_ids(&self, test_ids: &[usize]) -> Vec<usize> {
        let k = self.cfg.sampling.test_cases;
        if k >= test_ids.len() {
            return test_ids.to_vec();
        }
        let mut ids = test_ids.to_vec();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.cfg.seed,
            "test-subset",
        )));
        ids.truncate(k);
        ids.sort_unstable();
        ids
    }

    /// Names of the trained autoencoders: `y1` for KO, `g` plus one per
    /// condition for the reservoir.
    pub fn lvae_names(&self) -> Vec<String> {
        match self.cfg.kind {
            ExperimentKind::Ko => vec!["y1".into()],
            ExperimentKind::Reservoir => std::iter::once("g".to_string())
                .chain(self.cfg.conditions.iter().map(|c| c.tag().to_string()))
                .collect(),
        }
    }

    /// One posterior model per label: `ko`, or each condition tag.
    pub fn posterior_labels(&self) -> Vec<String> {
        match self.cfg.kind {
            ExperimentKind::Ko => vec!["ko".into()],
            ExperimentKind::Reservoir => self
                .cfg
                .conditions
                .iter()
                .map(|c| c.tag().to_string())
                .collect(),
        }
    }

    pub fn load_ko(&self) -> Result<KoDataset> {
        load_ko_dataset(&self.stage_dir(Stage::Generate))
    }

    pub fn load_res(&self) -> Result<ResDataset> {
        load_res_dataset(&self.stage_dir(Stage::Generate))
    }

    pub fn load_posterior(&self, label: &str) -> Result<PosteriorModel> {
        let path = self
            .stage_dir(Stage::TrainCsgan)
            .join(format!("{label}.link.json"));
        Ok(load_posterior(&path)?.0)
    }

    /// Stored samples `cases × M × d` and the case ids from their sidecar.
    pub fn load_samples(&self, name: &str) -> Result<(Tensor, Vec<usize>)> {
        let dir = self.stage_dir(Stage::Sample);
        let (t, side) = load_array(&dir, name)?;
        let ids: Vec<usize> = serde_json::from_value(side.meta["case_ids"].clone())?;
        if t.shape().len() != 3 || t.shape()[0] != ids.len() {
            return Err(Error::Artifact {
                path: dir.join(format!("{name}.json")),
                reason: format!(
                    "expected shape [{}, M, d], found {:?}",
                    ids.len(),
                    t.shape()
                ),
            });
        }
        Ok((t, ids))
    }

    pub fn load_report(&self, stage: Stage, label: &str) -> Result<MetricReport> {
        read_json(&self.stage_dir(stage).join(format!("{label}.report.json")))
    }
}

/// `cases × M × d` block for case position `k`.
pub fn case_block(samples: &Tensor, k: usize) -> Tensor {
    let (m, d) = (samples.shape()[1], samples.shape()[2]);
    let data = samples.data()[k * m * d..(k + 1) * m * d].to_vec();
    Tensor::matrix(m, d, data).expect("block shape")
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Normalized reservoir fields used for training and conditioning.
struct ResFields {
    g: Tensor,
    g_norm: MinMax,
    conditions: BTreeMap<Condition, (Tensor, MinMax)>,
}

impl ResFields {
    fn new(ds: &ResDataset, conditions: &[Condition]) -> Result<Self> {
        let g_norm = MinMax::fit_global(&ds.g.select_rows(&ds.train_ids))?;
        let mut map = BTreeMap::new();
        for &c in conditions {
            map.insert(c, Self::raw_condition(ds, c));
        }
        Ok(Self {
            g: g_norm.apply(&ds.g)?,
            g_norm,
            conditions: map,
        })
    }

    /// Raw condition rows (saturation already clipped) and their normalization.
    fn raw_condition(ds: &ResDataset, c: Condition) -> (Tensor, MinMax) {
        match c {
            Condition::F1 => {
                let f = ds.oil_cuts(1);
                let cols = f.cols();
                (f, MinMax::fixed(0.0, 1.0, cols))
            }
            Condition::F1to5 => {
                let f = ds.f.clone();
                let cols = f.cols();
                (f, MinMax::fixed(0.0, 1.0, cols))
            }
            Condition::Saturation => {
                let s = clip_saturation(&ds.s);
                let cols = s.cols();
                (s, MinMax::fixed(0.2, 0.8, cols))
            }
        }
    }

    fn normalized(&self, c: Condition) -> Result<Tensor> {
        let (raw, norm) = &self.conditions[&c];
        norm.apply(raw)
    }
}

struct StageCtx<'a> {
    p: &'a Pipeline,
    stage: Stage,
    dir: &'a Path,
    inputs: &'a BTreeMap<String, String>,
}

impl StageCtx<'_> {
    fn cfg(&self) -> &ExperimentConfig {
        &self.p.cfg
    }

    /// Content ids of the artifacts under `prefixes` that this stage depends
    /// on, directly or through upstream stages. Files sharing a stem (for
    /// example `csgan/ko.*`) form one artifact whose id hashes all of them.
    fn provenance(&self, prefixes: &[&str]) -> Result<Provenance> {
        let mut files = self.inputs.clone();
        for &up in self.stage.upstream() {
            files.extend(self.p.load_manifest(up)?.inputs);
        }
        let mut groups: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        for (path, hash) in files {
            if !prefixes.iter().any(|p| path.starts_with(p)) {
                continue;
            }
            let split = path.rfind('/').map_or(0, |i| i + 1);
            let stem_end = path[split..].find('.').map_or(path.len(), |i| split + i);
            groups
                .entry(path[..stem_end].to_string())
                .or_default()
                .push((path, hash));
        }
        let checkpoints = groups
            .into_iter()
            .map(|(k, v)| Ok((k, sha256_hex(&serde_json::to_vec(&v)?))))
            .collect::<Result<_>>()?;
        Ok(Provenance {
            config_hash: self.p.config_hash.clone(),
            seed: self.cfg().seed,
            checkpoints,
        })
    }

    fn generate_ko(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg().ko.seed);
        let ds = build_ko_dataset(&self.cfg().ko, &mut rng)?;
        save_ko_dataset(self.dir, &ds)
    }

    fn generate_res(&self) -> Result<()> {
        let ds = generate_reservoir_batch(&self.cfg().reservoir)?;
        let checks = reservoir_checks(&ds);
        save_res_dataset(self.dir, &ds)?;
        write_json(&self.dir.join("res_checks.json"), &checks)?;
        validate_reservoir_checks(&checks)
    }

    /// Training rows of each autoencoder input, keyed by name.
    fn lvae_inputs(&self) -> Result<Vec<(String, Tensor, Tensor)>> {
        match self.cfg().kind {
            ExperimentKind::Ko => {
                let ds = self.p.load_ko()?;
                Ok(vec![(
                    "y1".into(),
                    ds.y1.select_rows(&ds.train_ids),
                    ds.y1.select_rows(&ds.test_ids),
                )])
            }
            ExperimentKind::Reservoir => {
                let ds = self.p.load_res()?;
                let f = ResFields::new(&ds, &self.cfg().conditions)?;
                let mut out = vec![(
                    "g".to_string(),
                    f.g.select_rows(&ds.train_ids),
                    f.g.select_rows(&ds.test_ids),
                )];
                for &c in &self.cfg().conditions {
                    let y = f.normalized(c)?;
                    out.push((
                        c.tag().to_string(),
                        y.select_rows(&ds.train_ids),
                        y.select_rows(&ds.test_ids),
                    ));
                }
                Ok(out)
            }
        }
    }

    fn train_lvae(&self) -> Result<()> {
        for (name, train, _) in self.lvae_inputs()? {
            let mut lv = self.cfg().lvae.clone();
            lv.seed = derive_seed(lv.seed, &name);
            info!("training LVAE {name} on {:?}", train.shape());
            let run = train_lvae(&train, &lv)?;
            if let Some(epoch) = run.diverged_at {
                return Err(Error::Diverged { epoch });
            }
            save_ae(&run.model, self.dir, &name, lv.epochs as u64)?;
            write_json(&self.dir.join(format!("{name}.log.json")), &run.log)?;
        }
        Ok(())
    }

    fn prune(&self) -> Result<()> {
        let lvae_dir = self.p.stage_dir(Stage::TrainLvae);
        for (name, train, test) in self.lvae_inputs()? {
            let model = load_ae(&lvae_dir.join(format!("{name}.json")))?;
            if model.data_dim() != train.cols() {
                return Err(Error::Artifact {
                    path: lvae_dir.join(format!("{name}.json")),
                    reason: format!(
                        "autoencoder expects {}-D input, dataset has {}",
                        model.data_dim(),
                        train.cols()
                    ),
                });
            }
            let (pruned, report) = prune(&model, &train, self.cfg().prune.delta)?;
            let test_bound = prune_bound_check(&pruned, &test)?;
            info!(
                "pruned {name}: kept {} of {} dims, {} bound violations on test rows",
                report.kept_indices.len(),
                model.latent_dim,
                test_bound.violations
            );
            save_ae(&pruned, self.dir, &name, self.cfg().lvae.epochs as u64)?;
            write_json(
                &self.dir.join(format!("{name}.prune.json")),
                &PruneRecord { report, test_bound },
            )?;
        }
        Ok(())
    }

    fn pruned(&self, name: &str) -> Result<crate::lvae::AEModel> {
        load_ae(&self.p.stage_dir(Stage::Prune).join(format!("{name}.json")))
    }

    fn train_csgan(&self) -> Result<()> {
        let cfg = self.cfg();
        match cfg.kind {
            ExperimentKind::Ko => {
                let ds = self.p.load_ko()?;
                let (xi, y1) = ds.train();
                let condition = LatentCodec::lvae(self.pruned("y1")?, &y1)?;
                let data = LatentCodec::Identity { dim: 2 };
                self.fit_posterior(
                    "ko",
                    cfg.csgan.clone(),
                    (condition, ds.y1_norm.clone(), &y1, "y1"),
                    (data, ds.xi_norm.clone(), &xi, None),
                    &ds.train_ids,
                )
            }
            ExperimentKind::Reservoir => {
                let ds = self.p.load_res()?;
                let f = ResFields::new(&ds, &cfg.conditions)?;
                let g = f.g.select_rows(&ds.train_ids);
                let data = LatentCodec::lvae(self.pruned("g")?, &g)?;
                for &c in &cfg.conditions {
                    let y = f.normalized(c)?.select_rows(&ds.train_ids);
                    let condition = LatentCodec::lvae(self.pruned(c.tag())?, &y)?;
                    let mut cc = cfg.csgan.clone();
                    cc.seed = derive_seed(cc.seed, c.tag());
                    self.fit_posterior(
                        c.tag(),
                        cc,
                        (condition, f.conditions[&c].1.clone(), &y, c.tag()),
                        (data.clone(), f.g_norm.clone(), &g, Some("g")),
                        &ds.train_ids,
                    )?;
                }
                Ok(())
            }
        }
    }

    /// Trains one CSGAN on encoded training rows and writes its link file.
    fn fit_posterior(
        &self,
        label: &str,
        cc: CsganConfig,
        (condition, condition_norm, y, y_name): (LatentCodec, MinMax, &Tensor, &str),
        (data, data_norm, x, x_name): (LatentCodec, MinMax, &Tensor, Option<&str>),
        ids: &[usize],
    ) -> Result<()> {
        let pairs = LatentPairSet::new(data.encode(x)?, condition.encode(y)?, ids.to_vec())?;
        info!(
            "training CSGAN {label}: z_x {}-D, z_y {}-D, {} pairs",
            pairs.z_x.cols(),
            pairs.z_y.cols(),
            pairs.len()
        );
        let run = train_csgan(&pairs, &cc)?;
        let mut trace = String::from("step,epoch,divergence,converged\n");
        for t in &run.trace {
            trace.push_str(&format!(
                "{},{},{:e},{}\n",
                t.step, t.epoch, t.divergence, t.converged
            ));
        }
        write_text(&self.dir.join(format!("{label}.trace.csv")), &trace)?;
        let link = GeneratorLink {
            generator: String::new(),
            dim_u: run.generator.dim_u,
            condition_lvae: Some(format!("../pruned/{y_name}.json")),
            condition_latent_norm: None,
            condition_dim: condition.latent_dim(),
            condition_norm: condition_norm.clone(),
            data_lvae: x_name.map(|n| format!("../pruned/{n}.json")),
            data_latent_norm: None,
            data_dim: data.latent_dim(),
            data_norm: data_norm.clone(),
            condition_weight: cc.condition_weight,
            rho: cc.rho,
            cost: cc.cost,
        };
        let model = PosteriorModel {
            condition,
            condition_norm,
            generator: run.generator,
            data,
            data_norm,
        };
        save_posterior(self.dir, label, &model, &link, run.trace.len() as u64)?;
        Ok(())
    }

    fn sample(&self) -> Result<()> {
        let cfg = self.cfg();
        let s = &cfg.sampling;
        let (test_ids, raw_conditions): (Vec<usize>, BTreeMap<String, Tensor>) = match cfg.kind {
            ExperimentKind::Ko => {
                let ds = self.p.load_ko()?;
                (
                    ds.test_ids.clone(),
                    BTreeMap::from([("ko".to_string(), ds.y1_raw()?)]),
                )
            }
            ExperimentKind::Reservoir => {
                let ds = self.p.load_res()?;
                let map = cfg
                    .conditions
                    .iter()
                    .map(|&c| (c.tag().to_string(), ResFields::raw_condition(&ds, c).0))
                    .collect();
                (ds.test_ids.clone(), map)
            }
        };
        let ids = self.p.case_ids(&test_ids);
        let n_post = match cfg.kind {
            ExperimentKind::Ko => s.n_heatmap,
            ExperimentKind::Reservoir => s.n_metric,
        };
        for label in self.p.posterior_labels() {
            let model = self.p.load_posterior(&label)?;
            let y = &raw_conditions[&label];
            if y.cols() != model.condition_norm.dim() {
                return Err(Error::Artifact {
                    path: self
                        .p
                        .stage_dir(Stage::TrainCsgan)
                        .join(format!("{label}.link.json")),
                    reason: format!(
                        "posterior expects {}-D conditions, dataset has {}",
                        model.condition_norm.dim(),
                        y.cols()
                    ),
                });
            }
            let seed = derive_seed(cfg.seed, &format!("sample:{label}"));
            let (mut post, mut latent) = (Vec::new(), Vec::new());
            for &id in &ids {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(id as u64);
                post.extend(posterior_sample(y.row(id), n_post, &model, &mut rng)?.into_data());
                latent.extend(
                    posterior_latent_sample(y.row(id), s.n_entropy, &model, &mut rng)?.into_data(),
                );
            }
            let dx = model.data_norm.dim();
            let dz = model.generator.dim_x();
            let meta = |space: &str| {
                serde_json::json!({
                    "case_ids": ids,
                    "label": label,
                    "space": space,
                })
            };
            let post = Tensor::new(vec![ids.len(), n_post, dx], post)?;
            save_array(self.dir, &format!("{label}_post"), &post, &[], meta("raw"))?;
            let latent = Tensor::new(vec![ids.len(), s.n_entropy, dz], latent)?;
            save_array(
                self.dir,
                &format!("{label}_latent"),
                &latent,
                &[],
                meta("latent"),
            )?;
        }
        Ok(())
    }

    fn write_report(&self, label: &str, report: &MetricReport) -> Result<()> {
        write_text(&self.dir.join(format!("{label}.csv")), &report.to_csv())?;
        write_json(&self.dir.join(format!("{label}.report.json")), report)
    }

    fn metrics_ko(&self) -> Result<()> {
        let ds = self.p.load_ko()?;
        let xi = ds.xi_raw()?;
        let (post, ids) = self.p.load_samples("ko_post")?;
        let per_case = ko_case_metrics(&post, &ids, &xi, &self.cfg().bimodal)?;
        let report = MetricReport::new(
            "ko",
            per_case,
            BTreeMap::from([("cases".to_string(), ids.len() as f64)]),
            self.provenance(&[
                "dataset/ko_xi",
                "samples/ko_post.",
                "csgan/ko.",
                "pruned/y1.",
            ])?,
        )?;
        self.write_report("ko", &report)
    }

    fn metrics_res(&self) -> Result<()> {
        let cfg = self.cfg();
        let ds = self.p.load_res()?;
        let grid = ds.config.grid()?;
        let wells = WellSet::standard(&grid, ds.config.ir);
        let truth_s = clip_saturation(&ds.s);
        for &c in &cfg.conditions {
            let label = c.tag();
            let (post, ids) = self.p.load_samples(&format!("{label}_post"))?;
            let pooled: Vec<f64> = ids.iter().flat_map(|&id| ds.g.row(id).to_vec()).collect();
            let scale_g = length_scale(&pooled, ScaleMode::Pooled)?;
            let scale_s = length_scale(&pooled, ScaleMode::Saturation)?;
            let mut per_case = Vec::with_capacity(ids.len());
            for (k, &id) in ids.iter().enumerate() {
                let preds = case_block(&post, k);
                let mut values = res_field_metrics(&preds, ds.g.row(id), scale_g)?;
                let n_fwd = cfg.sampling.forward_samples.min(preds.rows());
                if n_fwd > 0 {
                    let (mut es, mut ef) = (0.0, 0.0);
                    for r in 0..n_fwd {
                        let g = Tensor::matrix(grid.ny, grid.nx, preds.row(r).to_vec())?;
                        let out = simulate(
                            &g,
                            ds.config.kl.kappa0,
                            &grid,
                            &ds.config.fluid,
                            &wells,
                            &ds.config.sim,
                        )?;
                        es += relative_error(
                            clip_saturation(&out.s_oil).data(),
                            truth_s.row(id),
                            scale_s,
                        )?;
                        ef += relative_error(out.oil_cut.data(), ds.f.row(id), 1.0)?;
                    }
                    values.insert("s_forward_error".into(), es / n_fwd as f64);
                    values.insert("f_forward_error".into(), ef / n_fwd as f64);
                }
                per_case.push(CaseMetrics { case: id, values });
            }
            let report = MetricReport::new(
                label,
                per_case,
                BTreeMap::from([
                    ("length_scale_g".to_string(), scale_g),
                    ("length_scale_s".to_string(), scale_s),
                    ("cases".to_string(), ids.len() as f64),
                ]),
                self.provenance(&[
                    "dataset/res_g",
                    "dataset/res_s",
                    "dataset/res_f",
                    &format!("samples/{label}_post."),
                    &format!("csgan/{label}."),
                    "pruned/g.",
                    &format!("pruned/{label}."),
                ])?,
            )?;
            self.write_report(label, &report)?;
        }
        Ok(())
    }

    fn entropy(&self) -> Result<()> {
        let spec = self.cfg().entropy;
        for label in self.p.posterior_labels() {
            let name = format!("{label}_latent");
            let (latent, ids) = self.p.load_samples(&name)?;
            let cases: Vec<Tensor> = (0..ids.len()).map(|k| case_block(&latent, k)).collect();
            let mut report = entropy_report(&cases, &spec)?;
            for (c, &id) in report.cases.iter_mut().zip(&ids) {
                c.case = id;
            }
            write_text(&self.dir.join(format!("{label}.csv")), &report.to_csv())?;
            let per_case = report
                .cases
                .iter()
                .map(|c| CaseMetrics {
                    case: c.case,
                    values: BTreeMap::from([("entropy".to_string(), c.entropy)]),
                })
                .collect();
            let metric = MetricReport::new(
                label.as_str(),
                per_case,
                BTreeMap::from([
                    ("k".to_string(), spec.k as f64),
                    ("d".to_string(), latent.shape()[2] as f64),
                ]),
                self.provenance(&[&format!("samples/{name}."), &format!("csgan/{label}.")])?,
            )?;
            write_json(&self.dir.join(format!("{label}.report.json")), &metric)?;
        }
        Ok(())
    }
}

/// Min-ℓ2 error per case plus the bimodality indicator where it applies.
pub fn ko_case_metrics(
    post: &Tensor,
    ids: &[usize],
    xi_raw: &Tensor,
    bimodal: &super::config::BimodalConfig,
) -> Result<Vec<CaseMetrics>> {
    let mut out = Vec::with_capacity(ids.len());
    for (k, &id) in ids.iter().enumerate() {
        let preds = case_block(post, k);
        let truth = xi_raw.row(id);
        let err = min_l2_error(&preds, truth)?;
        let mut values = BTreeMap::from([("min_l2".to_string(), err)]);
        if truth[0].abs() > bimodal.min_abs_xi1 {
            let mirror = [-truth[0], truth[1]];
            let hit = err < bimodal.radius && min_l2_error(&preds, &mirror)? < bimodal.radius;
            values.insert("bimodal".into(), if hit { 1.0 } else { 0.0 });
        }
        out.push(CaseMetrics { case: id, values });
    }
    Ok(out)
}

/// Mean relative error of the predictions and their relative variation.
pub fn res_field_metrics(
    preds: &Tensor,
    truth: &[f64],
    scale: f64,
) -> Result<BTreeMap<String, f64>> {
    let mut err = 0.0;
    for r in preds.rows_iter() {
        err += relative_error(r, truth, scale)?;
    }
    Ok(BTreeMap::from([
        ("g_error".to_string(), err / preds.rows() as f64),
        ("g_variation".to_string(), relative_variation(preds, scale)?),
    ]))
}

pub fn reservoir_checks(ds: &ResDataset) -> ReservoirChecks {
    let b = &ds.balance;
    let fold = |f: fn(&crate::resim::BalanceLog) -> f64, init: f64, op: fn(f64, f64) -> f64| {
        b.iter().map(f).fold(init, op)
    };
    let n_report = ds.n_report();
    let producers = ds.f.cols() / n_report.max(1);
    let first_cut =
        ds.f.rows_iter()
            .flat_map(|r| (0..producers).map(move |p| r[p * n_report]))
            .fold(f64::INFINITY, f64::min);
    ReservoirChecks {
        max_step_residual: fold(|l| l.max_step_residual, 0.0, f64::max),
        max_injector_error: fold(|l| l.max_injector_error, 0.0, f64::max),
        min_water_saturation: fold(|l| l.min_saturation, f64::INFINITY, f64::min),
        max_water_saturation: fold(|l| l.max_saturation, f64::NEG_INFINITY, f64::max),
        s_max: ds.config.fluid.s_max(),
        min_first_report_oil_cut: first_cut,
        samples: b.len(),
    }
}

pub fn validate_reservoir_checks(c: &ReservoirChecks) -> Result<()> {
    let mut problems = Vec::new();
    if !(c.max_step_residual < RESIDUAL_LIMIT) {
        problems.push(format!("mass-balance residual {:e}", c.max_step_residual));
    }
    if !(c.max_injector_error < RESIDUAL_LIMIT) {
        problems.push(format!("injector error {:e}", c.max_injector_error));
    }
    if !(c.min_water_saturation >= 0.0 && c.max_water_saturation <= c.s_max) {
        problems.push(format!(
            "saturation range [{}, {}] outside [0, {}]",
            c.min_water_saturation, c.max_water_saturation, c.s_max
        ));
    }
    if !(c.min_first_report_oil_cut == 1.0) {
        problems.push(format!(
            "first-report oil cut {} below 1",
            c.min_first_report_oil_cut
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Aborted(format!(
            "reservoir invariants violated: {}",
            problems.join("; ")
        )))
    }
}

/// Loads the config at `path` and runs its stages into `paths.out`.
pub fn run_pipeline(path: &Path) -> Result<Vec<StageOutcome>> {
    Pipeline::from_config(ExperimentConfig::from_path(path)?)?.run_all()
}

/// KSG entropy of one stored case, recomputed from the samples file.
pub fn recompute_case_entropy(
    samples: &Tensor,
    k: usize,
    spec: &crate::ksgent::EntropySpec,
) -> Result<f64> {
    ksg_entropy(&case_block(samples, k), spec)
}
