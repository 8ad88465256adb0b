//! Experiment configuration: TOML (or JSON) layered over per-kind defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::csgan::CsganConfig;
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::kosys::KoConfig;
use crate::ksgent::EntropySpec;
use crate::lvae::LvConfig;
use crate::resim::ResConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Ko,
    Reservoir,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Ko => "ko",
            ExperimentKind::Reservoir => "reservoir",
        }
    }
}

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generate,
    TrainLvae,
    Prune,
    TrainCsgan,
    Sample,
    Metrics,
    Entropy,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::TrainLvae,
        Stage::Prune,
        Stage::TrainCsgan,
        Stage::Sample,
        Stage::Metrics,
        Stage::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::TrainLvae => "train-lvae",
            Stage::Prune => "prune",
            Stage::TrainCsgan => "train-csgan",
            Stage::Sample => "sample",
            Stage::Metrics => "metrics",
            Stage::Entropy => "entropy",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Generate => &[],
            Stage::TrainLvae => &[Stage::Generate],
            Stage::Prune => &[Stage::Generate, Stage::TrainLvae],
            Stage::TrainCsgan => &[Stage::Generate, Stage::Prune],
            Stage::Sample => &[Stage::Generate, Stage::Prune, Stage::TrainCsgan],
            Stage::Metrics => &[Stage::Generate, Stage::Sample],
            Stage::Entropy => &[Stage::Sample],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Observation used to condition the reservoir posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    /// Oil cut of the first producer.
    #[serde(rename = "f1")]
    F1,
    /// Oil cuts of all five producers.
    #[serde(rename = "f1:5")]
    F1to5,
    /// Final oil-saturation field.
    #[serde(rename = "s")]
    Saturation,
}

impl Condition {
    /// File-name tag.
    pub fn tag(self) -> &'static str {
        match self {
            Condition::F1 => "f1",
            Condition::F1to5 => "f1_5",
            Condition::Saturation => "s",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub delta: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { delta: 0.05 }
    }
}

/// Per-case sampling counts and the test-case subset size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Predictions per case for field error and variation.
    pub n_metric: usize,
    /// Predictions per case for KO posterior scatter and min-ℓ2 error.
    pub n_heatmap: usize,
    /// Predictions per case fed to the entropy estimator.
    pub n_entropy: usize,
    /// Test cases evaluated; a seeded random subset when fewer than available.
    pub test_cases: usize,
    /// Reservoir predictions per case re-simulated for the forward check.
    pub forward_samples: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_metric: 50,
            n_heatmap: 100,
            n_entropy: 1000,
            test_cases: 1000,
            forward_samples: 5,
        }
    }
}

/// KO bimodality check: cases with `|ξ₁| > min_abs_xi1` count as bimodal when
/// samples fall within `radius` of both `(ξ₁, ξ₂)` and `(−ξ₁, ξ₂)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BimodalConfig {
    pub min_abs_xi1: f64,
    pub radius: f64,
}

impl Default for BimodalConfig {
    fn default() -> Self {
        Self {
            min_abs_xi1: 0.03,
            radius: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Output directory; relative paths resolve against the working directory.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
        }
    }
}

/// One experiment. Sub-block `seed` fields are derived from `seed` on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Stages run by [`run_pipeline`](super::run_pipeline), in this order.
    pub stages: Vec<Stage>,
    pub paths: Paths,
    pub ko: KoConfig,
    pub reservoir: ResConfig,
    pub conditions: Vec<Condition>,
    pub lvae: LvConfig,
    pub prune: PruneConfig,
    pub csgan: CsganConfig,
    pub sampling: SamplingConfig,
    pub bimodal: BimodalConfig,
    pub entropy: EntropySpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::defaults(ExperimentKind::Ko)
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for one experiment kind.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let (lvae, csgan) = match kind {
            ExperimentKind::Ko => (
                LvConfig {
                    latent_dim: 16,
                    hidden: vec![128, 128],
                    epochs: 300,
                    ramp_epochs: 100,
                    lr: 1e-3,
                    lambda_final: 0.2,
                    eta: 0.004,
                    batch: 64,
                    ..LvConfig::default()
                },
                CsganConfig {
                    rho: 0.05,
                    epochs: 600,
                    batch: 128,
                    lr: 3e-4,
                    dim_u: Some(2),
                    hidden: vec![128, 128],
                    ..CsganConfig::default()
                },
            ),
            ExperimentKind::Reservoir => (
                LvConfig {
                    latent_dim: 32,
                    hidden: vec![256, 128],
                    epochs: 300,
                    ramp_epochs: 100,
                    lr: 1e-3,
                    lambda_final: 0.2,
                    eta: 0.004,
                    batch: 50,
                    ..LvConfig::default()
                },
                CsganConfig {
                    rho: 0.02,
                    epochs: 300,
                    batch: 128,
                    lr: 3e-4,
                    dim_u: None,
                    hidden: vec![128, 128],
                    ..CsganConfig::default()
                },
            ),
        };
        Self {
            kind,
            seed: 0,
            stages: Stage::ALL.to_vec(),
            paths: Paths {
                out: PathBuf::from("runs").join(kind.name()),
            },
            ko: KoConfig::default(),
            reservoir: ResConfig::default(),
            conditions: vec![Condition::F1, Condition::F1to5, Condition::Saturation],
            lvae,
            prune: PruneConfig::default(),
            csgan,
            sampling: SamplingConfig::default(),
            bimodal: BimodalConfig::default(),
            entropy: EntropySpec::default(),
        }
    }

    /// Parses TOML, or JSON when the text starts with `{`. Keys absent from
    /// the text keep the defaults of the declared `kind`.
    pub fn from_str_any(text: &str) -> Result<Self> {
        let user: Value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        let kind = match user.get("kind") {
            Some(k) => serde_json::from_value(k.clone())
                .map_err(|e| Error::Config(format!("kind: {e}")))?,
            None => return Err(Error::Config("missing required key `kind`".into())),
        };
        let mut merged = serde_json::to_value(Self::defaults(kind))?;
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_any(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Replaces the top-level seed and re-derives every sub-block seed.
    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.resolved()
    }

    fn resolved(mut self) -> Result<Self> {
        self.ko.seed = derive_seed(self.seed, "ko");
        self.reservoir.seed = derive_seed(self.seed, "reservoir");
        self.lvae.seed = derive_seed(self.seed, "lvae");
        self.csgan.seed = derive_seed(self.seed, "csgan");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.lvae.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.prune.delta >= 0.0) {
            return bad(format!("prune.delta must be ≥ 0, got {}", self.prune.delta));
        }
        if !(self.csgan.rho > 0.0) {
            return bad(format!(
                "csgan.rho must be positive, got {}",
                self.csgan.rho
            ));
        }
        let s = &self.sampling;
        if s.n_metric < 2 || s.n_heatmap == 0 || s.n_entropy <= self.entropy.k || s.test_cases == 0
        {
            return bad(format!(
                "sampling counts need n_metric ≥ 2, n_heatmap ≥ 1, n_entropy > k, test_cases ≥ 1; got {s:?}"
            ));
        }
        if self.kind == ExperimentKind::Reservoir && self.conditions.is_empty() {
            return bad("reservoir experiments need at least one condition".into());
        }
        let mut sorted = self.stages.clone();
        sorted.dedup();
        if sorted.len() != self.stages.len() || sorted.windows(2).any(|w| w[0] > w[1]) {
            return bad(format!(
                "stages must be distinct and in pipeline order, got {:?}",
                self.stages
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }

    /// Canonical JSON of the blocks a stage depends on directly.
    pub(crate) fn stage_inputs(&self, stage: Stage) -> Result<Value> {
        let v = serde_json::json!({
            "stage": stage.name(),
            "kind": self.kind,
            "seed": self.seed,
        });
        let extra = match stage {
            Stage::Generate => match self.kind {
                ExperimentKind::Ko => serde_json::json!({ "ko": self.ko }),
                ExperimentKind::Reservoir => serde_json::json!({ "reservoir": self.reservoir }),
            },
            Stage::TrainLvae => {
                serde_json::json!({ "lvae": self.lvae, "conditions": self.conditions })
            }
            Stage::Prune => serde_json::json!({ "prune": self.prune }),
            Stage::TrainCsgan => serde_json::json!({ "csgan": self.csgan }),
            Stage::Sample => serde_json::json!({ "sampling": self.sampling }),
            Stage::Metrics => {
                serde_json::json!({ "sampling": self.sampling, "bimodal": self.bimodal })
            }
            Stage::Entropy => serde_json::json!({ "entropy": self.entropy }),
        };
        Ok(serde_json::json!({ "common": v, "block": extra }))
    }
}

/// Recursive object merge; non-object values in `patch` replace `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Independent seed for a named consumer of the experiment seed. Kept below
/// 2⁶³ so resolved configs still serialize to TOML integers.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(tag.as_bytes());
    let h = sha256_hex(&bytes);
    u64::from_str_radix(&h[..16], 16).expect("hex digest") >> 1
}
