//! Command-line front end for the staged experiment pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_csgan::bench::{ExperimentConfig, ExperimentKind, Pipeline, Stage};
use latent_csgan::Error;

#[derive(Parser)]
#[command(name = "lvcsgan", version, about = "Latent CSGAN experiment stages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML, or JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the KO dataset.
    GenerateKo(Common),
    /// Simulate the reservoir dataset.
    GenerateRes(Common),
    /// Train the least-volume autoencoders.
    TrainLvae(Common),
    /// Drop near-constant latent dimensions.
    Prune(Common),
    /// Train the latent conditional generators.
    TrainCsgan(Common),
    /// Draw posterior samples for the test cases.
    SamplePosterior(Common),
    /// Score the stored posterior samples.
    Metrics(Common),
    /// Per-case k-NN entropy of the latent samples.
    Entropy(Common),
}

impl Command {
    fn split(&self) -> (&Common, Stage, Option<ExperimentKind>) {
        match self {
            Command::GenerateKo(c) => (c, Stage::Generate, Some(ExperimentKind::Ko)),
            Command::GenerateRes(c) => (c, Stage::Generate, Some(ExperimentKind::Reservoir)),
            Command::TrainLvae(c) => (c, Stage::TrainLvae, None),
            Command::Prune(c) => (c, Stage::Prune, None),
            Command::TrainCsgan(c) => (c, Stage::TrainCsgan, None),
            Command::SamplePosterior(c) => (c, Stage::Sample, None),
            Command::Metrics(c) => (c, Stage::Metrics, None),
            Command::Entropy(c) => (c, Stage::Entropy, None),
        }
    }
}

fn run(cmd: &Command) -> Result<serde_json::Value, Error> {
    let (common, stage, kind) = cmd.split();
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed)?;
    }
    if let Some(k) = kind {
        if cfg.kind != k {
            return Err(Error::Config(format!(
                "{} config cannot run {}",
                cfg.kind.name(),
                match k {
                    ExperimentKind::Ko => "generate-ko",
                    ExperimentKind::Reservoir => "generate-res",
                }
            )));
        }
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
    let pipeline = Pipeline::new(cfg, &out)?;
    let outcome = pipeline.run(stage)?;
    Ok(serde_json::json!({
        "stage": stage.name(),
        "cached": outcome.cached,
        "manifest": pipeline.manifest_path(stage),
        "outputs": outcome.manifest.outputs.len(),
    }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let path = match &e {
                Error::Artifact { path, .. } | Error::Io { path, .. } => {
                    Some(path.display().to_string())
                }
                _ => None,
            };
            let report = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "path": path,
            });
            eprintln!("{report}");
            ExitCode::from(2)
        }
    }
}
