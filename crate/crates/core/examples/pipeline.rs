//! Runs a staged experiment from a config file and prints where each stage
//! wrote its manifest. Reruns reuse every stage whose inputs are unchanged.
//!
//! `cargo run --release --example pipeline -- crates/core/examples/configs/ko_quick.toml /tmp/ko_quick`

use std::path::PathBuf;

use latent_csgan::bench::{ExperimentConfig, Pipeline, Stage};

fn main() -> latent_csgan::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args.next().map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/examples/configs/ko_quick.toml"
        ))
    });
    let cfg = ExperimentConfig::from_path(&config)?;
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.paths.out.clone());
    let pipeline = Pipeline::new(cfg, out)?;
    for outcome in pipeline.run_all()? {
        println!(
            "{:<12} {:<7} {}",
            outcome.stage.name(),
            if outcome.cached { "cached" } else { "ran" },
            pipeline.manifest_path(outcome.stage).display()
        );
    }
    for label in pipeline.posterior_labels() {
        let stage = Stage::Metrics;
        if let Ok(report) = pipeline.load_report(stage, &label) {
            for (name, s) in &report.summary {
                println!("{label}: {name} mean {:.4}, median {:.4}", s.mean, s.median);
            }
        }
    }
    Ok(())
}
