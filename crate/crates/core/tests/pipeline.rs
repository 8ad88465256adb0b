//! Small end-to-end runs of both experiments through the staged pipeline.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use latent_csgan::bench::pipeline::{
    case_block, ko_case_metrics, recompute_case_entropy, res_field_metrics, PruneRecord,
    ReservoirChecks,
};
use latent_csgan::bench::{length_scale, ExperimentConfig, Pipeline, ScaleMode, Stage};
use latent_csgan::io::read_json;
use latent_csgan::Error;
use tempfile::TempDir;

const KO_TINY: &str = r#"
kind = "ko"
seed = 1
[ko]
n = 96
n_train = 64
[lvae]
epochs = 20
ramp_epochs = 10
[csgan]
epochs = 5
batch = 32
[sampling]
n_entropy = 50
"#;

const RES_TINY: &str = r#"
kind = "reservoir"
seed = 4
[reservoir]
n = 30
n_train = 20
[lvae]
epochs = 10
ramp_epochs = 5
[csgan]
epochs = 5
batch = 10
[sampling]
n_entropy = 50
n_metric = 10
forward_samples = 2
"#;

fn run(text: &str) -> (TempDir, Pipeline) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_str_any(text).unwrap();
    let p = Pipeline::new(cfg, dir.path()).unwrap();
    let outcomes = p.run_all().unwrap();
    assert!(outcomes.iter().all(|o| !o.cached));
    (dir, p)
}

fn ko() -> &'static (TempDir, Pipeline) {
    static KO: OnceLock<(TempDir, Pipeline)> = OnceLock::new();
    KO.get_or_init(|| run(KO_TINY))
}

fn res() -> &'static (TempDir, Pipeline) {
    static RES: OnceLock<(TempDir, Pipeline)> = OnceLock::new();
    RES.get_or_init(|| run(RES_TINY))
}

/// Copies a finished run so a test can damage it without affecting others.
fn fork(src: &Path, text: &str) -> (TempDir, Pipeline) {
    let dir = tempfile::tempdir().unwrap();
    copy_tree(src, dir.path());
    let p = Pipeline::new(ExperimentConfig::from_str_any(text).unwrap(), dir.path()).unwrap();
    (dir, p)
}

fn copy_tree(src: &Path, dst: &Path) {
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            std::fs::create_dir_all(&to).unwrap();
            copy_tree(&entry.path(), &to);
        } else {
            std::fs::copy(entry.path(), to).unwrap();
        }
    }
}

#[test]
fn ko_run_produces_every_stage() {
    let (_, p) = ko();
    for stage in Stage::ALL {
        let m = p.load_manifest(stage).unwrap();
        assert_eq!(m.stage, stage);
        assert!(!m.outputs.is_empty(), "{stage} has no outputs");
    }
    let (post, ids) = p.load_samples("ko_post").unwrap();
    assert_eq!(post.shape(), &[32, 100, 2]);
    assert_eq!(ids.len(), 32);
    let report = p.load_report(Stage::Metrics, "ko").unwrap();
    assert_eq!(report.column("min_l2").len(), 32);
    let csv = std::fs::read_to_string(p.stage_dir(Stage::Metrics).join("ko.csv")).unwrap();
    assert!(csv.starts_with("case,"));
    assert_eq!(csv.lines().count(), 33);
    let rec: PruneRecord = read_json(&p.stage_dir(Stage::Prune).join("y1.prune.json")).unwrap();
    assert!(!rec.report.kept_indices.is_empty());
}

#[test]
fn second_run_is_fully_cached() {
    let (_, p) = ko();
    let again = p.run_all().unwrap();
    assert!(again.iter().all(|o| o.cached));
}

#[test]
fn reservoir_run_passes_physics_checks() {
    let (_, p) = res();
    let checks: ReservoirChecks =
        read_json(&p.stage_dir(Stage::Generate).join("res_checks.json")).unwrap();
    assert_eq!(checks.samples, 30);
    assert!(checks.max_step_residual < 1e-8);
    assert!(checks.max_injector_error < 1e-8);
    assert_eq!(checks.min_first_report_oil_cut, 1.0);
    for label in ["f1", "f1_5", "s"] {
        let metrics = p.load_report(Stage::Metrics, label).unwrap();
        assert_eq!(
            metrics.metric_names(),
            [
                "f_forward_error",
                "g_error",
                "g_variation",
                "s_forward_error"
            ]
        );
        let entropy = p.load_report(Stage::Entropy, label).unwrap();
        assert_eq!(entropy.column("entropy").len(), 10);
    }
}

#[test]
fn ko_metrics_recompute_from_stored_samples() {
    let (_, p) = ko();
    let ds = p.load_ko().unwrap();
    let (post, ids) = p.load_samples("ko_post").unwrap();
    let fresh = ko_case_metrics(&post, &ids, &ds.xi_raw().unwrap(), &p.config().bimodal).unwrap();
    let stored = p.load_report(Stage::Metrics, "ko").unwrap();
    assert_eq!(fresh, stored.per_case);
}

#[test]
fn reservoir_metrics_recompute_from_stored_samples() {
    let (_, p) = res();
    let ds = p.load_res().unwrap();
    for label in ["f1", "f1_5", "s"] {
        let (post, ids) = p.load_samples(&format!("{label}_post")).unwrap();
        let pooled: Vec<f64> = ids.iter().flat_map(|&i| ds.g.row(i).to_vec()).collect();
        let scale = length_scale(&pooled, ScaleMode::Pooled).unwrap();
        let report = p.load_report(Stage::Metrics, label).unwrap();
        assert_eq!(report.globals["length_scale_g"], scale);
        for (k, case) in report.per_case.iter().enumerate() {
            let fresh =
                res_field_metrics(&case_block(&post, k), ds.g.row(case.case), scale).unwrap();
            for (name, v) in fresh {
                assert_eq!(case.values[&name], v, "{label} case {} {name}", case.case);
            }
        }
    }
}

#[test]
fn entropy_recomputes_from_stored_latents() {
    let (_, p) = res();
    let spec = p.config().entropy;
    for label in ["f1", "s"] {
        let (latent, ids) = p.load_samples(&format!("{label}_latent")).unwrap();
        let report = p.load_report(Stage::Entropy, label).unwrap();
        for (k, case) in report.per_case.iter().enumerate() {
            assert_eq!(case.case, ids[k]);
            let h = recompute_case_entropy(&latent, k, &spec).unwrap();
            assert_eq!(case.values["entropy"], h);
        }
    }
}

#[test]
fn stored_datasets_round_trip_through_normalization() {
    let ds = ko().1.load_ko().unwrap();
    let back = ds.xi_norm.apply(&ds.xi_raw().unwrap()).unwrap();
    let worst = back
        .data()
        .iter()
        .zip(ds.xi.data())
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(worst <= 1e-12, "xi round trip {worst:e}");
    let back = ds.y1_norm.apply(&ds.y1_raw().unwrap()).unwrap();
    let worst = back
        .data()
        .iter()
        .zip(ds.y1.data())
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(worst <= 1e-12, "y1 round trip {worst:e}");
}

#[test]
fn modified_input_fails_downstream_stage() {
    let (dir, p) = fork(ko().0.path(), KO_TINY);
    let data = p.stage_dir(Stage::Generate).join("ko_xi.f64");
    let mut bytes = std::fs::read(&data).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&data, bytes).unwrap();
    match p.run(Stage::Metrics) {
        Err(Error::Artifact { .. }) => {}
        other => panic!("expected artifact error, got {other:?}"),
    }
    drop(dir);
}

#[test]
fn missing_upstream_fails_fast() {
    let (_dir, p) = fork(ko().0.path(), KO_TINY);
    std::fs::remove_file(p.manifest_path(Stage::TrainCsgan)).unwrap();
    let err = p.run(Stage::Sample).unwrap_err();
    assert!(matches!(err, Error::Artifact { .. }), "{err:?}");
}

#[test]
fn changed_config_invalidates_cache() {
    let (_dir, p) = fork(
        ko().0.path(),
        &KO_TINY.replace("n_entropy = 50", "n_entropy = 40"),
    );
    let out = p.run(Stage::Sample).unwrap();
    assert!(!out.cached);
    assert_eq!(p.load_samples("ko_latent").unwrap().0.shape()[1], 40);
    assert!(p.run(Stage::TrainCsgan).unwrap().cached);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lvcsgan"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn cli_reports_errors_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ko.toml");
    std::fs::write(&cfg, KO_TINY).unwrap();
    let out_dir = dir.path().join("run");
    let out = dir.path().join("run").to_string_lossy().into_owned();

    let missing = cli(&["metrics", "--config", cfg.to_str().unwrap(), "--out", &out]);
    assert_eq!(missing.status.code(), Some(2));
    let err: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(err["error"], "artifact");

    let wrong_kind = cli(&[
        "generate-res",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        &out,
    ]);
    assert_eq!(wrong_kind.status.code(), Some(2));
    let err: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&wrong_kind.stderr).unwrap();
    assert_eq!(err["error"], "config");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "kind = \"ko\"\n[lvae]\nepochz = 3\n").unwrap();
    let parse = cli(&[
        "generate-ko",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        &out,
    ]);
    assert_eq!(parse.status.code(), Some(2));
    assert!(serde_json::from_slice::<serde_json::Value>(&parse.stderr).is_ok());
    assert!(!out_dir.join("manifests").exists());
}

#[test]
fn cli_generate_succeeds_and_caches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ko.toml");
    std::fs::write(&cfg, KO_TINY).unwrap();
    let out = dir.path().join("run").to_string_lossy().into_owned();
    let args = [
        "generate-ko",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        &out,
    ];
    let first = cli(&args);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(v["stage"], "generate");
    assert_eq!(v["cached"], false);
    let second: serde_json::Value = serde_json::from_slice(&cli(&args).stdout).unwrap();
    assert_eq!(second["cached"], true);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::from_path(&path)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        seen += 1;
    }
    assert!(seen >= 4);
}
