use std::path::Path;
use std::process::{Command, Output};

use pcal_core::datasets::read_dataset;
use pcal_core::experiment::ExperimentConfig;
use pcal_core::nnet::load_checkpoint;

fn pcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcal")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(output: &Output) {
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_dataset_then_pretrain_from_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&pcal(&["gen-dataset", "--family", "lamp", "--count", "3", "--parts", "2", "--points", "96", "--seed", "5", "--out-dir", path(&data)]));
    let (manifest, items) = read_dataset(&data).unwrap();
    assert_eq!(manifest.num_classes, 2);
    assert_eq!(items.len(), 3);
    assert!(items.iter().all(|(c, l)| c.len() == 96 && l.is_full()));

    let out = dir.path().join("model");
    ok(&pcal(&["pretrain", "--data", path(&data), "--epochs", "2", "--seed", "3", "--out-dir", path(&out)]));
    let params = load_checkpoint(&std::fs::read(out.join("base.ckpt")).unwrap()).unwrap();
    assert_eq!(params.num_classes(), 2);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("pretrain.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs"], 2);
    assert_eq!(summary["shapes"], 3);
}

const TINY: &str = r#"
[experiment]
name = "tiny"
seeds = [0, 1]

[dataset]
family = "chair"
count = 2
part_count = 3
points_n = 96

[train]
epochs_per_round = 2
"#;

#[test]
fn experiment_writes_reports_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let output = pcal(&["experiment", "--config", path(&config), "--out-dir", path(out), "--seed", "4"]);
        ok(&output);
        assert!(String::from_utf8_lossy(&output.stdout).contains("no_smoothness"));
    }
    for file in ["clouds.csv", "rounds.csv", "summary.json", "summary.md"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let csv = std::fs::read_to_string(a.join("clouds.csv")).unwrap();
    // header plus 2 clouds for each of the 2 arms, all from the single overriding seed
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("4,")), "{csv}");
}

#[test]
fn invalid_config_fails_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, TINY.replace("points_n = 96", "points_n = \"many\"")).unwrap();
    let output = pcal(&["experiment", "--config", path(&config), "--out-dir", path(dir.path())]);
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("dataset.points_n"));

    let output = pcal(&["gen-dataset", "--family", "sofa", "--out-dir", path(dir.path())]);
    assert!(!output.status.success());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let config = ExperimentConfig::load(&root.join("chair_experiment.toml")).unwrap();
    assert_eq!(config.experiment.seeds, vec![0, 1, 2]);
    assert_eq!(config.pretrain.count, Some(20));
    let session: pcal_core::session::SessionConfig =
        toml::from_str(&std::fs::read_to_string(root.join("session.toml")).unwrap()).unwrap();
    session.validate().unwrap();
}
