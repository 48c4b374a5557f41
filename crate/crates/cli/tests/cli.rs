use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hscl::eval::read_scores_csv;
use hscl::scenarios::{write_records, RecordDtype, SplitManifest};
use hscl::trainer::read_metrics;
use ndarray::ArrayD;
use serde_json::{json, Value};

fn hscl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hscl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("HSCL_DATA_DIR")
        .output()
        .expect("spawn hscl")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn base_config() -> Value {
    json!({
        "dataset": {"type": "blobs", "n_classes": 4, "dim": 8, "separation": 6.0, "n_per_class": 100, "seed": 1},
        "scenario": {"scenario": "S2_CONTAMINATED", "normal_class": 0, "gamma_l": 0.05, "gamma_p": 0.10, "seed": 0},
        "hscl": {"d": 16, "epochs": 3, "warmup_epochs": 1, "batch_size": 64, "lr": 0.002},
        "encoder": {"kind": "MLP", "input_shape": [8], "mlp_hidden": [32], "projection_dim": 16}
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "config.json", &base_config());
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn make_scenario_writes_contaminated_split() {
    let (dir, cfg) = setup();
    let out = hscl(&["make-scenario", "--config", s(&cfg), "--out", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m: SplitManifest = serde_json::from_str(&fs::read_to_string(dir.path().join("run/split.json")).unwrap()).unwrap();
    let expected = (0.10 * m.counts.x_u as f64).round() as usize;
    assert_eq!(m.counts.x_u_contamination, expected);
    assert!(String::from_utf8_lossy(&out.stdout).contains("contamination"));
    assert!(dir.path().join("run/run_manifest.json").exists());
}

#[test]
fn make_scenario_is_byte_identical_and_guarded() {
    let (dir, cfg) = setup();
    assert_eq!(code(&hscl(&["make-scenario", "--config", s(&cfg), "--out", "run"], dir.path())), 0);
    let first = fs::read(dir.path().join("run/split.json")).unwrap();
    let again = hscl(&["make-scenario", "--config", s(&cfg), "--out", "run"], dir.path());
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"));
    assert_eq!(code(&hscl(&["make-scenario", "--config", s(&cfg), "--out", "run", "--force"], dir.path())), 0);
    assert_eq!(first, fs::read(dir.path().join("run/split.json")).unwrap());
}

#[test]
fn config_errors_exit_with_one_and_missing_files_with_three() {
    let (dir, _) = setup();
    let mut v = base_config();
    v["scenario"].as_object_mut().unwrap().remove("normal_class");
    let cfg = write_config(dir.path(), "bad.json", &v);
    let out = hscl(&["make-scenario", "--config", s(&cfg), "--out", "run"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("normal_class"), "{}", stderr(&out));

    let mut v = base_config();
    v["hscl"]["learning_rate"] = json!(0.1);
    let cfg = write_config(dir.path(), "typo.json", &v);
    assert_eq!(code(&hscl(&["train", "--config", s(&cfg), "--out", "run"], dir.path())), 1);

    let mut v = base_config();
    v["scenario"]["gamma_p"] = json!(0.6);
    let cfg = write_config(dir.path(), "gamma.json", &v);
    assert_eq!(code(&hscl(&["make-scenario", "--config", s(&cfg), "--out", "run"], dir.path())), 1);

    assert_eq!(code(&hscl(&["make-scenario", "--config", "nope.json", "--out", "run"], dir.path())), 3);
    assert_eq!(code(&hscl(&["frobnicate"], dir.path())), 1);
}

#[test]
fn train_writes_one_row_per_epoch_and_eval_summarizes() {
    let (dir, cfg) = setup();
    let out = hscl(&["train", "--config", s(&cfg), "--out", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_metrics(&dir.path().join("run/metrics.csv")).unwrap().len(), 3);

    let out = hscl(&["eval", "--run", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/summary.json")).unwrap()).unwrap();
    let auroc = summary["auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));
    assert_eq!(read_scores_csv(&dir.path().join("run/scores.csv")).unwrap().len(), 80);

    // Re-running from the manifest alone reproduces the metrics.
    let out = hscl(&["train", "--config", "run/run_manifest.json", "--out", "rerun"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let a = read_metrics(&dir.path().join("run/metrics.csv")).unwrap();
    let b = read_metrics(&dir.path().join("rerun/metrics.csv")).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.same_values(y)));

    let out = hscl(&["eval", "--run", "run"], dir.path());
    assert_eq!(code(&out), 1, "summary exists, no --force");
}

#[test]
fn epochs_override_gives_a_single_row() {
    let (dir, cfg) = setup();
    let out = hscl(&["train", "--config", s(&cfg), "--out", "run", "--epochs", "1", "--seed", "4"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_metrics(&dir.path().join("run/metrics.csv")).unwrap().len(), 1);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["hscl"]["epochs"], json!(1));
    assert_eq!(manifest["seed"], json!(4));
}

#[test]
fn divergent_learning_rate_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let v = json!({
        "dataset": {"type": "blobs", "n_classes": 10, "dim": 32, "separation": 6.0, "n_per_class": 60, "seed": 0},
        "scenario": {"scenario": "S2_CONTAMINATED", "normal_class": 0, "gamma_l": 0.05, "gamma_p": 0.05, "seed": 0},
        "hscl": {"d": 64, "epochs": 4, "warmup_epochs": 0},
        "encoder": {"kind": "MLP", "input_shape": [32], "mlp_hidden": [64], "projection_dim": 64}
    });
    let cfg = write_config(dir.path(), "config.json", &v);
    let out = hscl(&["train", "--config", s(&cfg), "--out", "run", "--lr", "10"], dir.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
    assert!(dir.path().join("run/divergence_snapshot/checkpoint.json").exists());
}

#[test]
fn untrained_checkpoint_is_rejected() {
    let (dir, cfg) = setup();
    assert_eq!(code(&hscl(&["train", "--config", s(&cfg), "--out", "run", "--epochs", "0"], dir.path())), 0);
    let out = hscl(&["eval", "--run", "run"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("untrained"), "{}", stderr(&out));
}

#[test]
fn perfectly_separated_scores_give_auroc_one() {
    let (dir, cfg) = setup();
    assert_eq!(code(&hscl(&["make-scenario", "--config", s(&cfg), "--out", "run"], dir.path())), 0);
    let fixture = "id,score,truth\n1,0.9,0\n2,0.8,0\n3,0.1,1\n4,-0.5,1\n";
    fs::write(dir.path().join("fixture.csv"), fixture).unwrap();
    let out = hscl(&["eval", "--run", "run", "--scores", "fixture.csv"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["auroc"], json!(1.0));
}

fn ablation_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn ablation_grids() {
    let (dir, cfg) = setup();
    let grid = write_config(dir.path(), "grid.json", &json!({"settings": ["full", "wo_na"], "seeds": [0]}));
    let out = hscl(&["ablate", "--config", s(&cfg), "--grid", s(&grid), "--out", "a", "--epochs", "1"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = ablation_rows(&dir.path().join("a/ablation.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "full");
    assert_eq!(rows[1][0], "wo_na");

    let sweep = write_config(
        dir.path(),
        "sweep.json",
        &json!({"settings": ["full"], "w_delta": [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]}),
    );
    let out = hscl(&["ablate", "--config", s(&cfg), "--grid", s(&sweep), "--out", "b", "--epochs", "1"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(ablation_rows(&dir.path().join("b/ablation.csv")).len(), 7);

    let bad = write_config(dir.path(), "bad.json", &json!({"settings": ["wo_everything"]}));
    let out = hscl(&["ablate", "--config", s(&cfg), "--grid", s(&bad), "--out", "c"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("wo_everything"));
}

#[test]
fn plot_embeddings_exports_raw_and_tsne() {
    let (dir, cfg) = setup();
    assert_eq!(code(&hscl(&["train", "--config", s(&cfg), "--out", "run", "--epochs", "1"], dir.path())), 0);
    let out = hscl(&["plot-embeddings", "--run", "run", "--reducer", "none"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("run/embeddings.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap().split(',').count(), 2 + 16);
    assert_eq!(text.lines().count(), 81);

    let out = hscl(
        &["plot-embeddings", "--run", "run", "--iterations", "300", "--max-samples", "40", "--force"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("run/embeddings.csv")).unwrap();
    assert_eq!(text.lines().count(), 41);
    assert!(dir.path().join("run/embeddings.png").exists());
}

#[test]
fn data_dir_variable_resolves_relative_dataset_paths() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data/toy");
    fs::create_dir_all(&data).unwrap();
    let rec = |label: i64, x: f64| (label, ArrayD::from_elem(vec![3], x + label as f64 * 5.0));
    let train: Vec<_> = (0..40).map(|i| rec(i % 2, (i / 2) as f64 * 0.01)).collect();
    let test: Vec<_> = (0..10).map(|i| rec(i % 2, 0.3)).collect();
    write_records(&data.join("train.hscl"), &[3], RecordDtype::F64, &train).unwrap();
    write_records(&data.join("test.hscl"), &[3], RecordDtype::F64, &test).unwrap();
    let mut v = base_config();
    v["dataset"] = json!({"type": "records", "name": "toy", "path": "toy"});
    v["scenario"] = json!({"scenario": "S1_SEMI", "normal_class": 0, "gamma_l": 0.2, "seed": 0});
    v["encoder"]["input_shape"] = json!([3]);
    let cfg = write_config(dir.path(), "config.json", &v);

    let without = hscl(&["make-scenario", "--config", s(&cfg), "--out", "run"], dir.path());
    assert_eq!(code(&without), 3, "{}", stderr(&without));
    let with = Command::new(env!("CARGO_BIN_EXE_hscl"))
        .args(["make-scenario", "--config", s(&cfg), "--out", "run"])
        .current_dir(dir.path())
        .env("HSCL_DATA_DIR", dir.path().join("data"))
        .output()
        .unwrap();
    assert_eq!(code(&with), 0, "{}", stderr(&with));
}
