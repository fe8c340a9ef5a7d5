use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::{json, Value};
use tempfile::TempDir;

fn rfa(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rfa"));
    c.args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn run_with(dir: &Path, command: &str, config: &Value, extra: &[&str]) -> Output {
    let path = dir.join(format!("{command}-{}.json", rand_suffix(config)));
    std::fs::write(&path, serde_json::to_vec(config).unwrap()).unwrap();
    let mut args = vec![command, "--config", path.to_str().unwrap()];
    args.extend_from_slice(extra);
    rfa(&args, &[])
}

fn rand_suffix(v: &Value) -> String {
    format!("{:x}", v.to_string().bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)))
}

#[track_caller]
fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn csv_rows(p: impl AsRef<Path>) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let head = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (head, rows)
}

/// Small, fast blobs experiment.
fn small(out: &Path) -> Value {
    json!({
        "dataset": {"blobs": {"dim": 24, "train_per_class": 30, "test_per_class": 10}},
        "backbone": {"pretrain_epochs": 3},
        "train": {"epochs": 3, "batch_size": 32, "eval_limit": 30},
        "metrics": {"calibrate": {"batches": 2, "batch_size": 20}},
        "output_dir": out,
    })
}

/// The default blob task, pretrained and then adapted in frozen-backbone mode.
struct Desk {
    dir: TempDir,
    config: Value,
}

fn desk() -> &'static Desk {
    static D: OnceLock<Desk> = OnceLock::new();
    D.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = json!({
            "adapter": {"d": 4},
            "train": {"mode": "fb", "epochs": 12},
            "output_dir": dir.path().join("out"),
            "seed": 3,
        });
        ok(run_with(dir.path(), "pretrain", &config, &[]));
        let before = std::fs::read(dir.path().join("out/backbone.rfa")).unwrap();
        ok(run_with(dir.path(), "train", &config, &["--seed", "4"]));
        assert_eq!(std::fs::read(dir.path().join("out/backbone.rfa")).unwrap(), before);
        Desk { dir, config }
    })
}

impl Desk {
    fn out(&self) -> std::path::PathBuf {
        self.dir.path().join("out")
    }

    fn with(&self, patch: Value) -> Value {
        let mut c = self.config.clone();
        merge(&mut c, patch);
        c
    }
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

#[test]
fn pretrained_desk_model_is_accurate_and_frozen_training_adds_an_adapter() {
    let d = desk();
    let dir = d.dir.path();
    let c = d.with(json!({"attack": {"eval": []}, "metrics": {"use_adapter": false}, "output_dir": dir.join("eval")}));
    let c = {
        let mut c = c;
        c["backbone"] = json!({"checkpoint": d.out().join("backbone.rfa")});
        c
    };
    ok(run_with(dir, "eval", &c, &[]));
    let r = read_json(dir.join("eval/eval.json"));
    let models = r["models"].as_array().unwrap();
    assert_eq!(models.len(), 1);
    assert!(models[0]["attacks"].as_array().unwrap().is_empty());
    assert!(models[0]["clean_accuracy"].as_f64().unwrap() >= 0.98, "{r}");
    assert!(d.out().join("adapter.rfa").exists());

    let (head, rows) = csv_rows(d.out().join("train_fb_curve.csv"));
    assert_eq!(head[0], "epoch");
    assert!(head.contains(&"test_robust_err".to_string()));
    let epochs: Vec<usize> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(epochs, (1..=12).collect::<Vec<_>>());
    let run = read_json(d.out().join("train_fb_run.json"));
    assert_eq!(run["seed"], 4);
    assert_eq!(run["run"]["seed"], 4);
}

#[test]
fn eval_reports_both_models_and_zero_budget_matches_clean() {
    let d = desk();
    let c = d.with(json!({"attack": {"eval": [
        {"epsilon": 0.0, "k": 10},
        {"epsilon": 0.03137254901960784, "k": 10},
    ]}}));
    let o = ok(run_with(d.dir.path(), "eval", &c, &["--seed", "9"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("backbone+rfa"));
    let r = read_json(d.out().join("eval.json"));
    assert_eq!(r["seed"], 9);
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
    let m = r["models"].as_array().unwrap();
    assert_eq!(m.len(), 2);
    for model in m {
        let a = model["attacks"].as_array().unwrap();
        assert_eq!(a[0]["robust_accuracy"], model["clean_accuracy"]);
    }
    let rob = |i: usize| m[i]["attacks"][1]["robust_accuracy"].as_f64().unwrap();
    assert!(rob(0) <= 0.05 && rob(1) >= 0.7, "{r}");
}

#[test]
fn prop1_shallow_splits_take_larger_loss_changes() {
    let d = desk();
    let c = d.with(json!({"metrics": {"prop1": {"splits": [3, 1], "k_eta": 1.0, "samples": 250}}}));
    ok(run_with(d.dir.path(), "prop1", &c, &[]));
    let s = read_json(d.out().join("prop1.json"));
    let splits = s["splits"].as_array().unwrap();
    assert_eq!(splits[0]["g"], 1);
    assert_eq!(splits[0]["samples"], 250);
    assert!(splits[0]["median"].as_f64().unwrap() > splits[1]["median"].as_f64().unwrap(), "{s}");
    let mw = &s["mann_whitney"][0];
    assert_eq!((mw["shallow"].as_u64(), mw["deep"].as_u64()), (Some(1), Some(3)));
    assert!(mw["p_value"].as_f64().unwrap() < 0.01, "{s}");
    assert!(s["warnings"].as_array().unwrap().is_empty());

    let (head, rows) = csv_rows(d.out().join("prop1.csv"));
    assert_eq!(head, ["g", "sample_index", "delta_l"]);
    assert_eq!(rows.len(), 500);
}

#[test]
fn detect_flags_control_and_separates_seen_attack() {
    let d = desk();
    ok(run_with(d.dir.path(), "detect", &d.config, &[]));
    let r = read_json(d.out().join("detect.json"));
    let reports = r["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["control"], false);
    assert!(reports[0]["auc"].as_f64().unwrap() >= 0.85, "{r}");
    assert_eq!(reports[1]["control"], true);
    assert_eq!(reports[1]["attack"], "control");
    assert!((reports[1]["auc"].as_f64().unwrap() - 0.5).abs() < 0.05);
    for name in ["detect_0_pgd_l_inf_scores.csv", "detect_1_control_scores.csv"] {
        let (head, rows) = csv_rows(d.out().join(name));
        assert_eq!(head, ["sample_index", "label", "clean_score", "adversarial_score"]);
        assert_eq!(rows.len(), 300);
    }
}

#[test]
fn pretrain_is_reproducible_bytewise() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        ok(run_with(dir.path(), "pretrain", &small(&dir.path().join(name)), &[]));
    }
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a/backbone.rfa"), read("b/backbone.rfa"));
    let strip = |v: Value| {
        let mut v = v;
        for e in v["run"]["epochs"].as_array_mut().unwrap() {
            e["wall_time_s"] = json!(0);
            e["mean_batch_time_s"] = json!(0);
        }
        v["run"]["checkpoints"] = json!([]);
        v
    };
    assert_eq!(
        strip(read_json(dir.path().join("a/pretrain_run.json"))),
        strip(read_json(dir.path().join("b/pretrain_run.json")))
    );
    ok(run_with(dir.path(), "pretrain", &small(&dir.path().join("c")), &["--seed", "1"]));
    assert_ne!(read("a/backbone.rfa"), read("c/backbone.rfa"));
}

#[test]
fn joint_and_baseline_modes_write_their_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut c = small(&out);
    ok(run_with(dir.path(), "pretrain", &c, &[]));
    let before = std::fs::read(out.join("backbone.rfa")).unwrap();

    c["train"]["mode"] = json!("ub");
    ok(run_with(dir.path(), "train", &c, &[]));
    assert_eq!(std::fs::read(out.join("backbone.rfa")).unwrap(), before);
    assert_ne!(std::fs::read(out.join("backbone_ub.rfa")).unwrap(), before);
    assert!(out.join("adapter.rfa").exists());
    let run = read_json(out.join("train_ub_run.json"));
    assert_eq!(run["run"]["checkpoints"].as_array().unwrap().len(), 2);

    c["train"]["mode"] = json!("at_pgd_baseline");
    ok(run_with(dir.path(), "train", &c, &[]));
    assert!(out.join("backbone_at.rfa").exists());
    let (_, rows) = csv_rows(out.join("train_at_curve.csv"));
    assert_eq!(rows.len(), 3);
}

#[test]
fn calibration_is_repeatable_and_zero_budget_gives_zero_eta() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut c = small(&out);
    ok(run_with(dir.path(), "pretrain", &c, &[]));
    ok(run_with(dir.path(), "calibrate", &c, &[]));
    let first = read_json(out.join("calibrate.json"));
    ok(run_with(dir.path(), "calibrate", &c, &[]));
    assert_eq!(read_json(out.join("calibrate.json")), first);
    assert_eq!((first["batches"].as_u64(), first["samples"].as_u64()), (Some(2), Some(40)));
    assert_eq!(first["table"].as_array().unwrap().len(), 3);

    c["metrics"]["calibrate"]["epsilon"] = json!(0.0);
    ok(run_with(dir.path(), "calibrate", &c, &[]));
    let zero = read_json(out.join("calibrate.json"));
    assert!(zero["table"].as_array().unwrap().iter().all(|t| t["eta"] == 0.0));
}

#[test]
fn zero_feature_budget_warns_about_a_degenerate_density() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut c = small(&out);
    ok(run_with(dir.path(), "pretrain", &c, &[]));
    c["metrics"]["prop1"] = json!({"k_eta": 0.0, "samples": 20});
    let o = ok(run_with(dir.path(), "prop1", &c, &[]));
    assert!(String::from_utf8_lossy(&o.stderr).contains("degenerate KDE"));
    let s = read_json(out.join("prop1.json"));
    assert_eq!(s["warnings"].as_array().unwrap().len(), 2);
    let (_, rows) = csv_rows(out.join("prop1.csv"));
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() == 0.0));
}

#[test]
fn missing_dataset_file_is_a_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let c = json!({
        "dataset": {"kind": "idx", "idx": {
            "train_images": dir.path().join("absent-images.idx"),
            "train_labels": dir.path().join("absent-labels.idx"),
        }},
        "output_dir": dir.path().join("out"),
    });
    let o = run_with(dir.path(), "pretrain", &c, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent-images.idx"));
}

#[test]
fn missing_artifacts_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_with(dir.path(), "eval", &small(&dir.path().join("out")), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("backbone.rfa"));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(rfa(&["frobnicate"], &[]).status.code(), Some(1));
    assert_eq!(rfa(&["eval", "--config", dir.path().join("nope.json").to_str().unwrap()], &[]).status.code(), Some(1));

    let unknown = json!({"sede": 1, "output_dir": out});
    assert_eq!(run_with(dir.path(), "eval", &unknown, &[]).status.code(), Some(1));

    let mut bad_split = small(&out);
    bad_split["train"]["attack"] = json!({"space": "feature", "g": 4, "eta": 0.1});
    let o = run_with(dir.path(), "train", &bad_split, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("g=4"));

    let path = dir.path().join("ok.json");
    std::fs::write(&path, serde_json::to_vec(&small(&out)).unwrap()).unwrap();
    let o = rfa(&["calibrate", "--config", path.to_str().unwrap()], &[("RFA_THREADS", "zero")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(rfa(&["--help"], &[]).status.success());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    for (threads, name) in [("1", "a"), ("3", "b")] {
        std::fs::write(&path, serde_json::to_vec(&small(&dir.path().join(name))).unwrap()).unwrap();
        let o = rfa(&["pretrain", "--config", path.to_str().unwrap()], &[("RFA_THREADS", threads)]);
        ok(o);
    }
    let read = |n: &str| std::fs::read(dir.path().join(n).join("backbone.rfa")).unwrap();
    assert_eq!(read("a"), read("b"));
}
