//! Drives the compiled `nirec` binary the way a user would: writes a small
//! tag-structured dataset to a temporary directory, then runs the real
//! subcommands against it and inspects their exit codes, reports, and files.
//!
//! The fixture has 100 users, 100 items, and 4 tags. Every user and item
//! carries one tag (`k % 4`), ratings cover the 4,000 pairs with `item % 5`
//! in `{0, 1}`, and the positive/negative label comes from a hash of the
//! pair so it is balanced but carries no structure a model could learn.
//! That makes an untrained model's AUC concentrate near one half, which the
//! eval test relies on.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use nirec_core::bundle::load_bundle;
use nirec_core::checkpoint;
use nirec_core::model::{Model, ModelConfig};

fn nirec() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nirec"))
}

/// Runs the command, asserts a zero exit, and returns captured stdout.
fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn nirec");
    assert!(
        out.status.success(),
        "command failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8(out.stdout).expect("stdout is utf8")
}

/// Runs the command, asserts a nonzero exit, and returns the raw output.
fn run_fail(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn nirec");
    assert!(
        !out.status.success(),
        "command unexpectedly succeeded\nstdout:\n{}",
        String::from_utf8_lossy(&out.stdout),
    );
    out
}

fn parse_json(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|e| panic!("bad json ({e}):\n{text}"))
}

fn read_json(path: &Path) -> Value {
    parse_json(&fs::read_to_string(path).expect("read json file"))
}

/// Writes the relation files and config into `dir`, returning the config path.
fn write_fixture(dir: &Path) -> PathBuf {
    let mut ratings = String::new();
    for r in 0..100u32 {
        for c in 0..100u32 {
            if c % 5 >= 2 {
                continue;
            }
            let h = r.wrapping_mul(2_654_435_761).rotate_left(13)
                ^ c.wrapping_mul(2_246_822_519);
            let rating = if h & 8 == 0 { 5 } else { 1 };
            ratings.push_str(&format!("u{r}\ti{c}\t{rating}\n"));
        }
    }
    fs::write(dir.join("ratings.tsv"), ratings).expect("write ratings");

    let mut user_tag = String::new();
    let mut item_tag = String::new();
    for k in 0..100u32 {
        user_tag.push_str(&format!("u{k}\ta{}\n", k % 4));
        item_tag.push_str(&format!("i{k}\ta{}\n", k % 4));
    }
    fs::write(dir.join("user_tag.tsv"), user_tag).expect("write user tags");
    fs::write(dir.join("item_tag.tsv"), item_tag).expect("write item tags");

    let config = serde_json::json!({
        "schema": {
            "node_types": [
                {"symbol": "U", "name": "user"},
                {"symbol": "A", "name": "tag"},
                {"symbol": "I", "name": "item"},
            ],
            "relations": [
                {"name": "rates", "src": "U", "dst": "I"},
                {"name": "user_tag", "src": "U", "dst": "A"},
                {"name": "item_tag", "src": "I", "dst": "A"},
            ],
        },
        "relation_files": [
            {"relation": "rates", "path": "ratings.tsv", "rating_col": 2},
            {"relation": "user_tag", "path": "user_tag.tsv"},
            {"relation": "item_tag", "path": "item_tag.tsv"},
        ],
        "rating": {"relation": "rates", "positive_threshold": 3.0},
        "metapaths": ["UAI", "UIUI"],
        "split": {"train": 0.6, "valid": 0.2, "test": 0.2},
        "hyper": {
            "embed_dim": 4,
            "walks": 3,
            "heads": 2,
            "mlp_hidden": [4],
            "learning_rate": 0.05,
            "batch_size": 64,
            "epochs": 2,
            "patience": 5,
            "seed": 17,
            "workers": 1,
        },
        "reference": {"auc": 0.8, "acc": 0.7},
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).expect("render"))
        .expect("write config");
    path
}

/// Writes the fixture and ingests it, returning (config path, bundle dir).
fn ingest_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let config = write_fixture(dir);
    let bundle = dir.join("bundle");
    run_ok(nirec().args([
        "ingest",
        "--config",
        config.to_str().unwrap(),
        "--out",
        bundle.to_str().unwrap(),
    ]));
    (config, bundle)
}

/// Builds a freshly initialized (untrained) checkpoint for the bundle.
fn untrained_checkpoint(bundle_dir: &Path, out: &Path) {
    let bundle = load_bundle(bundle_dir).expect("load bundle");
    let config = ModelConfig::from_run(&bundle.manifest.config, &bundle.dataset.graph)
        .expect("model config");
    let model = Model::init(config, 17).expect("init model");
    checkpoint::save(out, &model, 17, &[]).expect("save checkpoint");
}

#[test]
fn ingest_writes_bundle_and_manifest() {
    let tmp = TempDir::new().expect("tempdir");
    let (_, bundle) = ingest_fixture(tmp.path());

    for name in ["manifest.json", "dataset.json", "samples.json", "run_manifest.json"] {
        assert!(bundle.join(name).is_file(), "missing {name}");
    }

    let manifest = read_json(&bundle.join("run_manifest.json"));
    assert_eq!(manifest["command"], "ingest");
    assert_eq!(manifest["seed"], 17);
    assert_eq!(manifest["results"]["instances"], 4000);
    assert!(manifest["config"].is_object(), "manifest embeds the config");

    let bundle = load_bundle(&bundle).expect("load bundle");
    let stats = &bundle.manifest.stats;
    assert_eq!(stats.instances, 4000);
    assert_eq!(stats.train + stats.valid + stats.test, 4000);
}

#[test]
fn ingest_report_matches_dataset() {
    let tmp = TempDir::new().expect("tempdir");
    let config = write_fixture(tmp.path());
    let bundle = tmp.path().join("bundle");
    let stdout = run_ok(nirec().args([
        "ingest",
        "--config",
        config.to_str().unwrap(),
        "--out",
        bundle.to_str().unwrap(),
    ]));

    let stats = parse_json(&stdout);
    assert_eq!(stats["instances"], 4000);
    let positives = stats["positives"].as_u64().expect("positives");
    assert!(
        (1600..=2400).contains(&positives),
        "hash labels should be roughly balanced, got {positives} positives"
    );
}

#[test]
fn train_same_seed_is_reproducible() {
    let tmp = TempDir::new().expect("tempdir");
    let (_, bundle) = ingest_fixture(tmp.path());

    let mut summaries = Vec::new();
    for name in ["run_a", "run_b"] {
        let out = tmp.path().join(name);
        let stdout = run_ok(nirec().args([
            "train",
            "--data",
            bundle.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "17",
            "--workers",
            "1",
        ]));
        summaries.push(parse_json(&stdout));
        assert!(out.join("model.nirec").is_file(), "missing checkpoint");
    }

    let csv_a = fs::read(tmp.path().join("run_a/metrics.csv")).expect("csv a");
    let csv_b = fs::read(tmp.path().join("run_b/metrics.csv")).expect("csv b");
    assert_eq!(csv_a, csv_b, "same seed must give byte-identical metrics");
    assert_eq!(summaries[0], summaries[1], "same seed must give equal summaries");

    let text = String::from_utf8(csv_a).expect("csv utf8");
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,valid_auc,valid_acc");
    assert_eq!(lines.len(), 3, "header plus one row per epoch");

    let summary = &summaries[0];
    assert_eq!(summary["epochs_run"], 2);
    assert!(summary["test"]["auc"].is_f64(), "summary reports test metrics");

    let manifest = read_json(&tmp.path().join("run_a/run_manifest.json"));
    assert_eq!(manifest["command"], "train");
    let gap = &manifest["results"]["reference_gap"];
    assert!(
        gap["auc"].is_f64() && gap["acc"].is_f64(),
        "manifest reports the gap to the configured reference metrics"
    );
}

#[test]
fn eval_untrained_model_scores_near_chance() {
    let tmp = TempDir::new().expect("tempdir");
    let (_, bundle) = ingest_fixture(tmp.path());
    let model = tmp.path().join("untrained.nirec");
    untrained_checkpoint(&bundle, &model);

    let stdout = run_ok(nirec().args([
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        bundle.to_str().unwrap(),
        "--split",
        "test",
        "--workers",
        "1",
    ]));

    let report = parse_json(&stdout);
    assert_eq!(report["split"], "test");
    let count = report["metrics"]["count"].as_u64().expect("count");
    assert!((799..=801).contains(&count), "test split holds a fifth, got {count}");
    let auc = report["metrics"]["auc"].as_f64().expect("auc");
    assert!(
        (0.45..=0.55).contains(&auc),
        "untrained model on structureless labels should sit near chance, got {auc}"
    );
}

#[test]
fn eval_multi_worker_matches_single_worker() {
    let tmp = TempDir::new().expect("tempdir");
    let (_, bundle) = ingest_fixture(tmp.path());
    let model = tmp.path().join("untrained.nirec");
    untrained_checkpoint(&bundle, &model);

    let mut reports = Vec::new();
    for workers in ["1", "4"] {
        let stdout = run_ok(nirec().args([
            "eval",
            "--model",
            model.to_str().unwrap(),
            "--data",
            bundle.to_str().unwrap(),
            "--split",
            "valid",
            "--workers",
            workers,
        ]));
        reports.push(parse_json(&stdout));
    }
    assert_eq!(reports[0], reports[1], "worker count must not change metrics");
}

#[test]
fn export_attention_writes_csv_and_manifest() {
    let tmp = TempDir::new().expect("tempdir");
    let (_, bundle) = ingest_fixture(tmp.path());
    let model = tmp.path().join("untrained.nirec");
    untrained_checkpoint(&bundle, &model);

    let out = tmp.path().join("attention.csv");
    let stdout = run_ok(nirec().args([
        "export-attention",
        "--model",
        model.to_str().unwrap(),
        "--data",
        bundle.to_str().unwrap(),
        "--split",
        "valid",
        "--topk",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]));

    let text = fs::read_to_string(&out).expect("read csv");
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "instance_id,user_raw_id,item_raw_id,label,score,beta:UAI,beta:UIUI,\
         pair_index_1,slot_index_1,alpha_1,pair_index_2,slot_index_2,alpha_2"
    );

    let report = parse_json(&stdout);
    let instances = report["instances"].as_u64().expect("instances") as usize;
    assert_eq!(lines.len(), instances + 1, "one row per instance plus header");
    assert!((799..=801).contains(&instances), "valid split holds a fifth");

    let manifest = read_json(&tmp.path().join("attention.manifest.json"));
    assert_eq!(manifest["command"], "export-attention");
    assert_eq!(manifest["results"]["metapaths"], serde_json::json!(["UAI", "UIUI"]));
}

#[test]
fn bench_conv_reports_slopes() {
    let tmp = TempDir::new().expect("tempdir");
    let out = tmp.path().join("bench.csv");
    let stdout = run_ok(nirec().args([
        "bench-conv",
        "--min-len",
        "8",
        "--max-len",
        "32",
        "--paths",
        "1",
        "--dim",
        "2",
        "--reps",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]));

    assert!(
        stdout.contains("log-log slopes: naive "),
        "report must include both fitted slopes, got:\n{stdout}"
    );

    let text = fs::read_to_string(&out).expect("read bench csv");
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "size,naive_mean_s,naive_median_s,naive_stddev_s,fft_mean_s,fft_median_s,fft_stddev_s"
    );
    assert_eq!(lines.len(), 4, "rows for sizes 8, 16, 32 plus header");

    let manifest = read_json(&tmp.path().join("bench.manifest.json"));
    assert_eq!(manifest["command"], "bench-conv");
    assert!(manifest["results"]["naive_slope"].is_f64());
    assert!(manifest["results"]["fft_slope"].is_f64());
}

#[test]
fn gradcheck_passes_at_default_tolerance() {
    let stdout = run_ok(nirec().args(["gradcheck", "--seed", "9"]));
    assert!(
        stdout.contains("-> PASS"),
        "gradcheck should pass at the default tolerance, got:\n{stdout}"
    );
}

#[test]
fn gradcheck_fails_below_noise_floor() {
    let out = run_fail(nirec().args(["gradcheck", "--seed", "9", "--tolerance", "1e-18"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stdout.contains("-> FAIL"), "report goes to stdout:\n{stdout}");
    assert!(
        stderr.contains("gradient check"),
        "failure cause goes to stderr:\n{stderr}"
    );
}

#[test]
fn missing_config_is_reported_with_path() {
    let out = run_fail(nirec().args([
        "ingest",
        "--config",
        "/nonexistent/config.json",
        "--out",
        "/tmp/never-created",
    ]));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("/nonexistent/config.json"),
        "error names the offending file:\n{stderr}"
    );
}

#[test]
fn unknown_flag_is_rejected() {
    let out = run_fail(nirec().args(["gradcheck", "--frobnicate"]));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("--frobnicate"),
        "unknown flags are rejected by name:\n{stderr}"
    );
}

#[test]
fn train_rejects_config_with_different_metapaths() {
    let tmp = TempDir::new().expect("tempdir");
    let (config_path, bundle) = ingest_fixture(tmp.path());

    let mut config = read_json(&config_path);
    config["metapaths"] = serde_json::json!(["UAI"]);
    let other = tmp.path().join("other.json");
    fs::write(&other, serde_json::to_string_pretty(&config).expect("render"))
        .expect("write config");

    let out = run_fail(nirec().args([
        "train",
        "--data",
        bundle.to_str().unwrap(),
        "--config",
        other.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("metapaths") && stderr.contains("ingest"),
        "mismatch names the section and the fix:\n{stderr}"
    );
}
