use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use featprobe_core::report::{CurveTable, CURVE_HEADER, METRIC_REPORT_SCHEMA};
use serde_json::Value;

fn featprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featprobe"))
        .args(args)
        .output()
        .expect("spawn featprobe")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!("stdout is not one JSON document ({e}): {}", String::from_utf8_lossy(&o.stdout))
    })
}

fn ok(args: &[&str]) -> Output {
    let o = featprobe(args);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gaussian(dir: &Path, extra: &[&str]) {
    let mut args = vec!["--seed", "7", "--out", p(dir), "synth", "gaussian"];
    args.extend_from_slice(extra);
    ok(&args);
}

fn metric<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["name"] == name)
        .unwrap_or_else(|| panic!("no {name} entry"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL_TASK: &str = r#"
experiment = "small"
[data.synth]
n = 300
latent_dim = 8
tokens = 2
encoder_dim = 8
expert_dim = 4
task_rank = 2
seed = 3
[task]
id = "recover"
head = { kind = "identity" }
target_role = "expert1"
[neck]
layers = 1
d_model = 8
[train]
steps = 20
batch_size = 16
eval_interval = 10
"#;

#[test]
fn synth_gaussian_records_truth_and_is_byte_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        gaussian(d, &["--dx", "4", "--dy", "4", "--mi", "1.0", "--n", "10000"]);
    }
    let truth: Value = serde_json::from_str(&fs::read_to_string(a.join("ground_truth.json")).unwrap()).unwrap();
    assert!((truth["true_mi"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(truth["units"], "nats");
    for f in ["adapted.npy", "expert.npy", "manifest.json", "ground_truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn synth_pipeline_emits_four_roles() {
    let t = tempfile::tempdir().unwrap();
    let o = ok(&["--json", "--out", p(t.path()), "synth", "pipeline", "--overlap", "0.0"]);
    let v = json(&o);
    assert_eq!(v["roles"], serde_json::json!(["encoder", "expert1", "expert2", "latent"]));
    assert_eq!(v["ground_truth"]["overlap"], 0.0);
}

#[test]
fn existing_outputs_need_force() {
    let t = tempfile::tempdir().unwrap();
    gaussian(t.path(), &["--n", "100"]);
    let again = featprobe(&["--seed", "7", "--out", p(t.path()), "synth", "gaussian", "--n", "100"]);
    assert_eq!(code(&again), 3);
    ok(&["--force", "--seed", "7", "--out", p(t.path()), "synth", "gaussian", "--n", "100"]);
}

#[test]
fn metrics_on_identical_roles() {
    let t = tempfile::tempdir().unwrap();
    gaussian(t.path(), &["--dx", "3", "--dy", "3", "--n", "500"]);
    let manifest = t.path().join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap().replace("expert.npy", "adapted.npy");
    fs::write(&manifest, text).unwrap();
    let v = json(&ok(&["--json", "metrics", p(&manifest)]));
    assert_eq!(metric(&v, "fd")["value"], 0.0);
    assert!((metric(&v, "cos")["value"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn metrics_stdout_validates_against_schema() {
    let t = tempfile::tempdir().unwrap();
    gaussian(t.path(), &["--dx", "2", "--dy", "2", "--mi", "0.5", "--n", "800"]);
    let o = ok(&["--json", "metrics", p(&t.path().join("manifest.json"))]);
    let v = json(&o);
    let schema: Value = serde_json::from_str(METRIC_REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    assert!(validator.is_valid(&v));
    assert_eq!(v["metrics"].as_array().unwrap().len(), 5);
    assert!(o.stderr.is_empty());
}

#[test]
fn metrics_report_file_matches_stdout() {
    let t = tempfile::tempdir().unwrap();
    gaussian(t.path(), &["--n", "300"]);
    let report = t.path().join("report.json");
    let o = ok(&["--json", "--out", p(&report), "metrics", p(&t.path().join("manifest.json"))]);
    let file: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(file, json(&o));
}

#[test]
fn config_errors_exit_two() {
    let t = tempfile::tempdir().unwrap();
    gaussian(t.path(), &["--n", "300"]);
    let manifest = t.path().join("manifest.json");

    let o = featprobe(&["metrics", p(&manifest), "--metrics", "fd,bogus"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("kd_rbf") && stderr(&o).contains("mine"), "{}", stderr(&o));

    let o = featprobe(&["metrics", p(&manifest), "--y-role", "expert2"]);
    assert_eq!(code(&o), 2);

    let o = featprobe(&["mi", p(&manifest), "--estimator", "fd"]);
    assert_eq!(code(&o), 2);

    let o = featprobe(&["--jobs", "0", "gradcheck"]);
    assert_eq!(code(&o), 2);

    let o = featprobe(&["metrics"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_manifest_is_io_error() {
    let t = tempfile::tempdir().unwrap();
    let o = featprobe(&["metrics", p(&t.path().join("nope.json"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn ksg_dimension_guard_exits_two_with_report() {
    let t = tempfile::tempdir().unwrap();
    gaussian(t.path(), &["--dx", "4", "--dy", "4", "--mi", "1.0", "--n", "500", "--lift", "64"]);
    let o = featprobe(&["--json", "mi", p(&t.path().join("manifest.json")), "--estimator", "ksg"]);
    assert_eq!(code(&o), 2);
    let v = json(&o);
    assert_eq!(metric(&v, "ksg")["status"], "failed");
    assert!(metric(&v, "ksg")["diagnostics"]["error"].is_string());
}

#[test]
fn partial_failures_keep_exit_zero() {
    let t = tempfile::tempdir().unwrap();
    gaussian(t.path(), &["--dx", "4", "--dy", "4", "--mi", "1.0", "--n", "500", "--lift", "64"]);
    let o = ok(&["--json", "metrics", p(&t.path().join("manifest.json")), "--metrics", "fd,ksg"]);
    let v = json(&o);
    assert_eq!(metric(&v, "fd")["status"], "ok");
    assert_eq!(metric(&v, "ksg")["status"], "failed");
}

#[test]
fn mine_recovers_one_nat() {
    let t = tempfile::tempdir().unwrap();
    gaussian(t.path(), &["--dx", "4", "--dy", "4", "--mi", "1.0", "--n", "10000"]);
    let v = json(&ok(&["--json", "mi", p(&t.path().join("manifest.json")), "--estimator", "mine"]));
    let value = metric(&v, "mine")["value"].as_f64().unwrap();
    assert!((value - 1.0).abs() < 0.15, "mine {value}");
    assert!(metric(&v, "mine")["diagnostics"]["runs"][0]["curve"].is_array());
}

#[test]
fn three_seeds_give_mean_and_std() {
    let t = tempfile::tempdir().unwrap();
    gaussian(t.path(), &["--rho", "0.8", "--n", "2000"]);
    let v = json(&ok(&[
        "--json", "--seed", "5", "mi", p(&t.path().join("manifest.json")), "--estimator", "mine", "--seeds", "3",
        "--steps", "150",
    ]));
    let m = metric(&v, "mine");
    assert_eq!(m["per_seed"].as_array().unwrap().len(), 3);
    assert!(m["std"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["seeds"], serde_json::json!([5, 6, 7]));
}

#[test]
fn quickstart_reaches_low_heldout_error() {
    let t = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let v = json(&ok(&["--json", "--out", p(t.path()), "train", "--config", "builtin:quickstart"]));
    let secs = start.elapsed().as_secs_f64();
    let mse = v["final_eval"]["heldout_task"].as_f64().unwrap();
    assert!(mse < 1e-3, "held-out MSE {mse}");
    assert!(secs < 300.0, "took {secs}s");
    let dir = t.path().join("quickstart").join("0");
    assert!(dir.join("record.json").is_file() && dir.join("neck.ckpt").is_file());
}

#[test]
fn train_rerun_reproduces_record_and_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "small.toml", SMALL_TASK);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let va = json(&ok(&["--json", "--out", p(&a), "train", "--config", &cfg]));
    let vb = json(&ok(&["--json", "--out", p(&b), "train", "--config", &cfg]));
    assert_eq!(va["record_hash"], vb["record_hash"]);
    for f in ["record.json", "neck.ckpt"] {
        assert_eq!(
            fs::read(a.join("small/0").join(f)).unwrap(),
            fs::read(b.join("small/0").join(f)).unwrap()
        );
    }
    let vc = json(&ok(&["--json", "--seed", "1", "--out", p(&a), "train", "--config", &cfg]));
    assert_ne!(va["record_hash"], vc["record_hash"]);
}

#[test]
fn training_divergence_exits_five() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "small.toml", SMALL_TASK);
    let o = featprobe(&["--out", p(t.path()), "train", "--config", &cfg, "--lr", "1e200"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn bad_train_config_exits_two() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "bad.toml", &SMALL_TASK.replace("layers = 1", "layers = 1\nwidth = 3"));
    assert_eq!(code(&featprobe(&["--out", p(t.path()), "train", "--config", &cfg])), 2);
    let cfg = write_config(t.path(), "heads.toml", &SMALL_TASK.replace("layers = 1", "layers = 1\nheads = 3"));
    assert_eq!(code(&featprobe(&["--out", p(t.path()), "train", "--config", &cfg])), 2);
}

#[test]
fn cross_trains_on_frozen_neck_and_rejects_mismatches() {
    let t = tempfile::tempdir().unwrap();
    let cfg1 = write_config(t.path(), "t1.toml", SMALL_TASK);
    ok(&["--out", p(t.path()), "train", "--config", &cfg1]);
    let ckpt = t.path().join("small/0/neck.ckpt");
    let task2 = SMALL_TASK
        .replace("experiment = \"small\"", "experiment = \"small-cross\"")
        .replace("[neck]", "[cross]\nupstream_task = \"recover\"\n[neck]")
        .replace("target_role = \"expert1\"", "target_role = \"expert2\"")
        .replace("id = \"recover\"", "id = \"second\"");
    let cfg2 = write_config(t.path(), "t2.toml", &task2);
    let v = json(&ok(&["--json", "--out", p(t.path()), "cross", "--config", &cfg2, "--neck1", p(&ckpt)]));
    assert_eq!(v["neck_sequence"], serde_json::json!(["recover", "second"]));

    let mismatched = write_config(t.path(), "t3.toml", &task2.replace("d_model = 8", "d_model = 8\nd_in = 5"));
    let o = featprobe(&["--out", p(t.path()), "--force", "cross", "--config", &mismatched, "--neck1", p(&ckpt)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = featprobe(&["--out", p(t.path()), "--force", "cross", "--config", &cfg2]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_grid_writes_records_and_curve() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "small.toml", SMALL_TASK);
    let out = t.path().join("sweep");
    let v = json(&ok(&[
        "--json", "--out", p(&out), "sweep", "--config", &cfg, "--layers", "1,2,4", "--seeds", "3",
    ]));
    assert_eq!(v["cells"].as_array().unwrap().len(), 9);
    let mut records = 0;
    for l in [1, 2, 4] {
        for s in 0..3 {
            records += out.join(format!("small/L{l}/{s}/record.json")).is_file() as usize;
        }
    }
    assert_eq!(records, 9);
    let csv = fs::read_to_string(out.join("small/curve.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CURVE_HEADER.join(","));
    let table = CurveTable::from_csv(&csv).unwrap();
    assert_eq!(table.rows().len(), 6);
    assert!(table.rows().iter().all(|r| r.std.is_some()));

    let again = t.path().join("again");
    ok(&["--out", p(&again), "sweep", "--config", &cfg, "--layers", "1,2,4", "--seeds", "3"]);
    assert_eq!(csv, fs::read_to_string(again.join("small/curve.csv")).unwrap());
}

#[test]
fn sweep_records_partial_failures() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "small.toml", SMALL_TASK);
    // Three heads do not divide d_model = 8, so the L3 cells fail.
    let v = json(&ok(&["--json", "--out", p(t.path()), "sweep", "--config", &cfg, "--layers", "2,3", "--seeds", "1"]));
    let cells = v["cells"].as_array().unwrap();
    assert_eq!(cells.iter().filter(|c| c["status"] == "failed").count(), 1);
    let table = CurveTable::from_csv(&fs::read_to_string(t.path().join("small/curve.csv")).unwrap()).unwrap();
    assert!(table.rows().iter().all(|r| r.sweep_value == 2.0 && r.std.is_none()));

    let o = featprobe(&["--out", p(t.path()), "--force", "sweep", "--config", &cfg, "--layers", "3", "--seeds", "1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_rejects_bad_layer_list() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "small.toml", SMALL_TASK);
    let o = featprobe(&["--out", p(t.path()), "sweep", "--config", &cfg, "--layers", "2,x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_names_injected_fault() {
    let v = json(&ok(&["--json", "gradcheck", "--seeds", "3"]));
    assert_eq!(v["passed"], true);
    assert!(v["checks"].as_array().unwrap().iter().all(|c| c["max_rel_err"].is_number()));

    let o = featprobe(&["--json", "gradcheck", "--seeds", "2", "--inject-fault", "attention"]);
    assert_eq!(code(&o), 1);
    let v = json(&o);
    let failing: Vec<&str> = v["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(failing.contains(&"softmax_rows"), "{failing:?}");

    assert_eq!(code(&featprobe(&["gradcheck", "--inject-fault", "nonsense"])), 2);
}

#[test]
fn human_mode_is_not_json() {
    let o = ok(&["gradcheck", "--seeds", "1"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("PASS"));
    assert!(serde_json::from_str::<Value>(&text).is_err());
}
