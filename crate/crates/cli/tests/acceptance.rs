//! Acceptance suite. Each criterion runs in isolation, reports one PASS/FAIL
//! line on stderr and the test fails if any criterion fails.

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use featprobe_core::autodiff::{Tensor, ALL_OPS};
use featprobe_core::featio::{
    decode_npy, encode_npy, synth_gaussian_pair, synth_task_pipeline, Dtype, FeatureSet, JointCovariance, Role,
    SynthSpec, TokenPooling,
};
use featprobe_core::gradcheck::{covered_ops, run_gradcheck, GradcheckOptions};
use featprobe_core::metrics::{frechet_distance, kernel_distance_matrix, summarize, summarize_matrix, KernelConfig};
use featprobe_core::mi::{ksg_estimate, lmi_estimate, mine_estimate, LmiConfig, MineConfig};
use featprobe_core::neck::NeckConfig;
use featprobe_core::report::{evaluate_metrics, CurveTable, MetricName, MetricOptions, CURVE_HEADER, METRIC_REPORT_SCHEMA};
use featprobe_core::rng;
use featprobe_core::train::{train_cross_neck, train_neck, HeadSpec, TaskSpec, TrainConfig, TrainData};
use featprobe_core::{Error, ErrorClass};
use nalgebra::{DMatrix, DVector};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(value: f64, truth: f64, rel: f64) -> bool {
    (value - truth).abs() <= rel * truth.abs()
}

fn pair(cov: JointCovariance, n: usize, seed: u64) -> (Tensor, Tensor, f64) {
    let p = synth_gaussian_pair(&SynthSpec::gaussian_pair(cov, seed), n).unwrap();
    (p.x.matrix(TokenPooling::Mean), p.y.matrix(TokenPooling::Mean), p.true_mi)
}

fn as_set(t: &Tensor, name: &str) -> FeatureSet {
    FeatureSet::from_matrix(t.rows(), t.cols(), t.data().to_vec(), Role::Adapted, name).unwrap()
}

// 1 ------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let report = run_gradcheck(&GradcheckOptions {
        seeds: 20,
        base_seed: 0,
        fault: None,
    });
    let secs = start.elapsed().as_secs_f64();
    let differentiable: Vec<_> = ALL_OPS.iter().filter(|k| k.name() != "leaf").collect();
    let covered = covered_ops();
    check(
        differentiable.iter().all(|k| covered.contains(k)),
        "some differentiable op has no check",
    )?;
    check(report.checks.iter().any(|c| c.name == "neck_2layer_mse"), "no full-neck check")?;
    check(report.passed, format!("failing: {:?}", report.failing()))?;
    let worst = report.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    check(worst < 1e-4, format!("max rel err {worst:e}"))?;
    check(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("{} checks over 20 seeds, max rel err {worst:.2e}, {secs:.1}s", report.checks.len()))
}

// 2 ------------------------------------------------------------------------

fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::seeded(seed);
    let a = DMatrix::from_vec(d, d, rng::normal_vec(&mut r, d * d));
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.5
}

fn sample_gaussian(n: usize, mean: &DVector<f64>, cov: &DMatrix<f64>, seed: u64) -> Tensor {
    let d = mean.len();
    let l = cov.clone().cholesky().unwrap().l();
    let mut r = rng::seeded(seed);
    let z = rng::normal_vec(&mut r, n * d);
    let mut out = Vec::with_capacity(n * d);
    for s in 0..n {
        let x = mean + &l * DVector::from_column_slice(&z[s * d..(s + 1) * d]);
        out.extend(x.iter());
    }
    Tensor::new(vec![n, d], out).unwrap()
}

/// Analytic Fréchet distance. The trace of `(A^1/2 B A^1/2)^1/2` equals the
/// sum of square roots of the eigenvalues of `L^T B L` with `A = L L^T`.
fn analytic_fd(ma: &DVector<f64>, a: &DMatrix<f64>, mb: &DVector<f64>, b: &DMatrix<f64>) -> f64 {
    let l = a.clone().cholesky().unwrap().l();
    let m = l.transpose() * b * &l;
    let cross: f64 = m.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).sum();
    (ma - mb).norm_squared() + a.trace() + b.trace() - 2.0 * cross
}

fn fd_oracle() -> Outcome {
    let start = Instant::now();
    let d = 8;
    let (ca, cb) = (random_spd(d, 1), random_spd(d, 2));
    let ma = DVector::from_fn(d, |i, _| 0.1 * i as f64);
    let mb = DVector::from_fn(d, |i, _| 0.5 - 0.05 * i as f64);
    let truth = analytic_fd(&ma, &ca, &mb, &cb);
    let xa = sample_gaussian(50_000, &ma, &ca, 11);
    let xb = sample_gaussian(50_000, &mb, &cb, 12);
    let (sa, sb) = (summarize_matrix(&xa).unwrap(), summarize_matrix(&xb).unwrap());
    let fd = frechet_distance(&sa, &sb).unwrap();
    let self_fd = frechet_distance(&sa, &sa).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let rel = (fd - truth).abs() / truth;
    check(rel < 0.02, format!("sample {fd:.5} vs analytic {truth:.5} ({:.2}%)", 100.0 * rel))?;
    check(self_fd == 0.0, format!("FD(a,a) = {self_fd:e}"))?;
    check(secs < 30.0, format!("took {secs:.1}s"))?;
    Ok(format!("sample {fd:.5} analytic {truth:.5} ({:.2}%), FD(a,a)=0, {secs:.1}s", 100.0 * rel))
}

// 3 ------------------------------------------------------------------------

fn kernel_calibration() -> Outcome {
    let d = 4;
    let cov = DMatrix::identity(d, d);
    let mean = DVector::zeros(d);
    let mut notes = Vec::new();
    for (label, cfg) in [("rbf", KernelConfig::rbf_median()), ("poly", KernelConfig::poly_default())] {
        let vals: Vec<f64> = (0..10)
            .map(|s| {
                let x = sample_gaussian(5000, &mean, &cov, 1000 + 2 * s);
                let y = sample_gaussian(5000, &mean, &cov, 1001 + 2 * s);
                kernel_distance_matrix(&x, &y, &cfg).unwrap()
            })
            .collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let se = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
        check(m.abs() < 3.0 * se, format!("KD_{label} mean {m:e} exceeds 3 SE ({se:e})"))?;
        notes.push(format!("KD_{label} {m:.1e} (SE {se:.1e})"));
    }

    // Separated clusters: cross-cluster kernel values underflow, so the
    // unbiased estimate reduces to the two within-cluster means.
    let gamma = 0.5;
    let x = sample_gaussian(1000, &DVector::zeros(2), &DMatrix::identity(2, 2), 7);
    let y = sample_gaussian(1000, &DVector::from_vec(vec![10.0, 0.0]), &DMatrix::identity(2, 2), 8);
    let within = |t: &Tensor| {
        let n = t.rows();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d2: f64 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                    s += (-gamma * d2).exp();
                }
            }
        }
        s / (n * (n - 1)) as f64
    };
    let limit = within(&x) + within(&y);
    let kd = kernel_distance_matrix(&x, &y, &KernelConfig::rbf(gamma)).unwrap();
    check((kd - limit).abs() < 1e-3, format!("separated KD_rbf {kd} vs limit {limit}"))?;
    notes.push(format!("separated {kd:.5} vs {limit:.5}"));
    Ok(notes.join(", "))
}

// 4 ------------------------------------------------------------------------

fn lift(t: &Tensor, seed: u64) -> Tensor {
    featprobe_core::featio::random_lift(&as_set(t, "x"), 64, seed)
        .unwrap()
        .matrix(TokenPooling::Mean)
}

fn mi_estimators() -> Outcome {
    let start = Instant::now();
    let rho = 0.9f64;
    let rho_truth = -0.5 * (1.0 - rho * rho).ln();
    check((rho_truth - 0.8304).abs() < 5e-5, format!("closed form {rho_truth}"))?;
    let suites = [
        ("rho0.9", JointCovariance::correlated(rho).unwrap()),
        ("d4", JointCovariance::with_target_mi(4, 4, 1.0).unwrap()),
        ("indep", JointCovariance::independent(4, 4)),
    ];
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    let mut judge = |label: String, est: f64, truth: f64, rel: f64, indep_cap: f64| {
        let ok = if truth == 0.0 { est <= indep_cap } else { within(est, truth, rel) };
        notes.push(format!("{label} {est:.3}"));
        if !ok {
            failures.push(format!("{label} {est:.4} vs {truth:.4}"));
        }
    };
    for (i, (name, cov)) in suites.iter().enumerate() {
        let (x, y, truth) = pair(cov.clone(), 20_000, 200 + i as u64);
        judge(format!("ksg/{name}"), ksg_estimate(&x, &y, 5).unwrap().max(0.0), truth, 0.10, 0.05);
        let (x, y, truth) = pair(cov.clone(), 10_000, 300 + i as u64);
        let mine = mine_estimate(&x, &y, &MineConfig::default()).map(|e| e.value).unwrap_or(f64::NAN);
        judge(format!("mine/{name}"), mine, truth, 0.15, 0.05);
    }
    let (x, y, truth) = pair(JointCovariance::with_target_mi(4, 4, 1.0).unwrap(), 50_000, 400);
    let lmi = lmi_estimate(&lift(&x, 1), &lift(&y, 2), &LmiConfig::default()).map(|e| e.value).unwrap_or(f64::NAN);
    judge("lmi/d4-lift64".into(), lmi, truth, 0.25, 0.1);
    let (x, y, _) = pair(JointCovariance::independent(64, 64), 10_000, 401);
    let lmi0 = lmi_estimate(&x, &y, &LmiConfig::default()).map(|e| e.value).unwrap_or(f64::NAN);
    judge("lmi/indep64".into(), lmi0, 0.0, 0.0, 0.1);
    let secs = start.elapsed().as_secs_f64();
    if secs >= 600.0 {
        failures.push(format!("took {secs:.0}s"));
    }
    if failures.is_empty() {
        Ok(format!("{}, {secs:.0}s", notes.join(", ")))
    } else {
        Err(failures.join("; "))
    }
}

// 5 ------------------------------------------------------------------------

fn loss_mechanics() -> Outcome {
    let spec = SynthSpec::pipeline(8, 2, 8, 4, 2, 0.0, 0.0, 5);
    let p = synth_task_pipeline(&spec, 200).unwrap();
    let data = TrainData::new(p.encoder, p.expert1);
    let task = TaskSpec::new("t", HeadSpec::Linear { out_dim: 3, seed: 1 }, "expert1");
    let neck = NeckConfig {
        d_model: 8,
        ..NeckConfig::new(1, 8, 4, 2)
    };
    let cfg = TrainConfig {
        steps: 101,
        batch_size: 16,
        eval_interval: 50,
        ..TrainConfig::default()
    };
    let out = train_neck(&cfg, &neck, &data, &task).map_err(|e| e.to_string())?;
    let losses = &out.record.losses;
    check(losses.len() == 101, format!("{} breakdowns", losses.len()))?;
    for (i, b) in losses.iter().enumerate() {
        check(b.step == i, "steps out of order")?;
        let alpha = (1.0 - i as f64 / 100.0).max(0.0);
        check(b.alpha.to_bits() == alpha.to_bits(), format!("alpha at {i}: {}", b.alpha))?;
        let total = b.alpha * b.distill + (1.0 - b.alpha) * b.task;
        check(b.total.to_bits() == total.to_bits(), format!("L mismatch at step {i}"))?;
    }
    check(losses[0].alpha == 1.0, "alpha(0) != 1")?;
    check(losses[50].alpha == 0.5, "alpha(mid) != 0.5")?;
    check(losses[100].alpha == 0.0, "alpha(horizon) != 0")?;
    Ok("101 steps, L = a*L_D + (1-a)*L_T bitwise, a = 1, 0.5, 0".into())
}

// 6 ------------------------------------------------------------------------

fn distillation_direction() -> Outcome {
    let start = Instant::now();
    let mut ratios = Vec::new();
    for seed in 0..3u64 {
        let mut spec = SynthSpec::pipeline(8, 4, 16, 16, 4, 0.0, 0.0, 10 + seed);
        spec.encoder_gain = 1.0;
        let p = synth_task_pipeline(&spec, 2000).unwrap();
        let data = TrainData::new(p.encoder, p.expert1);
        let task = TaskSpec::new("t", HeadSpec::Linear { out_dim: 2, seed }, "expert1");
        let neck = NeckConfig {
            seed,
            ..NeckConfig::new(2, 16, 16, 4)
        };
        let fd = |distill: bool| -> Result<f64, String> {
            let cfg = TrainConfig {
                steps: 600,
                seed,
                distill,
                ..TrainConfig::default()
            };
            let o = train_neck(&cfg, &neck, &data, &task).map_err(|e| e.to_string())?;
            frechet_distance(
                &summarize(&o.adapted_eval, TokenPooling::Mean).unwrap(),
                &summarize(&o.expert_eval, TokenPooling::Mean).unwrap(),
            )
            .map_err(|e| e.to_string())
        };
        let (with, without) = (fd(true)?, fd(false)?);
        ratios.push(without / with);
    }
    let secs = start.elapsed().as_secs_f64();
    let text: Vec<String> = ratios.iter().map(|r| format!("{r:.1}x")).collect();
    check(ratios.iter().all(|&r| r >= 5.0), format!("FD ratios {text:?}"))?;
    check(secs < 300.0, format!("took {secs:.0}s"))?;
    Ok(format!("FD(no distill)/FD(distill) = {}, {secs:.0}s", text.join(" ")))
}

// 7 ------------------------------------------------------------------------

fn cross_ratio(omega: f64, seed: u64) -> Result<f64, String> {
    let mut spec = SynthSpec::pipeline(8, 2, 16, 8, 4, omega, 0.5, 20 + seed);
    spec.encoder_gain = 0.5;
    let p = synth_task_pipeline(&spec, 2000).unwrap();
    let t1 = TaskSpec::new("task1", HeadSpec::Identity, "expert1");
    let t2 = TaskSpec::new("task2", HeadSpec::Identity, "expert2");
    let cfg = TrainConfig {
        steps: 1500,
        seed,
        ..TrainConfig::default()
    };
    // Bottlenecked first neck: a 6-wide residual stream for an 8-dim target.
    let neck1_cfg = NeckConfig {
        d_model: 6,
        heads: Some(1),
        seed,
        ..NeckConfig::new(1, 16, 8, 2)
    };
    let d1 = TrainData::new(p.encoder.clone(), p.expert1.clone());
    let neck1 = train_neck(&TrainConfig { lr: 1e-2, ..cfg.clone() }, &neck1_cfg, &d1, &t1)
        .map_err(|e| e.to_string())?
        .neck;
    let d2 = TrainData::new(p.encoder.clone(), p.expert2.clone());
    let direct = train_neck(&cfg, &NeckConfig { seed, ..NeckConfig::new(2, 16, 8, 2) }, &d2, &t2)
        .map_err(|e| e.to_string())?;
    let cross = train_cross_neck(&neck1, "task1", &cfg, &NeckConfig { seed, ..NeckConfig::new(2, 8, 8, 2) }, &d2, &t2)
        .map_err(|e| e.to_string())?;
    Ok(cross.record.final_eval.heldout_task / direct.record.final_eval.heldout_task)
}

fn cross_neck_direction() -> Outcome {
    let start = Instant::now();
    let mut disjoint = Vec::new();
    let mut shared = Vec::new();
    for seed in 0..3 {
        disjoint.push(cross_ratio(0.0, seed)?);
        shared.push(cross_ratio(1.0, seed)?);
    }
    let secs = start.elapsed().as_secs_f64();
    let fmt = |v: &[f64]| v.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" ");
    check(disjoint.iter().all(|&r| r >= 1.10), format!("omega=0 cross/direct {}", fmt(&disjoint)))?;
    check(shared.iter().all(|&r| (r - 1.0).abs() <= 0.10), format!("omega=1 cross/direct {}", fmt(&shared)))?;
    check(secs < 600.0, format!("took {secs:.0}s"))?;
    Ok(format!("cross/direct omega=0: {}; omega=1: {}; {secs:.0}s", fmt(&disjoint), fmt(&shared)))
}

// 8 ------------------------------------------------------------------------

fn featprobe(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_featprobe"))
        .args(args)
        .output()
        .expect("spawn featprobe")
}

fn ok(args: &[&str]) -> Result<std::process::Output, String> {
    let o = featprobe(args);
    if o.status.success() {
        Ok(o)
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn capacity_sweep() -> Outcome {
    let start = Instant::now();
    let t = tempfile::tempdir().unwrap();
    ok(&["--out", p(t.path()), "sweep", "--config", "builtin:capacity", "--layers", "2,4,6", "--seeds", "3"])?;
    let csv = std::fs::read_to_string(t.path().join("capacity/curve.csv")).map_err(|e| e.to_string())?;
    check(csv.lines().next() == Some(CURVE_HEADER.join(",").as_str()), "CSV header")?;
    let table = CurveTable::from_csv(&csv).map_err(|e| e.to_string())?;
    check(table.to_csv() == csv, "CSV does not round-trip")?;
    let row = |l: f64| {
        table
            .rows()
            .iter()
            .find(|r| r.sweep_value == l && r.metric == "final_loss")
            .cloned()
            .ok_or(format!("no final_loss row for {l}"))
    };
    let (r2, r4, r6) = (row(2.0)?, row(4.0)?, row(6.0)?);
    let se = |r: &featprobe_core::report::CurveRow| r.std.unwrap_or(0.0) / 3f64.sqrt();
    check(r6.mean < r2.mean, format!("6L {:.4} not below 2L {:.4}", r6.mean, r2.mean))?;
    // 4L within noise of its neighbours: no larger than 2L and no smaller
    // than 6L beyond two pooled standard errors.
    check(
        r4.mean <= r2.mean + 2.0 * (se(&r2) + se(&r4)) && r4.mean >= r6.mean - 2.0 * (se(&r4) + se(&r6)),
        format!("4L {:.4} outside [{:.4}, {:.4}] band", r4.mean, r6.mean, r2.mean),
    )?;
    let secs = start.elapsed().as_secs_f64();
    Ok(format!(
        "mean held-out loss 2L {:.4} 4L {:.4} 6L {:.4}, {secs:.0}s",
        r2.mean, r4.mean, r6.mean
    ))
}

// 9 ------------------------------------------------------------------------

const SMALL_TASK: &str = r#"
experiment = "det"
[data.synth]
n = 300
latent_dim = 8
tokens = 2
encoder_dim = 8
expert_dim = 4
task_rank = 2
seed = 3
[task]
id = "task1"
head = { kind = "linear", out_dim = 3, seed = 2 }
target_role = "expert1"
[neck]
layers = 1
d_model = 8
[train]
steps = 40
batch_size = 16
eval_interval = 20
"#;

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn run_all_commands(root: &Path) -> Result<Vec<u8>, String> {
    let cfg = root.join("small.toml");
    std::fs::write(&cfg, SMALL_TASK).unwrap();
    let cross_cfg = root.join("cross.toml");
    let cross = SMALL_TASK
        .replace("experiment = \"det\"", "experiment = \"det-cross\"")
        .replace("id = \"task1\"", "id = \"task2\"")
        .replace("target_role = \"expert1\"", "target_role = \"expert2\"")
        .replace("[neck]", "[cross]\nneck1 = \"runs/det/4/neck.ckpt\"\n[neck]");
    std::fs::write(&cross_cfg, cross).unwrap();
    let out = root.join("out");
    let g = out.join("gauss");
    let mut stdout = Vec::new();
    let mut run = |args: &[&str]| -> Result<(), String> {
        stdout.extend(ok(args)?.stdout);
        Ok(())
    };
    run(&["--json", "--seed", "4", "--out", p(&g), "synth", "gaussian", "--dx", "2", "--dy", "2", "--mi", "0.5", "--n", "2000"])?;
    run(&["--json", "--seed", "4", "--out", p(&out.join("pipe")), "synth", "pipeline", "--n", "300"])?;
    let manifest = g.join("manifest.json");
    run(&["--json", "--seed", "4", "--out", p(&out.join("metrics.json")), "metrics", p(&manifest)])?;
    run(&[
        "--json", "--seed", "4", "--out", p(&out.join("mi.json")), "mi", p(&manifest), "--estimator", "mine,ksg",
        "--seeds", "2", "--steps", "200",
    ])?;
    run(&["--json", "--seed", "4", "--out", p(&root.join("runs")), "train", "--config", p(&cfg)])?;
    run(&["--json", "--seed", "4", "--out", p(&root.join("runs")), "cross", "--config", p(&cross_cfg)])?;
    run(&["--json", "--seed", "4", "--out", p(&out.join("sweep")), "sweep", "--config", p(&cfg), "--layers", "1,2", "--seeds", "2"])?;
    run(&["--json", "--seed", "4", "--out", p(&out.join("gradcheck.json")), "gradcheck", "--seeds", "2"])?;
    Ok(stdout)
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = run_all_commands(a.path())?;
    let sb = run_all_commands(b.path())?;
    let (fa, fb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    check(fa.len() == fb.len(), "different file sets")?;
    let mut files = 0;
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        check(na == nb, format!("{na} vs {nb}"))?;
        check(ba == bb, format!("{na} differs between reruns"))?;
        files += 1;
    }
    // Stdout embeds the temporary paths; compare with them normalised.
    let norm = |s: &[u8], root: &Path| String::from_utf8_lossy(s).replace(p(root), "<root>");
    check(norm(&sa, a.path()) == norm(&sb, b.path()), "stdout differs between reruns")?;
    check(fa.iter().any(|(n, _)| n.ends_with("neck.ckpt")), "no checkpoint written")?;
    check(fa.iter().any(|(n, _)| n.ends_with("curve.csv")), "no curve written")?;
    Ok(format!("synth, metrics, mi, train, cross, sweep, gradcheck: {files} files bit-identical"))
}

// 10 -----------------------------------------------------------------------

fn format_conformance() -> Outcome {
    let mut r = rng::seeded(99);
    for (i, shape) in [vec![1, 1], vec![7, 3], vec![50, 16], vec![5, 4, 6], vec![2, 1, 9]].iter().enumerate() {
        let len: usize = shape.iter().product();
        let mut data = rng::normal_vec(&mut r, len);
        data[0] = if i % 2 == 0 { 1e-300 } else { -3.0e38 };
        let t = Tensor::new(shape.clone(), data).unwrap();
        let (back, dtype) = decode_npy(&encode_npy(&t, Dtype::F64)).map_err(|e| e.to_string())?;
        check(dtype == Dtype::F64 && back.shape() == t.shape(), "shape/dtype changed")?;
        check(
            back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("f64 round trip of {shape:?} not bit-exact"),
        )?;
        let f32_vals = Tensor::new(shape.clone(), t.data().iter().map(|&v| (v as f32) as f64).collect()).unwrap();
        let (back, _) = decode_npy(&encode_npy(&f32_vals, Dtype::F32)).map_err(|e| e.to_string())?;
        check(back.data() == f32_vals.data(), "f32 round trip not exact")?;
    }

    let good = encode_npy(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), Dtype::F64);
    let corrupt = |from: &str, to: &str| -> Vec<u8> {
        let text = String::from_utf8_lossy(&good).replace(from, to);
        let mut bytes = good.clone();
        let n = text.len().min(bytes.len());
        bytes[..n].copy_from_slice(&text.as_bytes()[..n]);
        bytes
    };
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("magic", bad_magic),
        ("big-endian", corrupt("'<f8'", "'>f8'")),
        ("fortran", corrupt("False", "True ")),
        ("dtype", corrupt("'<f8'", "'<i8'")),
        ("shape", corrupt("(2, 2)", "(2, 3)")),
        ("truncated", good[..good.len() - 3].to_vec()),
    ];
    for (label, bytes) in cases {
        match decode_npy(&bytes) {
            Err(e @ Error::Format { .. }) => check(e.class() == ErrorClass::Io, "format error class")?,
            Err(e) => return Err(format!("{label}: unexpected error {e}")),
            Ok(_) => return Err(format!("{label}: malformed header accepted")),
        }
    }

    let schema: serde_json::Value = serde_json::from_str(METRIC_REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).map_err(|e| e.to_string())?;
    let (x, y, _) = pair(JointCovariance::with_target_mi(2, 2, 0.5).unwrap(), 600, 5);
    let names = MetricName::parse_list("fd,kd_rbf,kd_poly,cos,mi1d,ksg").unwrap();
    let opts = MetricOptions {
        seeds: vec![0, 1],
        ..MetricOptions::default()
    };
    let report = evaluate_metrics("acceptance", &as_set(&x, "x"), &as_set(&y, "y"), &names, &opts);
    let value = serde_json::to_value(&report).unwrap();
    check(validator.is_valid(&value), "library report fails schema")?;
    let wide = FeatureSet::from_matrix(600, 20, vec![1.0; 12_000], Role::Expert, "wide").unwrap();
    let failed = evaluate_metrics("acceptance", &wide, &wide, &[MetricName::Ksg], &opts);
    check(validator.is_valid(&serde_json::to_value(&failed).unwrap()), "failed report fails schema")?;

    let t = tempfile::tempdir().unwrap();
    ok(&["--seed", "1", "--out", p(t.path()), "synth", "gaussian", "--n", "500"])?;
    let cli = ok(&["--json", "metrics", p(&t.path().join("manifest.json"))])?;
    let cli_value: serde_json::Value = serde_json::from_slice(&cli.stdout).map_err(|e| e.to_string())?;
    check(validator.is_valid(&cli_value), "CLI report fails schema")?;
    Ok("NPY f64/f32 bit-exact, 6 malformed headers rejected as format errors, reports schema-valid".into())
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("FD oracle", fd_oracle),
        ("kernel distance calibration", kernel_calibration),
        ("MI estimators vs closed form", mi_estimators),
        ("loss mechanics", loss_mechanics),
        ("distillation direction", distillation_direction),
        ("cross-neck direction", cross_neck_direction),
        ("capacity sweep direction", capacity_sweep),
        ("determinism", determinism),
        ("format conformance", format_conformance),
    ];
    let only: Option<Vec<usize>> = std::env::var("FEATPROBE_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let line = match &result {
            Ok(detail) => format!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => format!("criterion {id:>2} FAIL  {name}: {why} [{secs:.1}s]"),
        };
        // Written to the raw handle so the line shows without --nocapture.
        let _ = writeln!(std::io::stderr(), "{line}");
        if result.is_err() {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
