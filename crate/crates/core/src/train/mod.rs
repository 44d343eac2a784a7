//! Neck training with distillation-annealed objectives, cross-neck
//! (sequential) adaptation and two-pathway evaluation.
//!
//! The objective at step `s` is `L = a L_D + (1 - a) L_T` with
//! `a = max(0, 1 - s / horizon)`, where `L_D` is the MSE between neck output
//! and expert features and `L_T` the MSE between the frozen head applied to
//! the neck output and the head applied to the task target features.

mod head;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph, Tensor};
use crate::digest::config_hash;
use crate::error::{Error, Result};
use crate::featio::{FeatureSet, Role};
use crate::neck::{Neck, NeckConfig};
use crate::report::{evaluate_metrics, MetricName, MetricOptions, MetricReport, TOOLKIT_VERSION};
use crate::rng;

pub use head::{Head, HeadSpec, LossKind, TaskSpec};

/// Breakdowns kept in a training-abort error.
pub const ABORT_HISTORY: usize = 10;
/// Samples per inference chunk during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub alpha: f64,
    /// `L_D`: distillation MSE.
    pub distill: f64,
    /// `L_T`: task MSE through the frozen head.
    pub task: f64,
    /// `L = alpha L_D + (1 - alpha) L_T`.
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub experiment: String,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: ScheduleKind,
    /// Annealing horizon; `None` means the last step, so alpha reaches 0
    /// exactly when training ends.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    pub distill: bool,
    pub seed: u64,
    /// Held-out evaluation period in steps; the last step is always evaluated.
    pub eval_interval: usize,
    /// Metric suite run on held-out adapted vs expert features after training.
    pub eval_metrics: Vec<MetricName>,
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            experiment: "default".into(),
            steps: 1000,
            batch_size: 32,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            schedule: ScheduleKind::Linear,
            horizon: None,
            distill: true,
            seed: 0,
            eval_interval: 100,
            eval_metrics: Vec::new(),
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(self.steps.saturating_sub(1).max(1))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let h = self.horizon();
        if h == 0 || h > self.steps {
            return Err(Error::Config(format!(
                "alpha horizon must be in 1..={}, got {h}",
                self.steps
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// `max(0, 1 - step / horizon)`.
pub fn alpha_schedule(step: usize, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::Config("alpha horizon must be > 0".into()));
    }
    Ok((1.0 - step as f64 / horizon as f64).max(0.0))
}

/// Mean over all elements of the squared difference.
pub fn distill_loss(adapted: &Tensor, expert: &Tensor) -> Result<f64> {
    if adapted.shape() != expert.shape() {
        return Err(Error::Shape {
            op: "distill_loss",
            lhs: adapted.shape().to_vec(),
            rhs: expert.shape().to_vec(),
        });
    }
    if adapted.is_empty() {
        return Err(Error::InsufficientData("distillation loss of empty tensors".into()));
    }
    let sum: f64 = adapted
        .data()
        .iter()
        .zip(expert.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / adapted.len() as f64)
}

/// `alpha L_D + (1 - alpha) L_T`, evaluated in the same order as the graph.
pub fn combined_loss(alpha: f64, distill: f64, task: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(alpha * distill + (1.0 - alpha) * task)
}

/// Paired training inputs: encoder features feed the neck, expert features
/// are the distillation target, and the head applied to `target` gives the
/// task target.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub encoder: FeatureSet,
    pub expert: FeatureSet,
    pub target: FeatureSet,
}

impl TrainData {
    /// Uses the expert features as the task target as well.
    pub fn new(encoder: FeatureSet, expert: FeatureSet) -> Self {
        TrainData {
            target: expert.clone(),
            encoder,
            expert,
        }
    }

    fn validate(&self, cfg: &NeckConfig) -> Result<()> {
        self.encoder.check_paired(&self.expert)?;
        self.encoder.check_paired(&self.target)?;
        let tokens = |fs: &FeatureSet| fs.tokens().unwrap_or(1);
        for fs in [&self.encoder, &self.expert, &self.target] {
            if tokens(fs) != cfg.tokens {
                return Err(Error::Config(format!(
                    "`{}` has {} tokens, neck expects {}",
                    fs.name,
                    tokens(fs),
                    cfg.tokens
                )));
            }
        }
        if self.encoder.dim() != cfg.d_in {
            return Err(Error::Config(format!(
                "encoder dim {} does not match neck d_in {}",
                self.encoder.dim(),
                cfg.d_in
            )));
        }
        if self.expert.dim() != cfg.d_out || self.target.dim() != cfg.d_out {
            return Err(Error::Config(format!(
                "expert/target dims {}/{} do not match neck d_out {}",
                self.expert.dim(),
                self.target.dim(),
                cfg.d_out
            )));
        }
        Ok(())
    }
}

/// `[N, T, D]` view of a feature set; rank-2 sets get `T = 1`.
fn token_tensor(fs: &FeatureSet) -> Tensor {
    let t = fs.data();
    if t.rank() == 3 {
        t.clone()
    } else {
        t.clone().reshape(&[t.rows(), 1, t.cols()]).expect("same length")
    }
}

/// Flattens `[N, T, D]` to `[N * T, D]`.
fn flat_rows(t: &Tensor) -> Tensor {
    let d = *t.shape().last().expect("non-scalar");
    t.clone().reshape(&[t.len() / d, d]).expect("same length")
}

/// Seeded 80/20 split, fixed per experiment id.
pub fn experiment_split(experiment: &str, n: usize) -> (Vec<usize>, Vec<usize>) {
    let seed = rng::derive_seed(0, &format!("split:{experiment}"));
    let perm = rng::permutation(&mut rng::seeded(seed), n);
    let eval = ((n as f64) * 0.2).round().max(1.0) as usize;
    let eval = eval.min(n.saturating_sub(1));
    let (a, b) = perm.split_at(n - eval);
    (a.to_vec(), b.to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub heldout_task: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub heldout_task: f64,
    pub heldout_distill: f64,
    pub train_task: f64,
    pub heldout_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub seed: u64,
    /// Task ids along the pathway, upstream first.
    pub neck_sequence: Vec<String>,
    pub train_config: TrainConfig,
    pub neck_config: NeckConfig,
    pub task: TaskSpec,
    pub losses: Vec<LossBreakdown>,
    pub eval_curve: Vec<EvalPoint>,
    pub final_eval: FinalEval,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    pub neck_fingerprint: String,
    /// Hashes of frozen components, identical before and after training.
    pub frozen_fingerprints: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    pub config_hash: String,
    pub toolkit_version: String,
}

impl RunRecord {
    /// `"task1 → task2"` style label.
    pub fn sequence_label(&self) -> String {
        self.neck_sequence.join(" → ")
    }

    pub fn record_hash(&self) -> String {
        config_hash(self)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }

    pub fn final_train_loss(&self) -> Option<&LossBreakdown> {
        self.losses.last()
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub neck: Neck,
    /// Held-out neck outputs (`F̂_T`) and matching expert features (`F_T`).
    pub adapted_eval: FeatureSet,
    pub expert_eval: FeatureSet,
}

struct Prepared {
    inputs: Tensor,
    expert: Tensor,
    head_target: Tensor,
    train_rows: Vec<usize>,
    eval_rows: Vec<usize>,
}

fn abort(step: usize, message: String, history: &[LossBreakdown]) -> Error {
    let start = history.len().saturating_sub(ABORT_HISTORY);
    Error::TrainingAbort {
        step,
        message,
        recent: history[start..].to_vec(),
    }
}

/// Rows `rows` of a `[N, T, D]` tensor, flattened to `[rows * T, D]`.
fn gather_flat(t: &Tensor, rows: &[usize]) -> Tensor {
    flat_rows(&t.select_rows(rows))
}

fn task_mse(neck: &Neck, head: &Head, p: &Prepared, rows: &[usize]) -> Result<(f64, f64, Tensor)> {
    let out = neck.forward_batched(&p.inputs.select_rows(rows), EVAL_CHUNK)?;
    let flat = flat_rows(&out);
    let task = distill_loss(&head.apply(&flat)?, &gather_flat(&p.head_target, rows))?;
    let distill = distill_loss(&flat, &gather_flat(&p.expert, rows))?;
    Ok((task, distill, out))
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    cfg: &TrainConfig,
    neck_cfg: &NeckConfig,
    data: &TrainData,
    inputs: Tensor,
    task: &TaskSpec,
    neck_sequence: Vec<String>,
    mut frozen: BTreeMap<String, String>,
    extra_frozen_check: &dyn Fn() -> Result<()>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    neck_cfg.validate()?;
    let head = Head::build(&task.head, neck_cfg.d_out)?;
    let head_hash = head.fingerprint();
    frozen.insert("head".into(), head_hash.clone());

    let expert = token_tensor(&data.expert);
    let target = token_tensor(&data.target);
    let n = expert.shape()[0];
    if n < 2 {
        return Err(Error::InsufficientData(format!("training needs N >= 2, got {n}")));
    }
    let t = neck_cfg.tokens;
    let head_target = head
        .apply(&flat_rows(&target))?
        .reshape(&[n, t, head.out_dim(neck_cfg.d_out)])?;
    let (train_rows, eval_rows) = experiment_split(&cfg.experiment, n);
    let p = Prepared {
        inputs,
        expert,
        head_target,
        train_rows,
        eval_rows,
    };

    let mut neck = Neck::init(neck_cfg.clone())?;
    let mut adam = AdamState::new(cfg.adam(), neck.params())?;
    let horizon = cfg.horizon();
    let mut batch_rng = rng::seeded(rng::derive_seed(cfg.seed, "train-batches"));
    let batch = cfg.batch_size.min(p.train_rows.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = usize::MAX;
    let mut losses: Vec<LossBreakdown> = Vec::with_capacity(cfg.steps);
    let mut eval_curve = Vec::new();

    for step in 0..cfg.steps {
        if cursor.saturating_add(batch) > order.len() {
            let perm = rng::permutation(&mut batch_rng, p.train_rows.len());
            order = perm.into_iter().map(|i| p.train_rows[i]).collect();
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;

        let alpha = if cfg.distill { alpha_schedule(step, horizon)? } else { 0.0 };
        let mut g = Graph::new();
        let vars = neck.bind(&mut g, true);
        let x = g.input(p.inputs.select_rows(rows));
        let out = neck
            .forward_graph(&mut g, &vars, x)
            .map_err(|e| abort(step, e.to_string(), &losses))?;
        let flat = g.reshape(out, &[batch * t, neck_cfg.d_out])?;
        let expert_b = g.input(gather_flat(&p.expert, rows));
        let ld = g.mse(flat, expert_b)?;
        let pred = head.apply_graph(&mut g, flat)?;
        let target_b = g.input(gather_flat(&p.head_target, rows));
        let lt = g.mse(pred, target_b)?;
        let wd = g.scale(ld, alpha);
        let wt = g.scale(lt, 1.0 - alpha);
        let total = g.add(wd, wt)?;

        let entry = LossBreakdown {
            step,
            alpha,
            distill: g.value(ld).item(),
            task: g.value(lt).item(),
            total: g.value(total).item(),
        };
        losses.push(entry);
        if !entry.total.is_finite() || !entry.distill.is_finite() || !entry.task.is_finite() {
            return Err(abort(step, "non-finite loss".into(), &losses));
        }
        let expected = combined_loss(alpha, entry.distill, entry.task)?;
        if expected.to_bits() != entry.total.to_bits() {
            return Err(Error::Invariant(format!(
                "step {step}: logged total {} differs from alpha-weighted sum {expected}",
                entry.total
            )));
        }

        let grads = g.backward(total)?;
        let grads: Vec<Tensor> = vars.vars().iter().map(|&v| grads.get(v)).collect();
        adam.step(neck.params_mut(), &grads)
            .map_err(|e| abort(step, e.to_string(), &losses))?;

        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            let (heldout_task, _, _) = task_mse(&neck, &head, &p, &p.eval_rows)
                .map_err(|e| abort(step, e.to_string(), &losses))?;
            eval_curve.push(EvalPoint {
                step: step + 1,
                heldout_task,
            });
        }
    }

    let (heldout_task, heldout_distill, adapted) = task_mse(&neck, &head, &p, &p.eval_rows)?;
    let (train_task, _, _) = task_mse(&neck, &head, &p, &p.train_rows)?;
    if head.fingerprint() != head_hash {
        return Err(Error::Invariant("frozen head changed during training".into()));
    }
    extra_frozen_check()?;

    let adapted_eval = FeatureSet::new(
        if data.expert.tokens().is_some() { adapted } else { flat_rows(&adapted) },
        data.expert.dtype,
        Role::Adapted,
        "adapted",
        format!("neck:{}", task.id),
    )?;
    let expert_eval = data.expert.select(&p.eval_rows)?;
    let metrics = (!cfg.eval_metrics.is_empty()).then(|| {
        evaluate_pathways(&cfg.experiment, &adapted_eval, &expert_eval, &cfg.eval_metrics, &MetricOptions::default())
    });

    let run_hash = config_hash(&(cfg, neck_cfg, task, &neck_sequence, &data.encoder.source, &data.expert.source));
    let record = RunRecord {
        experiment: cfg.experiment.clone(),
        seed: cfg.seed,
        neck_sequence,
        train_config: cfg.clone(),
        neck_config: neck_cfg.clone(),
        task: task.clone(),
        losses,
        eval_curve,
        final_eval: FinalEval {
            heldout_task,
            heldout_distill,
            train_task,
            heldout_rows: p.eval_rows.len(),
        },
        metrics,
        neck_fingerprint: neck.fingerprint(),
        frozen_fingerprints: frozen,
        checkpoint: None,
        wall_clock_secs: cfg.record_wall_clock.then(|| started.elapsed().as_secs_f64()),
        config_hash: run_hash,
        toolkit_version: TOOLKIT_VERSION.to_string(),
    };
    Ok(TrainOutcome {
        record,
        neck,
        adapted_eval,
        expert_eval,
    })
}

/// Trains a fresh neck (initialized from `neck_cfg`) on `task`.
pub fn train_neck(cfg: &TrainConfig, neck_cfg: &NeckConfig, data: &TrainData, task: &TaskSpec) -> Result<TrainOutcome> {
    data.validate(neck_cfg)?;
    let inputs = token_tensor(&data.encoder);
    let encoder_hash = crate::digest::tensor_hash(data.encoder.data());
    let mut frozen = BTreeMap::new();
    frozen.insert("encoder".into(), encoder_hash.clone());
    let check = || {
        if crate::digest::tensor_hash(data.encoder.data()) != encoder_hash {
            return Err(Error::Invariant("encoder features changed during training".into()));
        }
        Ok(())
    };
    run_training(cfg, neck_cfg, data, inputs, task, vec![task.id.clone()], frozen, &check)
}

/// Trains `neck2` on the outputs of the frozen `neck1`.
pub fn train_cross_neck(
    neck1: &Neck,
    upstream_task: &str,
    cfg: &TrainConfig,
    neck2_cfg: &NeckConfig,
    data: &TrainData,
    task2: &TaskSpec,
) -> Result<TrainOutcome> {
    let c1 = neck1.config();
    if neck2_cfg.d_in != c1.d_out {
        return Err(Error::Config(format!(
            "neck2 d_in {} does not match neck1 d_out {}",
            neck2_cfg.d_in, c1.d_out
        )));
    }
    if neck2_cfg.tokens != c1.tokens {
        return Err(Error::Config(format!(
            "neck2 tokens {} does not match neck1 tokens {}",
            neck2_cfg.tokens, c1.tokens
        )));
    }
    if data.encoder.dim() != c1.d_in {
        return Err(Error::Config(format!(
            "encoder dim {} does not match neck1 d_in {}",
            data.encoder.dim(),
            c1.d_in
        )));
    }
    let fp = neck1.fingerprint();
    let upstream = neck1.forward_batched(&token_tensor(&data.encoder), EVAL_CHUNK)?;
    let staged = TrainData {
        encoder: FeatureSet::new(
            upstream.clone(),
            data.encoder.dtype,
            Role::Adapted,
            "neck1",
            format!("neck:{upstream_task}"),
        )?,
        expert: data.expert.clone(),
        target: data.target.clone(),
    };
    staged.validate(neck2_cfg)?;
    let mut frozen = BTreeMap::new();
    frozen.insert("neck1".into(), fp.clone());
    let check = || {
        if neck1.fingerprint() != fp {
            return Err(Error::Invariant("frozen neck1 changed during training".into()));
        }
        Ok(())
    };
    run_training(
        cfg,
        neck2_cfg,
        &staged,
        upstream,
        task2,
        vec![upstream_task.to_string(), task2.id.clone()],
        frozen,
        &check,
    )
}

/// Runs the selected metrics on `(F̂_T, F_T)`; failures stay inside the report.
pub fn evaluate_pathways(
    experiment: &str,
    adapted: &FeatureSet,
    expert: &FeatureSet,
    metrics: &[MetricName],
    opts: &MetricOptions,
) -> MetricReport {
    evaluate_metrics(experiment, adapted, expert, metrics, opts)
}
