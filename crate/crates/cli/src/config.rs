//! Experiment configs (TOML or JSON) for `train`, `cross` and `sweep`.

use std::path::{Path, PathBuf};

use featprobe_core::featio::{synth_task_pipeline, FeatureSet, Manifest, SynthSpec};
use featprobe_core::neck::NeckConfig;
use featprobe_core::train::{TaskSpec, TrainConfig, TrainData};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::TrainOverrides;
use crate::{CliError, CliResult};

pub const BUILTIN_PREFIX: &str = "builtin:";

const BUILTINS: [(&str, &str); 2] = [
    ("quickstart", include_str!("../configs/quickstart.toml")),
    ("capacity", include_str!("../configs/capacity.toml")),
];

pub fn builtin_names() -> Vec<&'static str> {
    BUILTINS.iter().map(|(n, _)| *n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    pub data: DataConfig,
    pub task: TaskSpec,
    #[serde(default)]
    pub neck: NeckSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross: Option<CrossSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest path, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// In-memory synthetic pipeline instead of files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthData>,
    #[serde(default = "default_encoder_role")]
    pub encoder_role: String,
    #[serde(default = "default_expert_role")]
    pub expert_role: String,
}

fn default_encoder_role() -> String {
    "encoder".into()
}

fn default_expert_role() -> String {
    "expert1".into()
}

fn default_gain() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthData {
    pub n: usize,
    pub latent_dim: usize,
    pub tokens: usize,
    pub encoder_dim: usize,
    pub expert_dim: usize,
    pub task_rank: usize,
    #[serde(default)]
    pub overlap: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_gain")]
    pub encoder_gain: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthData {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            encoder_gain: self.encoder_gain,
            ..SynthSpec::pipeline(
                self.latent_dim,
                self.tokens,
                self.encoder_dim,
                self.expert_dim,
                self.task_rank,
                self.overlap,
                self.noise,
                self.seed,
            )
        }
    }
}

/// Neck architecture; dimensions default to those of the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeckSection {
    pub layers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    pub d_model: usize,
    pub mlp_ratio: usize,
    /// Initialization seed; defaults to the training seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_in: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_out: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<usize>,
}

impl Default for NeckSection {
    fn default() -> Self {
        let base = NeckConfig::new(2, 1, 1, 1);
        NeckSection {
            layers: base.layers,
            heads: None,
            d_model: base.d_model,
            mlp_ratio: base.mlp_ratio,
            seed: None,
            d_in: None,
            d_out: None,
            tokens: None,
        }
    }
}

fn pick(field: &str, explicit: Option<usize>, inferred: usize) -> CliResult<usize> {
    match explicit {
        Some(v) if v != inferred => Err(CliError::config(format!(
            "neck {field} = {v} does not match the data ({inferred})"
        ))),
        _ => Ok(inferred),
    }
}

impl NeckSection {
    pub fn resolve(&self, d_in: usize, d_out: usize, tokens: usize, train_seed: u64) -> CliResult<NeckConfig> {
        let cfg = NeckConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_in: pick("d_in", self.d_in, d_in)?,
            d_out: pick("d_out", self.d_out, d_out)?,
            tokens: pick("tokens", self.tokens, tokens)?,
            mlp_ratio: self.mlp_ratio,
            seed: self.seed.unwrap_or(train_seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossSection {
    /// Frozen first-neck checkpoint, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neck1: Option<PathBuf>,
    #[serde(default = "default_upstream")]
    pub upstream_task: String,
}

fn default_upstream() -> String {
    "task1".into()
}

/// Parses TOML, or JSON when the path ends in `.json`.
pub fn parse_text<T: DeserializeOwned>(text: &str, json: bool, origin: &str) -> CliResult<T> {
    if json {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("{origin}: {e}")))
    } else {
        toml::from_str(text).map_err(|e| CliError::config(format!("{origin}: {e}")))
    }
}

pub fn load_file<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| featprobe_core::Error::io(path, e))?;
    let json = path.extension().is_some_and(|e| e == "json");
    parse_text(&text, json, &path.display().to_string())
}

/// A loaded config and the directory its relative paths resolve against.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn experiment(&self) -> &str {
        &self.config.train.experiment
    }
}

pub fn load_experiment(spec: &str) -> CliResult<Loaded> {
    let (mut config, base_dir): (ExperimentConfig, PathBuf) = match spec.strip_prefix(BUILTIN_PREFIX) {
        Some(name) => {
            let text = BUILTINS
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| *t)
                .ok_or_else(|| {
                    CliError::config(format!(
                        "unknown builtin config `{name}` (available: {})",
                        builtin_names().join(", ")
                    ))
                })?;
            (parse_text(text, false, spec)?, PathBuf::from("."))
        }
        None => {
            let path = Path::new(spec);
            (
                load_file(path)?,
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
            )
        }
    };
    if let Some(id) = config.experiment.clone() {
        config.train.experiment = id;
    }
    Ok(Loaded { config, base_dir })
}

/// Applies command-line overrides; flags win over file values.
pub fn apply_overrides(cfg: &mut ExperimentConfig, o: &TrainOverrides, seed: Option<u64>) {
    if let Some(e) = &o.experiment {
        cfg.experiment = Some(e.clone());
        cfg.train.experiment = e.clone();
    }
    if let Some(s) = o.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = o.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if o.no_distill {
        cfg.train.distill = false;
    }
    if o.wall_clock {
        cfg.train.record_wall_clock = true;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.neck.seed = None;
    }
}

fn pipeline_role(p: &featprobe_core::featio::TaskPipeline, role: &str) -> CliResult<FeatureSet> {
    let fs = match role {
        "encoder" => &p.encoder,
        "expert1" => &p.expert1,
        "expert2" => &p.expert2,
        "latent" => &p.latent,
        other => {
            return Err(CliError::config(format!(
                "synthetic data has no `{other}` role (roles: encoder, expert1, expert2, latent)"
            )))
        }
    };
    Ok(fs.clone())
}

/// Encoder, expert and task-target features named by the config.
pub fn load_data(loaded: &Loaded) -> CliResult<TrainData> {
    let cfg = &loaded.config;
    let d = &cfg.data;
    let roles = [d.encoder_role.as_str(), d.expert_role.as_str(), cfg.task.target_role.as_str()];
    let sets: Vec<FeatureSet> = match (&d.manifest, &d.synth) {
        (Some(m), None) => {
            let manifest = Manifest::load(&loaded.resolve(m))?;
            roles
                .iter()
                .map(|r| manifest.load_role(r).map_err(CliError::from))
                .collect::<CliResult<_>>()?
        }
        (None, Some(s)) => {
            let p = synth_task_pipeline(&s.spec(), s.n)?;
            roles.iter().map(|r| pipeline_role(&p, r)).collect::<CliResult<_>>()?
        }
        _ => {
            return Err(CliError::config(
                "data needs exactly one of `manifest` or `synth`",
            ))
        }
    };
    let [encoder, expert, target]: [FeatureSet; 3] = sets.try_into().expect("three roles");
    Ok(TrainData { encoder, expert, target })
}
