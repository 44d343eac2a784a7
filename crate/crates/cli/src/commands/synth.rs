use std::fmt::Write as _;
use std::path::Path;

use featprobe_core::featio::{
    random_lift, save_feature_file, synth_gaussian_pair, synth_task_pipeline, FeatureSet, JointCovariance, Manifest,
    SynthSpec,
};
use featprobe_core::rng::derive_seed;
use serde_json::json;

use super::{required_out, to_value, write_json};
use crate::args::{Cli, GaussianArgs, PipelineArgs, SynthCommand};
use crate::{CliError, CliResult, CommandOutput};

pub fn run(cli: &Cli, cmd: &SynthCommand) -> CliResult<CommandOutput> {
    match cmd {
        SynthCommand::Gaussian(a) => gaussian(cli, a),
        SynthCommand::Pipeline(a) => pipeline(cli, a),
    }
}

fn write_sets(dir: &Path, experiment: &str, seed: u64, sets: &[(&str, &FeatureSet)], force: bool) -> CliResult<Manifest> {
    let mut manifest = Manifest::new(experiment, seed);
    for (role, fs) in sets {
        let file = format!("{role}.npy");
        save_feature_file(fs, &dir.join(&file), force)?;
        manifest.push(role, &file, fs.shape());
    }
    manifest.save(&dir.join("manifest.json"), force)?;
    Ok(manifest)
}

fn gaussian(cli: &Cli, a: &GaussianArgs) -> CliResult<CommandOutput> {
    let dir = required_out(cli, "synth gaussian")?;
    let seed = cli.seed.unwrap_or(0);
    let cov = match (a.rho, a.mi) {
        (Some(rho), _) => {
            if a.dx != 1 || a.dy != 1 {
                return Err(CliError::config("--rho describes a 1+1 dimensional pair; use --mi for larger pairs"));
            }
            JointCovariance::correlated(rho)?
        }
        (None, Some(mi)) => JointCovariance::with_target_mi(a.dx, a.dy, mi)?,
        (None, None) => JointCovariance::independent(a.dx, a.dy),
    };
    let spec = SynthSpec::gaussian_pair(cov, seed);
    let pair = synth_gaussian_pair(&spec, a.n)?;
    let (x, y) = match a.lift {
        Some(d) => (
            random_lift(&pair.x, d, derive_seed(seed, "lift-x"))?,
            random_lift(&pair.y, d, derive_seed(seed, "lift-y"))?,
        ),
        None => (pair.x, pair.y),
    };
    let experiment = format!("gaussian-dx{}-dy{}-seed{seed}", a.dx, a.dy);
    write_sets(&dir, &experiment, seed, &[("adapted", &x), ("expert", &y)], cli.force)?;
    let truth = json!({
        "kind": "gaussian",
        "true_mi": pair.true_mi,
        "units": "nats",
        "dx": a.dx,
        "dy": a.dy,
        "n": a.n,
        "lift": a.lift,
        "seed": seed,
        "spec": to_value(&spec),
    });
    write_json(&dir.join("ground_truth.json"), &truth, cli.force)?;
    let human = format!(
        "wrote {} (true MI {:.6} nats)\n",
        dir.join("manifest.json").display(),
        pair.true_mi
    );
    Ok(CommandOutput::ok(
        json!({"manifest": dir.join("manifest.json"), "ground_truth": truth}),
        human,
    ))
}

fn pipeline(cli: &Cli, a: &PipelineArgs) -> CliResult<CommandOutput> {
    let dir = required_out(cli, "synth pipeline")?;
    let seed = cli.seed.unwrap_or(0);
    let spec = SynthSpec {
        encoder_gain: a.gain,
        ..SynthSpec::pipeline(a.latent, a.tokens, a.encoder_dim, a.expert_dim, a.rank, a.overlap, a.noise, seed)
    };
    let p = synth_task_pipeline(&spec, a.n)?;
    let experiment = format!("pipeline-omega{}-seed{seed}", a.overlap);
    let manifest = write_sets(
        &dir,
        &experiment,
        seed,
        &[
            ("encoder", &p.encoder),
            ("expert1", &p.expert1),
            ("expert2", &p.expert2),
            ("latent", &p.latent),
        ],
        cli.force,
    )?;
    let truth = json!({
        "kind": "pipeline",
        "overlap": a.overlap,
        "shared_rank": spec.shared_rank(),
        "task_rank": a.rank,
        "noise": a.noise,
        "encoder_gain": a.gain,
        "n": a.n,
        "seed": seed,
        "spec": to_value(&spec),
    });
    write_json(&dir.join("ground_truth.json"), &truth, cli.force)?;
    let mut human = String::new();
    let _ = writeln!(human, "wrote {}", dir.join("manifest.json").display());
    let _ = writeln!(human, "roles: {}", manifest.roles().join(", "));
    let _ = writeln!(human, "overlap {} ({} shared of {} directions)", a.overlap, spec.shared_rank(), a.rank);
    Ok(CommandOutput::ok(
        json!({"manifest": dir.join("manifest.json"), "roles": manifest.roles(), "ground_truth": truth}),
        human,
    ))
}
