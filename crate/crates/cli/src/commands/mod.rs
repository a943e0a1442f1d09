mod evaluation;
mod pipeline;
mod supervision;

use std::path::Path;

use anyhow::{Context, Result};
use drrq::format::{read_volume, write_volume, VolumeFile};
use drrq::{LabelMap, ObjectSet, ScalarVolume};

use crate::cli::{Command, CtArgs};
use crate::config::PipelineConfig;
use crate::io::read_json;

/// Settings shared by every subcommand.
pub struct Env {
    pub cfg: PipelineConfig,
    pub seed: Option<u64>,
}

pub fn run(cmd: Command, env: &Env) -> Result<()> {
    match cmd {
        Command::Phantom(a) => pipeline::phantom(a, env),
        Command::Convert(a) => pipeline::convert(a, env),
        Command::Project(a) => pipeline::project(a, env),
        Command::Sum(a) => pipeline::sum(a),
        Command::Register(a) => supervision::register(a, env),
        Command::AlignedTargets(a) => supervision::aligned_targets(a, env),
        Command::Loss(a) => supervision::loss(a, env),
        Command::Metrics(a) => evaluation::metrics(a),
        Command::Gradcheck(a) => evaluation::gradcheck(a, env),
    }
}

fn read_scalar(path: &Path) -> Result<ScalarVolume> {
    let v = read_volume(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(v.into_scalar()?)
}

fn read_labels(path: &Path) -> Result<LabelMap> {
    let v = read_volume(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(v.into_labels()?)
}

fn write_scalar(path: &Path, v: ScalarVolume) -> Result<()> {
    write_volume(&VolumeFile::Scalar(v), path)
        .with_context(|| format!("writing {}", path.display()))
}

/// HU volume, labels and object table named by flags or config.
struct Ct {
    volume: ScalarVolume,
    labels: LabelMap,
    objects: ObjectSet,
}

fn load_ct(args: &CtArgs, env: &Env) -> Result<Ct> {
    let cfg = &env.cfg;
    let volume = read_scalar(&cfg.path(&args.volume, &cfg.volume, "volume")?)?;
    let labels = read_labels(&cfg.path(&args.labels, &cfg.labels, "labels")?)?;
    let objects: ObjectSet = read_json(&cfg.path(&args.objects, &cfg.objects, "objects")?)?;
    objects.covers(&labels)?;
    Ok(Ct {
        volume,
        labels,
        objects,
    })
}
