//! Supervision stages: registration, aligned targets, loss evaluation.

use std::collections::BTreeMap;

use anyhow::{Context, Result};
use drrq::format::read_image;
use drrq::losses::{loss_full, GanTerms, LossWeights, PredictionBundle, SupervisionBundle};
use drrq::project::DetectorSize;
use drrq::register::{
    make_aligned_targets, register as run_registration, CtSource, RegistrationConfig,
};
use drrq::{DrrKind, DrrStack, Error, RigidPose};
use serde::{Deserialize, Serialize};

use super::{load_ct, read_scalar, Env};
use crate::cli::{AlignedArgs, LossArgs, RegisterArgs};
use crate::io::{
    create_dir, emit_json, fixed, kind_dir, read_json, read_stack, read_sums, write_json,
    write_stack,
};

const ALIGNED: &str = "aligned.json";

pub fn register(args: RegisterArgs, env: &Env) -> Result<()> {
    let bone = read_scalar(&args.bone)?;
    let target =
        read_image(&args.target).with_context(|| format!("reading {}", args.target.display()))?;

    let mut geom = env.cfg.geometry(&args.geometry)?;
    if env.cfg.geometry.is_none() {
        // unless told otherwise, the detector is the target image
        if args.geometry.pixel_spacing.is_none() {
            geom.pixel_spacing_mm = target.pixel_spacing_mm;
        }
        if args.geometry.detector.is_none() {
            let (height, width) = target.image.shape();
            geom.detector = DetectorSize::Fixed { height, width };
        }
    }

    let mut cfg: RegistrationConfig = match &args.registration {
        Some(p) => read_json(p)?,
        None => env.cfg.registration.unwrap_or_default(),
    };
    if let Some(seed) = env.seed {
        cfg.seed = seed;
    }
    let init = match &args.init {
        Some(v) => {
            let [rx, ry, rz, tx, ty, tz] = fixed("init", v)?;
            RigidPose::new([rx, ry, rz], [tx, ty, tz])?
        }
        None => RigidPose::IDENTITY,
    };
    let result = run_registration(&bone, &target.image, &init, &cfg, &geom)?;
    emit_json(args.out.as_deref(), &result)
}

/// A bare pose or anything carrying one under `pose` (such as a
/// registration report).
#[derive(Deserialize)]
#[serde(untagged)]
enum PoseEntry {
    Pose(RigidPose),
    Report { pose: RigidPose },
}

#[derive(Debug, Serialize, Deserialize)]
struct AlignedManifest {
    bone_indices: Vec<usize>,
    names: Vec<String>,
}

pub fn aligned_targets(args: AlignedArgs, env: &Env) -> Result<()> {
    let ct = load_ct(&args.ct, env)?;
    let tables = env.cfg.tables(&args.ct.tables)?;
    let geom = env.cfg.geometry(&args.geometry)?;
    let out = env.cfg.output_dir(&args.out)?;
    let entries: BTreeMap<String, PoseEntry> = read_json(&args.poses)?;
    let poses = entries
        .into_iter()
        .map(|(name, e)| match e {
            PoseEntry::Pose(p) | PoseEntry::Report { pose: p } => (name, p),
        })
        .collect();

    let source = CtSource {
        volume: &ct.volume,
        labels: &ct.labels,
        objects: &ct.objects,
        tables: &tables,
    };
    let targets = make_aligned_targets(source, &poses, args.bones.as_deref(), &geom)?;
    create_dir(&out)?;
    for (kind, images) in &targets.images {
        let stack = DrrStack::new(
            *kind,
            targets.pixel_spacing_mm,
            targets.names.clone(),
            images.clone(),
        )?;
        write_stack(&kind_dir(&out, *kind), &stack)?;
    }
    write_json(
        &out.join(ALIGNED),
        &AlignedManifest {
            bone_indices: targets.bone_indices,
            names: targets.names,
        },
    )
}

pub fn loss(args: LossArgs, env: &Env) -> Result<()> {
    let [wv, v, m] = DrrKind::ALL.map(|k| read_stack(&kind_dir(&args.predictions, k)));
    let xray =
        read_image(&args.xray).with_context(|| format!("reading {}", args.xray.display()))?;
    let bundle = PredictionBundle::new(wv?, v?, m?, xray.image)?;
    let names = bundle.stack(DrrKind::Wv).names().to_vec();

    let sums = read_sums(&args.target_sums)?;
    let mut sup = SupervisionBundle::default();
    for kind in DrrKind::ALL {
        let per_object = names
            .iter()
            .map(|n| {
                sums.get(&(kind, n.clone()))
                    .copied()
                    .ok_or_else(|| Error::Config(format!("no {kind} target sum for object `{n}`")))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        sup.target_sums.insert(kind, per_object);
    }

    if let Some(dir) = &args.aligned {
        let manifest: AlignedManifest = read_json(&dir.join(ALIGNED))?;
        for name in &manifest.names {
            let index = names.iter().position(|n| n == name).ok_or_else(|| {
                Error::Config(format!(
                    "aligned bone `{name}` is not among the predicted objects"
                ))
            })?;
            sup.bone_indices.push(index);
        }
        for kind in DrrKind::ALL {
            let stack = read_stack(&kind_dir(dir, kind))?;
            if stack.names() != manifest.names.as_slice() {
                return Err(Error::Config(format!(
                    "aligned {kind} stack disagrees with {ALIGNED}"
                ))
                .into());
            }
            sup.aligned_bones.insert(kind, stack.into_channels());
        }
    }

    let weights: LossWeights = match &args.weights {
        Some(p) => read_json(p)?,
        None => env.cfg.weights.unwrap_or_default(),
    };
    let gan = GanTerms {
        adversarial: args.gan_adversarial,
        cycle: args.gan_cycle,
    };
    let full = loss_full(&bundle, &sup, gan, &weights)?;
    emit_json(args.out.as_deref(), &full.breakdown)
}
