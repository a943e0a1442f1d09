//! Data stages: phantom → convert → project → sum.

use std::path::Path;

use anyhow::{Context, Result};
use drrq::convert::convert_volume;
use drrq::format::{write_volume, VolumeFile};
use drrq::phantom::{generate, PhantomSpec};
use drrq::project::{self as proj, intensity_sum};
use drrq::{Error, ObjectClass};
use serde::Serialize;

use super::{load_ct, read_scalar, write_scalar, Env};
use crate::cli::{ConvertArgs, PhantomArgs, Preset, ProjectArgs, SumArgs};
use crate::io::{
    create_dir, emit, file_stem, kind_dir, parse_kinds, read_json, read_stack, write_json,
    write_stack, write_sums, ManifestItem, SumRow, VolumeManifest, MANIFEST,
};

#[derive(Serialize)]
struct TruthRow<'a> {
    object: &'a str,
    volume_cm3_analytic: f64,
    volume_cm3_voxel: f64,
    lean_mass_g: f64,
    class: ObjectClass,
    label: u16,
    overlap_fraction: f64,
}

pub fn phantom(args: PhantomArgs, env: &Env) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PhantomSpec::from_json(&text)?
        }
        None => match args.preset {
            Preset::Default => PhantomSpec::default(),
            Preset::PelvisAnalog => PhantomSpec::pelvis_analog(),
        },
    };
    if let Some(seed) = env.seed {
        spec.seed = seed;
    }
    let tables = env.cfg.tables(&args.tables)?;
    let out = env.cfg.output_dir(&args.out)?;
    let ph = generate(&spec, &tables)?;

    create_dir(&out)?;
    write_json(&out.join("spec.json"), &spec)?;
    write_scalar(&out.join("volume.mskv"), ph.volume)?;
    write_volume(&VolumeFile::Labels(ph.labels), out.join("labels.mskv"))?;
    write_json(&out.join("objects.json"), &ph.objects)?;

    let mut w = csv::Writer::from_path(out.join("truth.csv"))?;
    for t in &ph.truth {
        w.serialize(TruthRow {
            object: &t.name,
            volume_cm3_analytic: t.volume_cm3_analytic,
            volume_cm3_voxel: t.volume_cm3_voxel,
            lean_mass_g: t.lean_mass_g,
            class: t.class,
            label: t.label,
            overlap_fraction: t.overlap_fraction,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn convert(args: ConvertArgs, env: &Env) -> Result<()> {
    let ct = load_ct(&args.ct, env)?;
    let tables = env.cfg.tables(&args.ct.tables)?;
    let out = env.cfg.output_dir(&args.out)?;
    for kind in parse_kinds(&args.kinds)? {
        let vols = convert_volume(&ct.volume, &ct.labels, &ct.objects, kind, &tables)?;
        let dir = kind_dir(&out, kind);
        create_dir(&dir)?;
        let mut items = Vec::new();
        for (entry, v) in ct.objects.entries().iter().zip(vols) {
            let file = format!("{}.mskv", file_stem(&entry.name));
            write_scalar(&dir.join(&file), v)?;
            items.push(ManifestItem {
                name: entry.name.clone(),
                file,
            });
        }
        write_json(&dir.join(MANIFEST), &VolumeManifest { kind, items })?;
    }
    Ok(())
}

pub fn project(args: ProjectArgs, env: &Env) -> Result<()> {
    let geom = env.cfg.geometry(&args.geometry)?;
    let out = env.cfg.output_dir(&args.out)?;
    for kind in parse_kinds(&args.kinds)? {
        let dir = kind_dir(&args.input, kind);
        let manifest: VolumeManifest = read_json(&dir.join(MANIFEST))?;
        if manifest.kind != kind {
            return Err(Error::format(
                "kind",
                format!("{} lists {} volumes", dir.display(), manifest.kind),
            )
            .into());
        }
        let vols = manifest
            .items
            .iter()
            .map(|item| read_scalar(&dir.join(&item.file)))
            .collect::<Result<Vec<_>>>()?;
        let names = manifest.items.iter().map(|i| i.name.clone()).collect();
        let stack = proj::project(&vols, &geom)?.with_names(names)?;
        write_stack(&kind_dir(&out, kind), &stack)?;
    }
    Ok(())
}

pub fn sum(args: SumArgs) -> Result<()> {
    let mut rows = Vec::new();
    for kind in parse_kinds(&args.kinds)? {
        let stack = read_stack(&kind_dir(&args.input, kind))?;
        for (i, name) in stack.names().iter().enumerate() {
            rows.push(SumRow {
                object: name.clone(),
                kind,
                sum: intensity_sum(&stack, i)?,
                units: kind.sum_units().to_string(),
            });
        }
    }
    emit(args.out.as_deref().map(Path::new), &write_sums(&rows)?)
}
