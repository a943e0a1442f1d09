//! On-disk layout shared by the stage commands.
//!
//! A stage directory holds one subdirectory per kind (`wv/`, `v/`, `m/`),
//! each with a `manifest.json` listing its files in object order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use drrq::format::{read_image, write_image, ImageFile, ImageKind};
use drrq::{DrrKind, DrrStack, Error};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub name: String,
    pub file: String,
}

/// Per-kind volumes written by `convert`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeManifest {
    pub kind: DrrKind,
    pub items: Vec<ManifestItem>,
}

/// DRR stack written by `project`, channels in object order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackManifest {
    pub kind: DrrKind,
    pub units: String,
    pub pixel_spacing_mm: [f64; 2],
    pub shape: [usize; 2],
    pub channels: Vec<ManifestItem>,
}

pub fn parse_kinds(kinds: &[String]) -> Result<Vec<DrrKind>> {
    let mut out = Vec::new();
    for k in kinds {
        let kind = DrrKind::parse(k.trim())
            .ok_or_else(|| Error::Usage(format!("unknown DRR kind `{k}` (expected wv, v or m)")))?;
        if !out.contains(&kind) {
            out.push(kind);
        }
    }
    Ok(out)
}

/// Exactly `N` comma-separated values for `flag`.
pub fn fixed<const N: usize>(flag: &str, values: &[f64]) -> Result<[f64; N]> {
    values.try_into().map_err(|_| {
        Error::Usage(format!(
            "--{flag} takes {N} comma-separated values, got {}",
            values.len()
        ))
        .into()
    })
}

pub fn kind_dir(root: &Path, kind: DrrKind) -> PathBuf {
    root.join(kind.as_str())
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

pub fn emit_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit(path, &text)
}

/// File stem safe for any object name.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn write_stack(dir: &Path, stack: &DrrStack) -> Result<()> {
    create_dir(dir)?;
    let (h, w) = stack.shape();
    let kind = stack.kind();
    let mut channels = Vec::with_capacity(stack.len());
    for (name, img) in stack.names().iter().zip(stack.channels()) {
        let file = format!("{}.mski", file_stem(name));
        write_image(
            &ImageFile {
                image: img.clone(),
                pixel_spacing_mm: stack.pixel_spacing_mm(),
                kind: ImageKind::Drr(kind),
                object_name: name.clone(),
                units: kind.pixel_units().to_string(),
            },
            dir.join(&file),
        )?;
        channels.push(ManifestItem {
            name: name.clone(),
            file,
        });
    }
    write_json(
        &dir.join(MANIFEST),
        &StackManifest {
            kind,
            units: kind.pixel_units().to_string(),
            pixel_spacing_mm: stack.pixel_spacing_mm(),
            shape: [h, w],
            channels,
        },
    )
}

pub fn read_stack(dir: &Path) -> Result<DrrStack> {
    let manifest: StackManifest = read_json(&dir.join(MANIFEST))?;
    let mut names = Vec::new();
    let mut images = Vec::new();
    for item in &manifest.channels {
        let f = read_image(dir.join(&item.file))
            .with_context(|| format!("reading {}", dir.join(&item.file).display()))?;
        if f.kind != ImageKind::Drr(manifest.kind) {
            return Err(drrq::Error::format(
                "kind",
                format!(
                    "{} holds a {} image in a {} stack",
                    item.file,
                    f.kind.as_str(),
                    manifest.kind
                ),
            )
            .into());
        }
        if f.pixel_spacing_mm != manifest.pixel_spacing_mm {
            return Err(drrq::Error::format(
                "pixel_spacing_mm",
                format!("{} disagrees with its manifest", item.file),
            )
            .into());
        }
        names.push(item.name.clone());
        images.push(f.image);
    }
    Ok(DrrStack::new(
        manifest.kind,
        manifest.pixel_spacing_mm,
        names,
        images,
    )?)
}

/// One row of the `sum` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumRow {
    pub object: String,
    pub kind: DrrKind,
    pub sum: f64,
    pub units: String,
}

pub fn write_sums(rows: &[SumRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Sums keyed by `(kind, object)`.
pub fn read_sums(path: &Path) -> Result<BTreeMap<(DrrKind, String), f64>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for row in r.deserialize() {
        let row: SumRow = row.with_context(|| format!("parsing {}", path.display()))?;
        out.insert((row.kind, row.object), row.sum);
    }
    Ok(out)
}
