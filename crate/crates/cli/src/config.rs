//! Pipeline configuration and the precedence rules between it and flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use drrq::convert::ConversionTables;
use drrq::losses::LossWeights;
use drrq::project::DetectorSize;
use drrq::register::RegistrationConfig;
use drrq::{Error, ProjectionGeometry};
use serde::Deserialize;

use crate::cli::GeometryArgs;
use crate::io::fixed;

/// Defaults shared by all subcommands. Relative paths are resolved against
/// the directory of the config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub volume: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub objects: Option<PathBuf>,
    pub tables: Option<PathBuf>,
    pub geometry: Option<ProjectionGeometry>,
    pub weights: Option<LossWeights>,
    pub registration: Option<RegistrationConfig>,
    pub output_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.volume,
            &mut cfg.labels,
            &mut cfg.objects,
            &mut cfg.tables,
            &mut cfg.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for p in [&cfg.volume, &cfg.labels, &cfg.objects, &cfg.tables]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "config references missing file {}",
                    p.display()
                ))
                .into());
            }
        }
        if let Some(w) = &cfg.weights {
            w.validate()?;
        }
        if let Some(r) = &cfg.registration {
            r.validate()?;
        }
        if let Some(g) = &cfg.geometry {
            g.validate()?;
        }
        Ok(cfg)
    }

    /// Flag value, else config value, else a usage error naming the flag.
    pub fn path(
        &self,
        flag: &Option<PathBuf>,
        from_cfg: &Option<PathBuf>,
        name: &str,
    ) -> Result<PathBuf> {
        flag.clone().or_else(|| from_cfg.clone()).ok_or_else(|| {
            Error::Usage(format!("--{name} is required (or set it in --config)")).into()
        })
    }

    pub fn output_dir(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        self.path(flag, &self.output_dir, "out")
    }

    pub fn tables(&self, flag: &Option<PathBuf>) -> Result<ConversionTables> {
        match flag.as_ref().or(self.tables.as_ref()) {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading tables {}", p.display()))?;
                Ok(ConversionTables::from_json(&text)?)
            }
            None => Ok(ConversionTables::default()),
        }
    }

    /// Geometry from flags over config over defaults.
    pub fn geometry(&self, args: &GeometryArgs) -> Result<ProjectionGeometry> {
        let mut g = self.geometry.unwrap_or_default();
        if let Some(r) = &args.rotation {
            g.rotation_deg = fixed("rotation", r)?;
        }
        if let Some(p) = &args.pixel_spacing {
            g.pixel_spacing_mm = fixed("pixel-spacing", p)?;
        }
        if let Some(d) = &args.detector {
            g.detector = parse_detector(d)?;
        }
        if let Some(s) = args.step_mm {
            g.step_mm = s;
        }
        g.validate()?;
        Ok(g)
    }
}

fn parse_detector(s: &str) -> Result<DetectorSize> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(DetectorSize::Auto);
    }
    let bad = || Error::Usage(format!("detector must be HxW or auto, got `{s}`"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let height = h.trim().parse().map_err(|_| bad())?;
    let width = w.trim().parse().map_err(|_| bad())?;
    Ok(DetectorSize::Fixed { height, width })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detector_parsing() {
        assert_eq!(parse_detector("auto").unwrap(), DetectorSize::Auto);
        assert_eq!(
            parse_detector("12x34").unwrap(),
            DetectorSize::Fixed {
                height: 12,
                width: 34
            }
        );
        assert!(parse_detector("12by34").is_err());
    }

    #[test]
    fn flags_override_config() {
        let cfg = PipelineConfig {
            geometry: Some(ProjectionGeometry {
                pixel_spacing_mm: [2.0, 2.0],
                step_mm: 0.25,
                ..Default::default()
            }),
            ..Default::default()
        };
        let args = GeometryArgs {
            pixel_spacing: Some(vec![0.5, 0.75]),
            ..Default::default()
        };
        let g = cfg.geometry(&args).unwrap();
        assert_eq!(g.pixel_spacing_mm, [0.5, 0.75]);
        assert_eq!(g.step_mm, 0.25);
    }
}
