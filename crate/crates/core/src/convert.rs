//! HU to tissue conversions behind the three DRR kinds.
//!
//! * `WV`: original intensity, window-normalized to `[0, 1]`.
//! * `V`: binary indicator of the object.
//! * `M`: lean mass density (g/cm³) for muscles, total mass density for bones.
//!
//! Voxels between `hu_low` and `hu_high` are treated as a fat/lean mixture
//! with linearly interpolated lean fraction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::project::DrrKind;
use crate::volume::{LabelMap, ObjectClass, ObjectSet, ScalarVolume, VolumeKind};

pub const DEFAULT_TABLES_JSON: &str = include_str!("../assets/conversion_tables_v1.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeanFractionBreakpoints {
    pub hu_low: f64,
    pub hu_high: f64,
}

impl Default for LeanFractionBreakpoints {
    fn default() -> Self {
        Self {
            hu_low: -30.0,
            hu_high: 30.0,
        }
    }
}

impl LeanFractionBreakpoints {
    pub fn fraction(&self, hu: f64) -> f64 {
        if hu <= self.hu_low {
            0.0
        } else if hu >= self.hu_high {
            1.0
        } else {
            (hu - self.hu_low) / (self.hu_high - self.hu_low)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionTables {
    pub lean_fraction: LeanFractionBreakpoints,
    /// `(hu, g/cm³)` knots of a piecewise-linear map, strictly increasing in hu.
    pub mass_density_lut: Vec<[f64; 2]>,
    /// `[hu_min, hu_max]` mapped linearly onto `[0, 1]` with clamping.
    pub wv_window: [f64; 2],
}

impl Default for ConversionTables {
    fn default() -> Self {
        Self::from_json(DEFAULT_TABLES_JSON).expect("bundled conversion tables are valid")
    }
}

impl ConversionTables {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: ConversionTables = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let lf = self.lean_fraction;
        if !(lf.hu_low.is_finite() && lf.hu_high.is_finite() && lf.hu_low < lf.hu_high) {
            return Err(Error::Config(format!(
                "lean fraction breakpoints must satisfy hu_low < hu_high, got {} / {}",
                lf.hu_low, lf.hu_high
            )));
        }
        if self.mass_density_lut.is_empty() {
            return Err(Error::Config("mass density LUT is empty".into()));
        }
        for (i, &[hu, rho]) in self.mass_density_lut.iter().enumerate() {
            if !hu.is_finite() || !rho.is_finite() || rho < 0.0 {
                return Err(Error::Config(format!(
                    "invalid LUT knot {i}: ({hu}, {rho})"
                )));
            }
            if i > 0 && hu <= self.mass_density_lut[i - 1][0] {
                return Err(Error::Config(format!(
                    "LUT hu values must be strictly increasing at knot {i}"
                )));
            }
        }
        let [lo, hi] = self.wv_window;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("invalid WV window [{lo}, {hi}]")));
        }
        Ok(())
    }

    fn density_unchecked(&self, hu: f64) -> f64 {
        let lut = &self.mass_density_lut;
        let first = lut[0];
        let last = lut[lut.len() - 1];
        if hu <= first[0] {
            return first[1];
        }
        if hu >= last[0] {
            return last[1];
        }
        // first knot with hu_k > hu; guaranteed in 1..len
        let k = lut.partition_point(|knot| knot[0] <= hu);
        let [h0, r0] = lut[k - 1];
        let [h1, r1] = lut[k];
        if hu == h0 {
            return r0;
        }
        r0 + (r1 - r0) * (hu - h0) / (h1 - h0)
    }

    fn weighted(&self, hu: f64) -> f64 {
        let [lo, hi] = self.wv_window;
        ((hu - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

/// Lean fraction with the default ±30 HU breakpoints.
pub fn lean_fraction(hu: f64) -> f64 {
    LeanFractionBreakpoints::default().fraction(hu)
}

pub fn mass_density(hu: f64, t: &ConversionTables) -> Result<f64> {
    if t.mass_density_lut.is_empty() {
        return Err(Error::Config("mass density LUT is empty".into()));
    }
    Ok(t.density_unchecked(hu))
}

pub fn lean_mass_density(hu: f64, t: &ConversionTables) -> Result<f64> {
    Ok(t.lean_fraction.fraction(hu) * mass_density(hu, t)?)
}

/// Per-object conversion of an HU volume. Output `i` corresponds to entry `i`
/// of `objects` and is zero outside that object's label.
pub fn convert_volume(
    v: &ScalarVolume,
    m: &LabelMap,
    objects: &ObjectSet,
    kind: DrrKind,
    t: &ConversionTables,
) -> Result<Vec<ScalarVolume>> {
    if v.kind() != VolumeKind::Hu {
        return Err(Error::Usage(format!(
            "conversion needs an HU volume, got {}",
            v.kind().as_str()
        )));
    }
    if v.grid() != m.grid() {
        return Err(Error::Dimension("volume and label map grids differ".into()));
    }
    t.validate()?;

    objects
        .entries()
        .iter()
        .map(|entry| {
            let label = entry.label;
            let (out_kind, f): (VolumeKind, Box<dyn Fn(f64) -> f64 + Sync>) = match kind {
                DrrKind::V => (VolumeKind::Indicator, Box::new(|_| 1.0)),
                DrrKind::Wv => (VolumeKind::Weighted, Box::new(|hu| t.weighted(hu))),
                DrrKind::M => match entry.class {
                    ObjectClass::Muscle => (
                        VolumeKind::MassDensity,
                        Box::new(|hu| t.lean_fraction.fraction(hu) * t.density_unchecked(hu)),
                    ),
                    ObjectClass::Bone => (
                        VolumeKind::MassDensity,
                        Box::new(|hu| t.density_unchecked(hu)),
                    ),
                },
            };
            let values: Vec<f64> = v
                .values()
                .par_iter()
                .zip(m.labels().par_iter())
                .map(|(&hu, &l)| if l == label { f(hu) } else { 0.0 })
                .collect();
            ScalarVolume::new(*v.grid(), values, out_kind)
        })
        .collect()
}

/// Object volume in cm³ from an indicator volume.
pub fn volume_of(v: &ScalarVolume) -> Result<f64> {
    if v.kind() != VolumeKind::Indicator {
        return Err(Error::Usage(format!(
            "volume_of needs an indicator volume, got {}",
            v.kind().as_str()
        )));
    }
    Ok(v.values().iter().sum::<f64>() * v.grid().voxel_volume_cm3())
}

/// Object mass in g from a mass-density volume.
pub fn mass_of(v: &ScalarVolume) -> Result<f64> {
    if v.kind() != VolumeKind::MassDensity {
        return Err(Error::Usage(format!(
            "mass_of needs a mass-density volume, got {}",
            v.kind().as_str()
        )));
    }
    Ok(v.values().iter().sum::<f64>() * v.grid().voxel_volume_cm3())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Grid3, ObjectEntry};
    use proptest::prelude::*;

    fn tables() -> ConversionTables {
        ConversionTables::default()
    }

    #[test]
    fn lean_fraction_anchors() {
        assert_eq!(lean_fraction(-30.0), 0.0);
        assert_eq!(lean_fraction(30.0), 1.0);
        assert_eq!(lean_fraction(0.0), 0.5);
        assert_eq!(lean_fraction(-1000.0), 0.0);
        assert_eq!(lean_fraction(15.0), 0.75);
    }

    #[test]
    fn density_knots_water_and_clamp() {
        let t = tables();
        for &[hu, rho] in &t.mass_density_lut {
            assert_eq!(mass_density(hu, &t).unwrap(), rho);
        }
        assert_eq!(mass_density(0.0, &t).unwrap(), 1.0);
        let first = t.mass_density_lut[0];
        let last = *t.mass_density_lut.last().unwrap();
        assert_eq!(mass_density(first[0] - 500.0, &t).unwrap(), first[1]);
        assert_eq!(mass_density(last[0] + 500.0, &t).unwrap(), last[1]);
    }

    #[test]
    fn lean_mass_examples() {
        let t = tables();
        assert_eq!(lean_mass_density(-100.0, &t).unwrap(), 0.0);
        assert_eq!(
            lean_mass_density(30.0, &t).unwrap(),
            mass_density(30.0, &t).unwrap()
        );
        assert_eq!(
            lean_mass_density(0.0, &t).unwrap(),
            0.5 * mass_density(0.0, &t).unwrap()
        );
    }

    #[test]
    fn empty_lut_is_config_error() {
        let mut t = tables();
        t.mass_density_lut.clear();
        assert!(matches!(mass_density(0.0, &t), Err(Error::Config(_))));
        assert!(t.validate().is_err());
    }

    #[test]
    fn table_validation() {
        let mut t = tables();
        t.mass_density_lut.swap(0, 1);
        assert!(t.validate().is_err());
        let mut t = tables();
        t.lean_fraction.hu_low = 40.0;
        assert!(t.validate().is_err());
        let t = tables();
        let back = ConversionTables::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn volume_and_mass_arithmetic() {
        let g = Grid3::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let ind = ScalarVolume::filled(g, 1.0, VolumeKind::Indicator).unwrap();
        assert!((volume_of(&ind).unwrap() - 0.008).abs() < 1e-15);
        assert!(mass_of(&ind).is_err());

        let g = Grid3::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let rho = ScalarVolume::filled(g, 1.05, VolumeKind::MassDensity).unwrap();
        assert!((mass_of(&rho).unwrap() - 1.05).abs() < 1e-12);
        assert!(volume_of(&rho).is_err());
    }

    fn two_object_scene() -> (ScalarVolume, LabelMap, ObjectSet) {
        let g = Grid3::new([3, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let hu = vec![
            -100.0, 0.0, 50.0, 12.0, -20.0, 400.0, 50.0, 50.0, -5.0, 700.0, 30.0, -1000.0,
        ];
        let labels = vec![1, 1, 1, 1, 1, 2, 1, 1, 1, 2, 1, 0];
        let objects = ObjectSet::new(vec![
            ObjectEntry {
                label: 1,
                name: "muscle".into(),
                class: ObjectClass::Muscle,
            },
            ObjectEntry {
                label: 2,
                name: "bone".into(),
                class: ObjectClass::Bone,
            },
        ])
        .unwrap();
        (
            ScalarVolume::new(g, hu, VolumeKind::Hu).unwrap(),
            LabelMap::new(g, labels).unwrap(),
            objects,
        )
    }

    #[test]
    fn mass_conversion_matches_scalar_loop() {
        let t = tables();
        let (v, m, objects) = two_object_scene();
        let out = convert_volume(&v, &m, &objects, DrrKind::M, &t).unwrap();
        for (i, entry) in objects.entries().iter().enumerate() {
            for k in 0..v.values().len() {
                let hu = v.values()[k];
                let expected = if m.labels()[k] != entry.label {
                    0.0
                } else if entry.class == ObjectClass::Bone {
                    mass_density(hu, &t).unwrap()
                } else {
                    lean_fraction(hu) * mass_density(hu, &t).unwrap()
                };
                assert_eq!(out[i].values()[k], expected, "object {i} voxel {k}");
            }
        }
    }

    #[test]
    fn indicator_conversion_is_extraction_of_ones() {
        let t = tables();
        let (v, m, objects) = two_object_scene();
        let out = convert_volume(&v, &m, &objects, DrrKind::V, &t).unwrap();
        let ones = ScalarVolume::filled(*v.grid(), 1.0, VolumeKind::Indicator).unwrap();
        for (i, entry) in objects.entries().iter().enumerate() {
            let e = crate::volume::extract_object(&ones, &m, entry.label).unwrap();
            assert_eq!(out[i], e.volume);
        }
    }

    #[test]
    fn weighted_window_clamps() {
        let t = tables();
        let (v, m, objects) = two_object_scene();
        let out = convert_volume(&v, &m, &objects, DrrKind::Wv, &t).unwrap();
        assert_eq!(out[0].kind(), VolumeKind::Weighted);
        assert!((out[0].values()[0] - 50.0 / 1650.0).abs() < 1e-15);
        assert_eq!(out[0].values()[5], 0.0);
        assert!((out[1].values()[9] - 850.0 / 1650.0).abs() < 1e-15);
        assert_eq!(t.weighted(-500.0), 0.0);
        assert_eq!(t.weighted(2000.0), 1.0);
        let expected = (50.0 + 150.0) / 1650.0;
        assert!((out[0].values()[2] - expected).abs() < 1e-15);
        assert_eq!(out[1].values()[11], 0.0);
    }

    #[test]
    fn conversion_requires_hu() {
        let t = tables();
        let (v, m, objects) = two_object_scene();
        let rho = ScalarVolume::filled(*v.grid(), 1.0, VolumeKind::MassDensity).unwrap();
        assert!(matches!(
            convert_volume(&rho, &m, &objects, DrrKind::V, &t),
            Err(Error::Usage(_))
        ));
    }

    proptest! {
        #[test]
        fn lean_fraction_monotone_and_bounded(a in -2000.0f64..2000.0, b in -2000.0f64..2000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(lean_fraction(lo) <= lean_fraction(hi));
            prop_assert!((0.0..=1.0).contains(&lean_fraction(a)));
            prop_assert_eq!(lean_fraction(a.clamp(-30.0, 30.0)), lean_fraction(a));
        }

        #[test]
        fn lean_mass_bounded_by_mass(hu in -2000.0f64..4000.0) {
            let t = ConversionTables::default();
            let lm = lean_mass_density(hu, &t).unwrap();
            let md = mass_density(hu, &t).unwrap();
            prop_assert!(lm <= md);
            if hu >= 30.0 || md == 0.0 {
                prop_assert_eq!(lm, md);
            } else {
                prop_assert!(lm < md);
            }
        }
    }
}
