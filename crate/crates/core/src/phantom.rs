//! Synthetic labeled CT scenes built from ellipsoids.
//!
//! Every object has a closed-form volume, so the voxelizer, the converters
//! and the projector can all be checked against numbers that do not depend
//! on them. Objects that share a name are parts of one labeled object.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::convert::ConversionTables;
use crate::error::{Error, Result};
use crate::pose::{euler_matrix, matrix_to_euler, RigidPose};
use crate::volume::{
    Grid3, LabelMap, ObjectClass, ObjectEntry, ObjectSet, ScalarVolume, VolumeKind,
};

pub const AIR_HU: f64 = -1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Center of voxel (0,0,0); defaults to a grid centered on the origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_mm: Option<[f64; 3]>,
}

impl GridSpec {
    pub fn to_grid(&self) -> Result<Grid3> {
        let g = match self.origin_mm {
            Some(o) => Grid3::new(self.dims, self.spacing_mm, o),
            None => Grid3::centered(self.dims, self.spacing_mm),
        };
        g.map_err(|e| Error::Spec(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    /// Euler angles in degrees, same convention as [`RigidPose`].
    #[serde(default)]
    pub orientation_deg: [f64; 3],
}

impl Ellipsoid {
    pub fn volume_cm3(&self) -> f64 {
        let [a, b, c] = self.semi_axes_mm;
        4.0 / 3.0 * std::f64::consts::PI * a * b * c / 1000.0
    }

    fn rotation(&self) -> Matrix3<f64> {
        euler_matrix(self.orientation_deg)
    }

    /// Half-extent of the axis-aligned bounding box, mm.
    pub fn half_extent(&self) -> [f64; 3] {
        let r = self.rotation();
        [0, 1, 2].map(|i| {
            (0..3)
                .map(|j| (r[(i, j)] * self.semi_axes_mm[j]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tissue {
    UniformHu(f64),
    /// Linear HU ramp across the ellipsoid along one of its own axes.
    FattyGradient {
        hu_start: f64,
        hu_end: f64,
        axis: Axis,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomObject {
    pub name: String,
    pub class: ObjectClass,
    pub ellipsoid: Ellipsoid,
    pub tissue: Tissue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: GridSpec,
    pub objects: Vec<PhantomObject>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise_sigma_hu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTruth {
    pub name: String,
    pub class: ObjectClass,
    pub label: u16,
    pub volume_cm3_analytic: f64,
    pub volume_cm3_voxel: f64,
    /// Lean mass for muscles, total mass for bones, from the voxelized HU values.
    pub lean_mass_g: f64,
    /// Fraction of this object's voxels taken over by objects listed later.
    pub overlap_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: ScalarVolume,
    pub labels: LabelMap,
    pub objects: ObjectSet,
    pub truth: Vec<ObjectTruth>,
}

impl PhantomSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: PhantomSpec = serde_json::from_str(text)?;
        Ok(spec)
    }

    /// Distinct object names in order of first appearance, with their class.
    fn object_table(&self) -> Result<Vec<(String, ObjectClass)>> {
        let mut table: Vec<(String, ObjectClass)> = Vec::new();
        for o in &self.objects {
            match table.iter().find(|(n, _)| n == &o.name) {
                Some((_, class)) if *class != o.class => {
                    return Err(Error::Spec(format!(
                        "parts of `{}` disagree on object class",
                        o.name
                    )))
                }
                Some(_) => {}
                None => table.push((o.name.clone(), o.class)),
            }
        }
        if table.len() > u16::MAX as usize {
            return Err(Error::Spec("too many objects".into()));
        }
        Ok(table)
    }

    pub fn validate(&self) -> Result<Grid3> {
        let grid = self.grid.to_grid()?;
        if !(self.noise_sigma_hu.is_finite() && self.noise_sigma_hu >= 0.0) {
            return Err(Error::Spec("noise_sigma_hu must be >= 0".into()));
        }
        if self.objects.is_empty() {
            return Err(Error::Spec("phantom has no objects".into()));
        }
        self.object_table()?;
        let (lo, hi) = grid.footprint();
        for o in &self.objects {
            let e = &o.ellipsoid;
            if e.semi_axes_mm.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
                return Err(Error::Spec(format!(
                    "`{}` has non-positive semi-axes",
                    o.name
                )));
            }
            let half = e.half_extent();
            for a in 0..3 {
                if e.center_mm[a] - half[a] < lo[a] || e.center_mm[a] + half[a] > hi[a] {
                    return Err(Error::Spec(format!(
                        "ellipsoid of `{}` leaves the grid along axis {a}",
                        o.name
                    )));
                }
            }
        }
        Ok(grid)
    }
}

pub fn generate(spec: &PhantomSpec, tables: &ConversionTables) -> Result<Phantom> {
    let grid = spec.validate()?;
    tables.validate()?;
    let table = spec.object_table()?;
    let objects = ObjectSet::new(
        table
            .iter()
            .enumerate()
            .map(|(i, (name, class))| ObjectEntry {
                label: (i + 1) as u16,
                name: name.clone(),
                class: *class,
            })
            .collect(),
    )?;

    let n = grid.len();
    let mut hu = vec![AIR_HU; n];
    let mut labels = vec![0u16; n];
    let mut claimed = vec![0usize; table.len()];
    let [nx, ny, nz] = grid.dims();
    let s = grid.spacing();
    let o = grid.origin();

    for part in &spec.objects {
        let obj = table
            .iter()
            .position(|(name, _)| name == &part.name)
            .unwrap();
        let label = (obj + 1) as u16;
        let e = &part.ellipsoid;
        let rt = e.rotation().transpose();
        let c = Vector3::from(e.center_mm);
        let half = e.half_extent();
        let range = |a: usize, len: usize| {
            let lo = ((e.center_mm[a] - half[a] - o[a]) / s[a]).floor().max(0.0) as usize;
            let hi = ((e.center_mm[a] + half[a] - o[a]) / s[a]).ceil().max(0.0) as usize;
            lo..(hi + 1).min(len)
        };
        for z in range(2, nz) {
            for y in range(1, ny) {
                for x in range(0, nx) {
                    let p = Vector3::from(grid.voxel_center(x, y, z));
                    let local = rt * (p - c);
                    let r2: f64 = (0..3).map(|a| (local[a] / e.semi_axes_mm[a]).powi(2)).sum();
                    if r2 > 1.0 {
                        continue;
                    }
                    let value = match part.tissue {
                        Tissue::UniformHu(v) => v,
                        Tissue::FattyGradient {
                            hu_start,
                            hu_end,
                            axis,
                        } => {
                            let a = axis.index();
                            let u = 0.5 * (local[a] / e.semi_axes_mm[a] + 1.0);
                            hu_start + (hu_end - hu_start) * u
                        }
                    };
                    let idx = grid.index(x, y, z);
                    hu[idx] = value;
                    labels[idx] = label;
                    claimed[obj] += 1;
                }
            }
        }
    }

    if spec.noise_sigma_hu > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma_hu)
            .map_err(|e| Error::Spec(format!("noise distribution: {e}")))?;
        for (v, &l) in hu.iter_mut().zip(&labels) {
            if l != 0 {
                *v += normal.sample(&mut rng);
            }
        }
    }
    // HU values are stored as f32 on disk; keep memory and disk identical
    for v in hu.iter_mut() {
        *v = *v as f32 as f64;
    }

    let voxel_cm3 = grid.voxel_volume_cm3();
    let mut counts = vec![0usize; table.len()];
    let mut mass = vec![0.0f64; table.len()];
    for (&v, &l) in hu.iter().zip(&labels) {
        if l == 0 {
            continue;
        }
        let i = (l - 1) as usize;
        counts[i] += 1;
        mass[i] += voxel_mass_density(v, table[i].1, tables);
    }

    let truth = table
        .iter()
        .enumerate()
        .map(|(i, (name, class))| {
            let analytic: f64 = spec
                .objects
                .iter()
                .filter(|p| &p.name == name)
                .map(|p| p.ellipsoid.volume_cm3())
                .sum();
            ObjectTruth {
                name: name.clone(),
                class: *class,
                label: (i + 1) as u16,
                volume_cm3_analytic: analytic,
                volume_cm3_voxel: counts[i] as f64 * voxel_cm3,
                lean_mass_g: mass[i] * voxel_cm3,
                overlap_fraction: if claimed[i] == 0 {
                    0.0
                } else {
                    1.0 - counts[i] as f64 / claimed[i] as f64
                },
            }
        })
        .collect();

    Ok(Phantom {
        volume: ScalarVolume::new(grid, hu, VolumeKind::Hu)?,
        labels: LabelMap::new(grid, labels)?,
        objects,
        truth,
    })
}

/// Per-voxel density used for the mass ground truth: lean mass density for
/// muscles, total mass density for bones.
fn voxel_mass_density(hu: f64, class: ObjectClass, t: &ConversionTables) -> f64 {
    let lut = &t.mass_density_lut;
    let rho = if hu <= lut[0][0] {
        lut[0][1]
    } else if hu >= lut[lut.len() - 1][0] {
        lut[lut.len() - 1][1]
    } else {
        let mut k = 1;
        while lut[k][0] <= hu {
            k += 1;
        }
        let ([h0, r0], [h1, r1]) = (lut[k - 1], lut[k]);
        if hu == h0 {
            r0
        } else {
            r0 + (r1 - r0) * (hu - h0) / (h1 - h0)
        }
    };
    match class {
        ObjectClass::Bone => rho,
        ObjectClass::Muscle => {
            let lf = t.lean_fraction;
            let frac = if hu <= lf.hu_low {
                0.0
            } else if hu >= lf.hu_high {
                1.0
            } else {
                (hu - lf.hu_low) / (lf.hu_high - lf.hu_low)
            };
            frac * rho
        }
    }
}

/// Rigidly moves every part of `object_name`: rotation about the object's
/// volume-weighted center, then translation.
pub fn pose_perturb(
    spec: &PhantomSpec,
    object_name: &str,
    pose: &RigidPose,
) -> Result<PhantomSpec> {
    let parts: Vec<usize> = spec
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.name == object_name)
        .map(|(i, _)| i)
        .collect();
    if parts.is_empty() {
        return Err(Error::Spec(format!("no object named `{object_name}`")));
    }
    let total: f64 = parts
        .iter()
        .map(|&i| spec.objects[i].ellipsoid.volume_cm3())
        .sum();
    let pivot = parts.iter().fold(Vector3::zeros(), |acc, &i| {
        let e = &spec.objects[i].ellipsoid;
        acc + Vector3::from(e.center_mm) * (e.volume_cm3() / total)
    });
    let rotate = pose.rotation_deg() != [0.0; 3];
    let r = pose.rotation_matrix();
    let t = pose.translation();

    let mut out = spec.clone();
    for &i in &parts {
        let e = &mut out.objects[i].ellipsoid;
        let c = Vector3::from(e.center_mm);
        let moved = if rotate { r * (c - pivot) + pivot } else { c } + t;
        e.center_mm = [moved.x, moved.y, moved.z];
        if rotate {
            e.orientation_deg = matrix_to_euler(&(r * euler_matrix(e.orientation_deg)));
        }
    }
    out.validate()?;
    Ok(out)
}

fn part(
    name: &str,
    class: ObjectClass,
    center: [f64; 3],
    semi: [f64; 3],
    orient: [f64; 3],
    tissue: Tissue,
) -> PhantomObject {
    PhantomObject {
        name: name.into(),
        class,
        ellipsoid: Ellipsoid {
            center_mm: center,
            semi_axes_mm: semi,
            orientation_deg: orient,
        },
        tissue,
    }
}

impl Default for PhantomSpec {
    /// Hip-like scene: six muscles and two bones on a 160³ grid at 1 mm.
    fn default() -> Self {
        use ObjectClass::{Bone, Muscle};
        let gradient = |a, b, axis| Tissue::FattyGradient {
            hu_start: a,
            hu_end: b,
            axis,
        };
        PhantomSpec {
            grid: GridSpec {
                dims: [160, 160, 160],
                spacing_mm: [1.0; 3],
                origin_mm: None,
            },
            objects: vec![
                part(
                    "glu_max",
                    Muscle,
                    [-38.0, 22.0, 0.0],
                    [22.0, 16.0, 30.0],
                    [0.0, 0.0, 15.0],
                    gradient(-60.0, 70.0, Axis::X),
                ),
                part(
                    "glu_med",
                    Muscle,
                    [-45.0, -18.0, 12.0],
                    [18.0, 14.0, 24.0],
                    [10.0, 0.0, -20.0],
                    Tissue::UniformHu(45.0),
                ),
                part(
                    "glu_min",
                    Muscle,
                    [-28.0, -36.0, 18.0],
                    [12.0, 9.0, 16.0],
                    [0.0, 15.0, 0.0],
                    Tissue::UniformHu(52.0),
                ),
                part(
                    "iliacus",
                    Muscle,
                    [28.0, -22.0, 6.0],
                    [14.0, 20.0, 22.0],
                    [-10.0, 0.0, 25.0],
                    gradient(-40.0, 60.0, Axis::Y),
                ),
                part(
                    "obt_ext",
                    Muscle,
                    [22.0, 34.0, -26.0],
                    [10.0, 8.0, 12.0],
                    [0.0, 0.0, 30.0],
                    Tissue::UniformHu(40.0),
                ),
                part(
                    "pectineus",
                    Muscle,
                    [46.0, 36.0, -30.0],
                    [9.0, 8.0, 18.0],
                    [20.0, 0.0, 0.0],
                    gradient(-20.0, 50.0, Axis::Z),
                ),
                part(
                    "pelvis",
                    Bone,
                    [-6.0, -4.0, 30.0],
                    [30.0, 12.0, 10.0],
                    [0.0, 0.0, 25.0],
                    gradient(300.0, 900.0, Axis::X),
                ),
                part(
                    "pelvis",
                    Bone,
                    [18.0, 8.0, 40.0],
                    [10.0, 18.0, 8.0],
                    [0.0, 20.0, 0.0],
                    Tissue::UniformHu(600.0),
                ),
                part(
                    "sacrum",
                    Bone,
                    [0.0, 42.0, 34.0],
                    [14.0, 10.0, 18.0],
                    [20.0, 0.0, 0.0],
                    Tissue::UniformHu(500.0),
                ),
            ],
            seed: 7,
            noise_sigma_hu: 10.0,
        }
    }
}

impl PhantomSpec {
    /// A single asymmetric three-part bone on a 64³ grid at 2 mm, sized for
    /// fast registration experiments.
    pub fn pelvis_analog() -> Self {
        let ramp = Tissue::FattyGradient {
            hu_start: 300.0,
            hu_end: 900.0,
            axis: Axis::X,
        };
        let bone = ObjectClass::Bone;
        PhantomSpec {
            grid: GridSpec {
                dims: [64, 64, 64],
                spacing_mm: [2.0; 3],
                origin_mm: None,
            },
            objects: vec![
                part(
                    "pelvis",
                    bone,
                    [-6.0, -4.0, 0.0],
                    [30.0, 12.0, 10.0],
                    [0.0, 0.0, 25.0],
                    ramp,
                ),
                part(
                    "pelvis",
                    bone,
                    [18.0, 10.0, 8.0],
                    [10.0, 18.0, 8.0],
                    [0.0, 20.0, 0.0],
                    Tissue::UniformHu(600.0),
                ),
                part(
                    "pelvis",
                    bone,
                    [-20.0, 14.0, -6.0],
                    [8.0, 8.0, 14.0],
                    [30.0, 0.0, 0.0],
                    Tissue::UniformHu(750.0),
                ),
            ],
            seed: 11,
            noise_sigma_hu: 10.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convert::{lean_mass_density, mass_density};

    fn sphere_spec(radius: f64, spacing: f64, hu: f64) -> PhantomSpec {
        let n = (2.0 * (radius + 4.0) / spacing).ceil() as usize;
        PhantomSpec {
            grid: GridSpec {
                dims: [n; 3],
                spacing_mm: [spacing; 3],
                origin_mm: None,
            },
            objects: vec![part(
                "ball",
                ObjectClass::Muscle,
                [0.3, -0.2, 0.1],
                [radius; 3],
                [0.0; 3],
                Tissue::UniformHu(hu),
            )],
            seed: 0,
            noise_sigma_hu: 0.0,
        }
    }

    #[test]
    fn sphere_voxel_volume_near_analytic() {
        let t = ConversionTables::default();
        let p = generate(&sphere_spec(20.0, 1.0, 50.0), &t).unwrap();
        let truth = &p.truth[0];
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 8000.0 / 1000.0;
        assert!((truth.volume_cm3_analytic - analytic).abs() < 1e-12);
        assert!((truth.volume_cm3_analytic - 33.51).abs() < 0.01);
        assert!((truth.volume_cm3_voxel / analytic - 1.0).abs() < 0.01);
    }

    #[test]
    fn uniform_lean_object_mass_is_volume_times_density() {
        let t = ConversionTables::default();
        let p = generate(&sphere_spec(12.0, 1.0, 50.0), &t).unwrap();
        let truth = &p.truth[0];
        let expected = truth.volume_cm3_voxel * mass_density(50.0, &t).unwrap();
        assert!(((truth.lean_mass_g - expected) / expected).abs() < 1e-9);
    }

    #[test]
    fn fatty_gradient_mass_strictly_bounded() {
        let t = ConversionTables::default();
        let mut spec = sphere_spec(12.0, 1.0, 0.0);
        spec.objects[0].tissue = Tissue::FattyGradient {
            hu_start: -100.0,
            hu_end: 100.0,
            axis: Axis::Y,
        };
        let p = generate(&spec, &t).unwrap();
        let truth = &p.truth[0];
        let max_rho = mass_density(100.0, &t).unwrap();
        assert!(truth.lean_mass_g > 0.0);
        assert!(truth.lean_mass_g < truth.volume_cm3_voxel * max_rho);
    }

    #[test]
    fn truth_mass_matches_convert_module() {
        let t = ConversionTables::default();
        let mut spec = sphere_spec(10.0, 1.0, 0.0);
        spec.noise_sigma_hu = 25.0;
        spec.seed = 3;
        let p = generate(&spec, &t).unwrap();
        let direct: f64 = p
            .volume
            .values()
            .iter()
            .zip(p.labels.labels())
            .filter(|(_, &l)| l == 1)
            .map(|(&hu, _)| lean_mass_density(hu, &t).unwrap())
            .sum::<f64>()
            * p.volume.grid().voxel_volume_cm3();
        assert!(((p.truth[0].lean_mass_g - direct) / direct).abs() < 1e-12);
    }

    #[test]
    fn out_of_grid_is_spec_error() {
        let mut spec = sphere_spec(10.0, 1.0, 0.0);
        spec.objects[0].ellipsoid.center_mm[0] = 10.0;
        assert!(matches!(
            generate(&spec, &ConversionTables::default()),
            Err(Error::Spec(_))
        ));
        let spec = sphere_spec(10.0, 1.0, 0.0);
        let moved = pose_perturb(
            &spec,
            "ball",
            &RigidPose::new([0.0; 3], [30.0, 0.0, 0.0]).unwrap(),
        );
        assert!(matches!(moved, Err(Error::Spec(_))));
        assert!(pose_perturb(&spec, "nope", &RigidPose::IDENTITY).is_err());
    }

    #[test]
    fn later_objects_win_and_overlap_is_reported() {
        let mut spec = sphere_spec(10.0, 1.0, 50.0);
        let mut second = spec.objects[0].clone();
        second.name = "cap".into();
        second.ellipsoid.center_mm[0] += 3.0;
        spec.objects.push(second);
        let p = generate(&spec, &ConversionTables::default()).unwrap();
        assert!(p.truth[0].overlap_fraction > 0.0);
        assert_eq!(p.truth[1].overlap_fraction, 0.0);
        let c = p.volume.grid().dims().map(|d| d / 2);
        // the overlap region belongs to the later object
        let idx = p.volume.grid().index(c[0] + 2, c[1], c[2]);
        assert_eq!(p.labels.labels()[idx], 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = sphere_spec(8.0, 1.0, 10.0);
        spec.noise_sigma_hu = 30.0;
        let t = ConversionTables::default();
        assert_eq!(generate(&spec, &t).unwrap(), generate(&spec, &t).unwrap());
        spec.seed = 1;
        assert_ne!(
            generate(&spec, &t).unwrap().volume,
            generate(&sphere_spec(8.0, 1.0, 10.0), &t).unwrap().volume
        );
    }

    #[test]
    fn identity_perturbation_is_noop() {
        let spec = PhantomSpec::default();
        assert_eq!(
            pose_perturb(&spec, "glu_med", &RigidPose::IDENTITY).unwrap(),
            spec
        );
    }

    #[test]
    fn default_spec_is_valid() {
        PhantomSpec::pelvis_analog().validate().unwrap();
        let spec = PhantomSpec::default();
        spec.validate().unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(PhantomSpec::from_json(&json).unwrap(), spec);
    }
}
