//! 2D-3D rigid registration of a bone volume to a radiograph by maximizing
//! gradient correlation.
//!
//! Parallel-beam projection along z cannot see the out-of-plane
//! translation `tz`; it is held at its initial value and reported as
//! unobservable. The remaining five components are optimized with a
//! box-constrained Nelder-Mead simplex over an image pyramid: restarts run
//! on the coarsest level, and the best candidate is refined level by level.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convert::{convert_volume, ConversionTables};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{gc_term, SupervisionBundle};
use crate::pose::RigidPose;
use crate::project::{
    project_posed, render_channel, Detector, DrrKind, ProjectionGeometry, RenderSetup, Sampling,
};
use crate::volume::{LabelMap, ObjectClass, ObjectSet, ScalarVolume};

/// Optimized pose components: rx, ry, rz (deg), tx, ty (mm).
const DOF: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub pyramid_levels: usize,
    pub restarts: usize,
    /// Evaluation budget per simplex run.
    pub max_evals: usize,
    /// Convergence: simplex extent per rotation component, degrees.
    pub tolerance_deg: f64,
    /// Convergence: simplex extent per translation component, mm.
    pub tolerance_mm: f64,
    /// Search box half-width about the initialization.
    pub bound_deg: f64,
    pub bound_mm: f64,
    /// Half-width of the random offsets used for restarts after the first.
    pub restart_spread_deg: f64,
    pub restart_spread_mm: f64,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            restarts: 4,
            max_evals: 500,
            tolerance_deg: 0.05,
            tolerance_mm: 0.05,
            bound_deg: 20.0,
            bound_mm: 30.0,
            restart_spread_deg: 5.0,
            restart_spread_mm: 5.0,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 || self.restarts == 0 || self.max_evals < DOF + 1 {
            return Err(Error::Config(
                "pyramid_levels and restarts must be >= 1, max_evals >= 6".into(),
            ));
        }
        let positive = [
            self.tolerance_deg,
            self.tolerance_mm,
            self.bound_deg,
            self.bound_mm,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(
                "tolerances and bounds must be positive".into(),
            ));
        }
        if [self.restart_spread_deg, self.restart_spread_mm]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config("restart spreads must be >= 0".into()));
        }
        Ok(())
    }

    fn tolerance(&self) -> [f64; DOF] {
        let (d, m) = (self.tolerance_deg, self.tolerance_mm);
        [d, d, d, m, m]
    }

    fn bounds(&self) -> [f64; DOF] {
        let (d, m) = (self.bound_deg, self.bound_mm);
        [d, d, d, m, m]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    /// Pixel and voxel pooling factor of this level.
    pub downsample: usize,
    pub pose: RigidPose,
    pub objective: f64,
    pub evals: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub pose: RigidPose,
    pub objective: f64,
    pub converged: bool,
    pub evals: usize,
    /// Coarsest level first.
    pub per_level: Vec<LevelReport>,
    pub unobservable: Vec<String>,
    /// Evaluations that hit a constant projection and scored +1.
    pub degenerate_evals: usize,
}

/// `−gc(DRR of bone at pose, target)`. A constant projection scores +1.
pub fn registration_objective(
    bone: &ScalarVolume,
    target: &Image,
    pose: &RigidPose,
    geom: &ProjectionGeometry,
) -> Result<f64> {
    geom.validate()?;
    let level = Level::full(bone, target, geom)?;
    Ok(level.objective(pose).0)
}

struct Level {
    volume: ScalarVolume,
    target: Image,
    setup: RenderSetup,
    geom_rotation: nalgebra::Matrix3<f64>,
}

impl Level {
    fn full(bone: &ScalarVolume, target: &Image, geom: &ProjectionGeometry) -> Result<Self> {
        let mut setup = RenderSetup::new(geom, bone.grid(), &RigidPose::IDENTITY);
        setup.sampling = Sampling::Trilinear;
        let d = setup.detector;
        if target.shape() != (d.height, d.width) {
            return Err(Error::Dimension(format!(
                "target is {:?} but the geometry yields a {}x{} detector",
                target.shape(),
                d.height,
                d.width
            )));
        }
        Ok(Self {
            volume: bone.clone(),
            target: target.clone(),
            setup,
            geom_rotation: geom.rotation(),
        })
    }

    /// Next coarser level, or `None` once images would drop below 3×3.
    fn coarser(&self) -> Option<Self> {
        let d: Detector = self.setup.detector;
        if d.height < 6 || d.width < 6 || self.volume.grid().dims().iter().all(|&n| n < 2) {
            return None;
        }
        let mut setup = self.setup;
        setup.detector = d.downsample2();
        setup.step_mm *= 2.0;
        Some(Self {
            volume: self.volume.downsample2(),
            target: self.target.downsample2(),
            setup,
            geom_rotation: self.geom_rotation,
        })
    }

    /// Objective and whether it was degenerate.
    fn objective(&self, pose: &RigidPose) -> (f64, bool) {
        let mut setup = self.setup;
        setup.rotation = pose.rotation_matrix() * self.geom_rotation;
        setup.translation = pose.translation_mm();
        let drr = render_channel(&self.volume, &setup);
        match gc_term(&drr, &self.target) {
            Ok(t) => (-t.value, false),
            Err(_) => (1.0, true),
        }
    }
}

fn to_pose(x: &[f64; DOF], tz: f64) -> RigidPose {
    RigidPose::from_array([x[0], x[1], x[2], x[3], x[4], tz])
}

fn from_pose(p: &RigidPose) -> [f64; DOF] {
    [p.rx, p.ry, p.rz, p.tx, p.ty]
}

struct Simplex {
    x: [f64; DOF],
    f: f64,
    evals: usize,
    converged: bool,
}

/// Nelder-Mead with standard coefficients. Every trial point is clamped into
/// `[lo, hi]`; convergence requires the simplex extent to fall below `tol`
/// in every component.
fn nelder_mead(
    f: &mut impl FnMut(&[f64; DOF]) -> f64,
    x0: [f64; DOF],
    step: [f64; DOF],
    tol: [f64; DOF],
    lo: [f64; DOF],
    hi: [f64; DOF],
    max_evals: usize,
) -> Simplex {
    let clamp = |mut x: [f64; DOF]| {
        for j in 0..DOF {
            x[j] = x[j].clamp(lo[j], hi[j]);
        }
        x
    };
    let mut evals = 0;
    let mut eval = |x: &[f64; DOF], evals: &mut usize| {
        *evals += 1;
        f(x)
    };

    let x0 = clamp(x0);
    let mut pts: Vec<([f64; DOF], f64)> = vec![(x0, eval(&x0, &mut evals))];
    for j in 0..DOF {
        let mut x = x0;
        // step inward if the box leaves no room outward
        x[j] = if x0[j] + step[j] <= hi[j] {
            x0[j] + step[j]
        } else {
            x0[j] - step[j]
        };
        let x = clamp(x);
        pts.push((x, eval(&x, &mut evals)));
    }

    let combine = |a: &[f64; DOF], b: &[f64; DOF], t: f64| {
        let mut out = [0.0; DOF];
        for j in 0..DOF {
            out[j] = a[j] + t * (b[j] - a[j]);
        }
        clamp(out)
    };

    let mut converged;
    loop {
        pts.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = pts[0].0;
        converged = (0..DOF).all(|j| pts.iter().all(|(x, _)| (x[j] - best[j]).abs() < tol[j]));
        if converged || evals >= max_evals {
            break;
        }
        let mut centroid = [0.0; DOF];
        for (x, _) in &pts[..DOF] {
            for j in 0..DOF {
                centroid[j] += x[j] / DOF as f64;
            }
        }
        let (worst, fw) = pts[DOF];
        let fsecond = pts[DOF - 1].1;
        let fbest = pts[0].1;

        let xr = combine(&centroid, &worst, -1.0);
        let fr = eval(&xr, &mut evals);
        if fr < fbest {
            let xe = combine(&centroid, &worst, -2.0);
            let fe = eval(&xe, &mut evals);
            pts[DOF] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < fsecond {
            pts[DOF] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < fw {
            let xc = combine(&centroid, &xr, 0.5);
            (xc, eval(&xc, &mut evals))
        } else {
            let xc = combine(&centroid, &worst, 0.5);
            (xc, eval(&xc, &mut evals))
        };
        if fc < fw.min(fr) {
            pts[DOF] = (xc, fc);
            continue;
        }
        // shrink toward the best vertex
        for p in pts.iter_mut().skip(1) {
            let x = combine(&best, &p.0, 0.5);
            *p = (x, eval(&x, &mut evals));
        }
    }
    Simplex {
        x: pts[0].0,
        f: pts[0].1,
        evals,
        converged,
    }
}

/// Registers `bone` to `target`, starting from `init`.
pub fn register(
    bone: &ScalarVolume,
    target: &Image,
    init: &RigidPose,
    cfg: &RegistrationConfig,
    geom: &ProjectionGeometry,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    geom.validate()?;
    if !init.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::Usage("initial pose must be finite".into()));
    }

    let mut levels = vec![Level::full(bone, target, geom)?];
    while levels.len() < cfg.pyramid_levels {
        match levels.last().and_then(Level::coarser) {
            Some(l) => levels.push(l),
            None => break,
        }
    }

    let tz = init.tz;
    let x_init = from_pose(init);
    let bounds = cfg.bounds();
    let lo: [f64; DOF] = std::array::from_fn(|j| x_init[j] - bounds[j]);
    let hi: [f64; DOF] = std::array::from_fn(|j| x_init[j] + bounds[j]);
    let base_tol = cfg.tolerance();

    let run = |level: &Level, scale: f64, x0: [f64; DOF]| {
        let mut degenerate = 0usize;
        let mut f = |x: &[f64; DOF]| {
            let (v, d) = level.objective(&to_pose(x, tz));
            degenerate += usize::from(d);
            v
        };
        let step = [scale; DOF];
        let tol = base_tol.map(|t| t * scale);
        let s = nelder_mead(&mut f, x0, step, tol, lo, hi, cfg.max_evals);
        (s, degenerate)
    };

    // restarts on the coarsest level
    let coarse_index = levels.len() - 1;
    let coarse = &levels[coarse_index];
    let coarse_scale = (1usize << coarse_index) as f64;
    let spread = [
        cfg.restart_spread_deg,
        cfg.restart_spread_deg,
        cfg.restart_spread_deg,
        cfg.restart_spread_mm,
        cfg.restart_spread_mm,
    ];
    let starts: Vec<[f64; DOF]> = (0..cfg.restarts)
        .map(|r| {
            if r == 0 {
                return x_init;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(r as u64));
            std::array::from_fn(|j| {
                let off = if spread[j] > 0.0 {
                    rng.random_range(-spread[j]..=spread[j])
                } else {
                    0.0
                };
                (x_init[j] + off).clamp(lo[j], hi[j])
            })
        })
        .collect();
    let outcomes: Vec<(Simplex, usize)> = starts
        .par_iter()
        .map(|&x0| run(coarse, coarse_scale, x0))
        .collect();

    let mut evals: usize = outcomes.iter().map(|o| o.0.evals).sum();
    let mut degenerate_evals: usize = outcomes.iter().map(|o| o.1).sum();
    let best = outcomes
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.f.total_cmp(&b.1 .0.f).then(a.0.cmp(&b.0)))
        .map(|(_, o)| &o.0)
        .expect("at least one restart");

    let mut per_level = vec![LevelReport {
        level: coarse_index,
        downsample: 1 << coarse_index,
        pose: to_pose(&best.x, tz),
        objective: best.f,
        evals,
        converged: best.converged,
    }];
    let mut x = best.x;
    let mut f_best = best.f;
    let mut converged = best.converged;

    // refine on each finer level; a second simplex from the result guards
    // against premature collapse
    for li in (0..coarse_index).rev() {
        let scale = (1usize << li) as f64;
        let (first, d1) = run(&levels[li], scale, x);
        let (second, d2) = run(&levels[li], scale * 0.5, first.x);
        let level_evals = first.evals + second.evals;
        evals += level_evals;
        degenerate_evals += d1 + d2;
        let pick = if second.f <= first.f { &second } else { &first };
        x = pick.x;
        f_best = pick.f;
        converged = second.converged;
        per_level.push(LevelReport {
            level: li,
            downsample: 1 << li,
            pose: to_pose(&x, tz),
            objective: f_best,
            evals: level_evals,
            converged,
        });
    }

    Ok(RegistrationResult {
        pose: to_pose(&x, tz).normalized(),
        objective: f_best,
        converged,
        evals,
        per_level,
        unobservable: vec!["tz".into()],
        degenerate_evals,
    })
}

/// Labeled CT and the tables needed to convert it.
#[derive(Debug, Clone, Copy)]
pub struct CtSource<'a> {
    pub volume: &'a ScalarVolume,
    pub labels: &'a LabelMap,
    pub objects: &'a ObjectSet,
    pub tables: &'a ConversionTables,
}

/// Per-kind bone DRRs rendered at registered poses.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTargets {
    /// Indices into the object set (the aligned set K).
    pub bone_indices: Vec<usize>,
    pub names: Vec<String>,
    pub pixel_spacing_mm: [f64; 2],
    pub images: BTreeMap<DrrKind, Vec<Image>>,
}

impl AlignedTargets {
    /// Installs these targets as the aligned-bone part of `sup`.
    pub fn install(self, sup: &mut SupervisionBundle) {
        sup.bone_indices = self.bone_indices;
        sup.aligned_bones = self.images;
    }
}

/// Renders every requested bone at its pose for all three kinds. With
/// `bones = None` every bone in the object set is requested.
pub fn make_aligned_targets(
    ct: CtSource<'_>,
    poses: &BTreeMap<String, RigidPose>,
    bones: Option<&[String]>,
    geom: &ProjectionGeometry,
) -> Result<AlignedTargets> {
    let requested: Vec<String> = match bones {
        Some(b) => b.to_vec(),
        None => ct
            .objects
            .entries()
            .iter()
            .filter(|e| e.class == ObjectClass::Bone)
            .map(|e| e.name.clone())
            .collect(),
    };
    let mut out = AlignedTargets {
        bone_indices: Vec::new(),
        names: Vec::new(),
        pixel_spacing_mm: geom.pixel_spacing_mm,
        images: BTreeMap::new(),
    };
    for name in &requested {
        let index = ct
            .objects
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown object `{name}`")))?;
        let entry = &ct.objects.entries()[index];
        if entry.class != ObjectClass::Bone {
            return Err(Error::Config(format!(
                "`{name}` is a muscle; only rigid bones can be aligned"
            )));
        }
        let pose = poses
            .get(name)
            .ok_or_else(|| Error::Config(format!("no registered pose for bone `{name}`")))?;
        let single = ObjectSet::new(vec![entry.clone()])?;
        for kind in DrrKind::ALL {
            let vols = convert_volume(ct.volume, ct.labels, &single, kind, ct.tables)?;
            let stack = project_posed(&vols, geom, pose, Sampling::Auto)?;
            out.images
                .entry(kind)
                .or_default()
                .extend(stack.into_channels());
        }
        out.bone_indices.push(index);
        out.names.push(name.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Grid3, VolumeKind};

    /// Asymmetric blob of three offset boxes with a density ramp.
    fn bone() -> ScalarVolume {
        let g = Grid3::centered([24, 24, 24], [2.0; 3]).unwrap();
        let mut vals = vec![0.0; g.len()];
        for z in 0..24 {
            for y in 0..24 {
                for x in 0..24 {
                    let inside = (6..16).contains(&x)
                        && (5..19).contains(&y)
                        && (7..17).contains(&z)
                        || (14..20).contains(&x) && (12..17).contains(&y) && (9..13).contains(&z)
                        || (8..11).contains(&x) && (3..7).contains(&y) && (10..20).contains(&z);
                    if inside {
                        vals[g.index(x, y, z)] = 1.0 + 0.05 * x as f64 + 0.02 * y as f64;
                    }
                }
            }
        }
        ScalarVolume::new(g, vals, VolumeKind::MassDensity).unwrap()
    }

    fn render_at(v: &ScalarVolume, pose: &RigidPose, geom: &ProjectionGeometry) -> Image {
        let mut setup = RenderSetup::new(geom, v.grid(), pose);
        setup.sampling = Sampling::Trilinear;
        render_channel(v, &setup)
    }

    #[test]
    fn objective_self_match_and_flip() {
        let v = bone();
        let geom = ProjectionGeometry {
            pixel_spacing_mm: [2.0, 2.0],
            step_mm: 1.0,
            ..Default::default()
        };
        let p = RigidPose::new([3.0, -2.0, 5.0], [1.0, -2.0, 0.0]).unwrap();
        let target = render_at(&v, &p, &geom);
        let at_p = registration_objective(&v, &target, &p, &geom).unwrap();
        assert!((at_p + 1.0).abs() < 1e-12);
        let flipped = RigidPose {
            rz: p.rz + 180.0,
            ..p
        }
        .normalized();
        assert!(registration_objective(&v, &target, &flipped, &geom).unwrap() > -1.0);
    }

    #[test]
    fn nelder_mead_quadratic() {
        let mut f = |x: &[f64; DOF]| {
            x.iter()
                .enumerate()
                .map(|(i, v)| (i as f64 + 1.0) * (v - i as f64 * 0.5).powi(2))
                .sum::<f64>()
        };
        let s = nelder_mead(
            &mut f,
            [3.0; DOF],
            [1.0; DOF],
            [1e-6; DOF],
            [-10.0; DOF],
            [10.0; DOF],
            5000,
        );
        assert!(s.converged);
        for (i, v) in s.x.iter().enumerate() {
            assert!((v - i as f64 * 0.5).abs() < 1e-5);
        }
    }

    #[test]
    fn nelder_mead_respects_bounds() {
        let mut f = |x: &[f64; DOF]| x.iter().sum::<f64>();
        let s = nelder_mead(
            &mut f,
            [0.0; DOF],
            [1.0; DOF],
            [1e-6; DOF],
            [-2.0; DOF],
            [2.0; DOF],
            2000,
        );
        assert!(s.x.iter().all(|&v| (v + 2.0).abs() < 1e-5));
    }

    #[test]
    fn recovers_small_offset() {
        let v = bone();
        let geom = ProjectionGeometry {
            pixel_spacing_mm: [2.0, 2.0],
            step_mm: 1.0,
            ..Default::default()
        };
        let truth = RigidPose::new([4.0, -3.0, 6.0], [3.0, -2.0, 1.5]).unwrap();
        let target = render_at(&v, &truth, &geom);
        let cfg = RegistrationConfig {
            pyramid_levels: 2,
            restarts: 2,
            ..Default::default()
        };
        let r = register(&v, &target, &RigidPose::IDENTITY, &cfg, &geom).unwrap();
        assert_eq!(r.pose.tz, 0.0);
        assert!(r.objective < -0.999, "{r:?}");
        for (a, b) in r.pose.to_array()[..5].iter().zip(&truth.to_array()[..5]) {
            assert!((a - b).abs() < 0.5, "{:?} vs {:?}", r.pose, truth);
        }
        // deterministic
        let again = register(&v, &target, &RigidPose::IDENTITY, &cfg, &geom).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn target_shape_checked() {
        let v = bone();
        let geom = ProjectionGeometry::default();
        let bad = Image::zeros(3, 3);
        assert!(matches!(
            registration_objective(&v, &bad, &RigidPose::IDENTITY, &geom),
            Err(Error::Dimension(_))
        ));
    }
}
