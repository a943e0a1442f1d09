//! Central-difference verification of every analytic loss gradient.
//!
//! Each loss is wrapped as a function of one flat parameter vector (the
//! concatenated pixels of its differentiated inputs). Random instances keep
//! every L1 operand at least `L1_MARGIN` away from its kink so the
//! difference quotient never straddles a non-differentiable point.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;
use crate::losses::{
    gc, loss_bone, loss_cycle, loss_gan, loss_gc_chain, loss_gc_recon, loss_owis, GradTarget,
    LossResult, LossWeights, PredictionBundle, SupervisionBundle,
};
use crate::project::{DrrKind, DrrStack};

/// Minimum distance between L1 operands in generated instances.
const L1_MARGIN: f64 = 0.02;
/// Denominator floor of the relative error, for entries that are ~0.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0x5eed,
            step: 1e-4,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: String,
    pub instances: usize,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub worst_instance: usize,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central differences of `f` at `x`.
pub fn central_difference(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let fp = f(&probe)?;
        probe[k] = x[k] - h;
        let fm = f(&probe)?;
        probe[k] = x[k];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

type Eval = Box<dyn Fn(&[f64]) -> Result<LossResult> + Send + Sync>;

/// A loss restricted to one flat parameter vector.
struct Problem {
    x: Vec<f64>,
    eval: Eval,
    keys: Vec<GradTarget>,
}

impl Problem {
    fn analytic(&self) -> Result<Vec<f64>> {
        let r = (self.eval)(&self.x)?;
        let mut flat = Vec::with_capacity(self.x.len());
        for key in &self.keys {
            for img in r.gradient(*key).unwrap_or_default() {
                flat.extend_from_slice(img.data());
            }
        }
        Ok(flat)
    }

    fn max_error(&self, h: f64) -> Result<f64> {
        let analytic = self.analytic()?;
        let numeric = central_difference(|p| Ok((self.eval)(p)?.value), &self.x, h)?;
        assert_eq!(analytic.len(), numeric.len(), "gradient layout mismatch");
        Ok(analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max))
    }
}

fn images(flat: &[f64], h: usize, w: usize) -> Vec<Image> {
    flat.chunks(h * w)
        .map(|c| Image::from_vec(h, w, c.to_vec()).expect("chunk matches shape"))
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `base` shifted by random offsets of magnitude in `[L1_MARGIN, 0.5]`.
fn offset_from(rng: &mut ChaCha8Rng, base: &[f64]) -> Vec<f64> {
    base.iter()
        .map(|&b| {
            let mag = rng.random_range(L1_MARGIN..0.5);
            if rng.random_bool(0.5) {
                b + mag
            } else {
                b - mag
            }
        })
        .collect()
}

struct Scene {
    n: usize,
    h: usize,
    w: usize,
    spacing: [f64; 2],
    stacks: BTreeMap<DrrKind, Vec<f64>>,
    xray: Vec<f64>,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(1..=3);
        let h = rng.random_range(5..=8);
        let w = rng.random_range(5..=8);
        let spacing = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        let stacks = DrrKind::ALL
            .into_iter()
            .map(|k| (k, uniform(rng, n * h * w, 0.0, 1.0)))
            .collect();
        let xray = uniform(rng, h * w, 0.0, 1.0);
        Self {
            n,
            h,
            w,
            spacing,
            stacks,
            xray,
        }
    }

    /// Bundle with the `kind` stack replaced by `flat`.
    fn bundle(&self, replace: &[(DrrKind, &[f64])]) -> Result<PredictionBundle> {
        let stack = |kind: DrrKind| {
            let flat = replace
                .iter()
                .find(|(k, _)| *k == kind)
                .map(|(_, f)| *f)
                .unwrap_or(&self.stacks[&kind]);
            DrrStack::unnamed(kind, self.spacing, images(flat, self.h, self.w))
        };
        PredictionBundle::new(
            stack(DrrKind::Wv)?,
            stack(DrrKind::V)?,
            stack(DrrKind::M)?,
            Image::from_vec(self.h, self.w, self.xray.clone())?,
        )
    }

    fn size(&self) -> usize {
        self.n * self.h * self.w
    }
}

type Builder = fn(&mut ChaCha8Rng) -> Problem;

fn gc_problem(rng: &mut ChaCha8Rng) -> Problem {
    let h = rng.random_range(4..=9);
    let w = rng.random_range(4..=9);
    let x = uniform(rng, 2 * h * w, -1.0, 1.0);
    Problem {
        x,
        eval: Box::new(move |p| {
            let (a, b) = p.split_at(h * w);
            gc(&images(a, h, w)[0], &images(b, h, w)[0])
        }),
        keys: vec![GradTarget::A, GradTarget::B],
    }
}

fn recon_problem(rng: &mut ChaCha8Rng) -> Problem {
    let scene = Scene::random(rng);
    Problem {
        x: scene.stacks[&DrrKind::Wv].clone(),
        eval: Box::new(move |p| loss_gc_recon(&scene.bundle(&[(DrrKind::Wv, p)])?)),
        keys: vec![GradTarget::Wv],
    }
}

fn chain_problem(rng: &mut ChaCha8Rng) -> Problem {
    let scene = Scene::random(rng);
    let mut x = scene.stacks[&DrrKind::V].clone();
    x.extend_from_slice(&scene.stacks[&DrrKind::M]);
    Problem {
        x,
        eval: Box::new(move |p| {
            let (v, m) = p.split_at(scene.size());
            loss_gc_chain(&scene.bundle(&[(DrrKind::V, v), (DrrKind::M, m)])?)
        }),
        keys: vec![GradTarget::V, GradTarget::M],
    }
}

fn owis_problem(rng: &mut ChaCha8Rng) -> Problem {
    let scene = Scene::random(rng);
    let kind = DrrKind::ALL[rng.random_range(0..3)];
    let area = scene.spacing[0] * scene.spacing[1] / 100.0;
    let sums: Vec<f64> = scene.stacks[&kind]
        .chunks(scene.h * scene.w)
        .map(|c| c.iter().sum::<f64>() * area)
        .collect();
    let sup = SupervisionBundle {
        target_sums: BTreeMap::from([(kind, offset_from(rng, &sums))]),
        ..Default::default()
    };
    Problem {
        x: scene.stacks[&kind].clone(),
        eval: Box::new(move |p| loss_owis(&scene.bundle(&[(kind, p)])?, &sup, kind)),
        keys: vec![GradTarget::for_kind(kind)],
    }
}

fn bone_problem(rng: &mut ChaCha8Rng) -> Problem {
    let scene = Scene::random(rng);
    let kind = DrrKind::ALL[rng.random_range(0..3)];
    let hw = scene.h * scene.w;
    let mut indices: Vec<usize> = (0..scene.n).filter(|_| rng.random_bool(0.6)).collect();
    if indices.is_empty() {
        indices.push(rng.random_range(0..scene.n));
    }
    let pred = &scene.stacks[&kind];
    let targets = indices
        .iter()
        .map(|&i| {
            Image::from_vec(
                scene.h,
                scene.w,
                offset_from(rng, &pred[i * hw..(i + 1) * hw]),
            )
        })
        .collect::<Result<Vec<_>>>()
        .expect("target shape");
    let sup = SupervisionBundle {
        bone_indices: indices,
        aligned_bones: BTreeMap::from([(kind, targets)]),
        ..Default::default()
    };
    let weights = LossWeights::default();
    Problem {
        x: pred.clone(),
        eval: Box::new(move |p| loss_bone(&scene.bundle(&[(kind, p)])?, &sup, kind, &weights)),
        keys: vec![GradTarget::for_kind(kind)],
    }
}

fn gan_problem(rng: &mut ChaCha8Rng) -> Problem {
    let hr = rng.random_range(2..=6);
    let wr = rng.random_range(2..=6);
    let hf = rng.random_range(2..=6);
    let wf = rng.random_range(2..=6);
    let mut x = uniform(rng, hr * wr, 0.2, 0.8);
    x.extend(uniform(rng, hf * wf, 0.2, 0.8));
    Problem {
        x,
        eval: Box::new(move |p| {
            let (r, f) = p.split_at(hr * wr);
            loss_gan(&images(r, hr, wr)[0], &images(f, hf, wf)[0])
        }),
        keys: vec![GradTarget::DReal, GradTarget::DFake],
    }
}

fn cycle_problem(rng: &mut ChaCha8Rng) -> Problem {
    let (hx, wx) = (rng.random_range(2..=7), rng.random_range(2..=7));
    let (hy, wy) = (rng.random_range(2..=7), rng.random_range(2..=7));
    let x = Image::from_vec(hx, wx, uniform(rng, hx * wx, -1.0, 1.0)).expect("shape");
    let y = Image::from_vec(hy, wy, uniform(rng, hy * wy, -1.0, 1.0)).expect("shape");
    let mut params = offset_from(rng, x.data());
    params.extend(offset_from(rng, y.data()));
    Problem {
        x: params,
        eval: Box::new(move |p| {
            let (xr, yr) = p.split_at(hx * wx);
            loss_cycle(&x, &images(xr, hx, wx)[0], &y, &images(yr, hy, wy)[0])
        }),
        keys: vec![GradTarget::XRoundTrip, GradTarget::YRoundTrip],
    }
}

/// Loss names in suite order.
pub const LOSSES: [&str; 7] = [
    "gc",
    "loss_gc_recon",
    "loss_gc_chain",
    "loss_owis",
    "loss_bone",
    "loss_gan",
    "loss_cycle",
];

const BUILDERS: [Builder; 7] = [
    gc_problem,
    recon_problem,
    chain_problem,
    owis_problem,
    bone_problem,
    gan_problem,
    cycle_problem,
];

fn check_loss(index: usize, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let errors: Vec<(f64, usize)> = (0..cfg.instances)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed ^ ((index as u64) << 32 | i as u64);
            let problem = BUILDERS[index](&mut ChaCha8Rng::seed_from_u64(seed));
            Ok((problem.max_error(cfg.step)?, problem.x.len()))
        })
        .collect::<Result<_>>()?;
    let (worst_instance, max_rel_error) = errors
        .iter()
        .map(|e| e.0)
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradcheckReport {
        loss: LOSSES[index].to_string(),
        instances: cfg.instances,
        parameters: errors.iter().map(|e| e.1).sum(),
        max_rel_error,
        worst_instance,
        passed: max_rel_error <= cfg.tolerance,
    })
}

/// Runs the whole suite; one report per loss.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<Vec<GradcheckReport>> {
    (0..LOSSES.len()).map(|i| check_loss(i, cfg)).collect()
}

/// Runs the suite for one loss by name.
pub fn run_one(name: &str, cfg: &GradcheckConfig) -> Option<Result<GradcheckReport>> {
    LOSSES
        .iter()
        .position(|l| *l == name)
        .map(|i| check_loss(i, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let g = central_difference(|x| Ok(x[0].powi(3) + 2.0 * x[1]), &[1.5, -0.3], 1e-4).unwrap();
        assert!((g[0] - 6.75).abs() < 1e-7);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let p = Problem {
            x: vec![0.3, 0.7],
            eval: Box::new(|x| {
                let mut r = LossResult::new(x[0] * x[0] + x[1]);
                // deliberately wrong: should be 2·x0
                let g = Image::from_vec(1, 2, vec![x[0], 1.0])?;
                r.gradients.insert(GradTarget::A, vec![g]);
                Ok(r)
            }),
            keys: vec![GradTarget::A],
        };
        assert!(p.max_error(1e-4).unwrap() > 0.4);
    }

    #[test]
    fn small_suite_passes() {
        let cfg = GradcheckConfig {
            instances: 3,
            ..Default::default()
        };
        for r in run_suite(&cfg).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }
}
