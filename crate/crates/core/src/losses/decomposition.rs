//! Decomposition losses: reconstruction GC, chained GC, intensity-sum,
//! aligned-bone, and the weighted composite.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::project::{virtual_xray, DrrKind};

use super::gc::gc_term;
use super::{sign0, GradTarget, LossResult, LossWeights, PredictionBundle, SupervisionBundle};

/// `−gc(xray, Σ_i wv_i)`; every wv channel receives the same gradient.
pub fn loss_gc_recon(bundle: &PredictionBundle) -> Result<LossResult> {
    let wv = bundle.stack(DrrKind::Wv);
    let recon = virtual_xray(wv);
    let t = gc_term(bundle.xray(), &recon)?;
    let g = t.grad_b.scaled(-1.0);
    let mut r = LossResult::new(-t.value);
    r.gradients.insert(GradTarget::Wv, vec![g; wv.len()]);
    Ok(r)
}

/// `−(1/N) Σ_i [gc(wv_i, v_i) + gc(wv_i, m_i)]` with wv held constant.
///
/// A pair whose GC is undefined (a constant channel) contributes nothing
/// and is listed in `flags`.
pub fn loss_gc_chain(bundle: &PredictionBundle) -> Result<LossResult> {
    let wv = bundle.stack(DrrKind::Wv);
    let n = wv.len();
    let scale = -1.0 / n as f64;
    let (h, w) = bundle.shape();

    let terms: Vec<_> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| [(i, DrrKind::V), (i, DrrKind::M)])
        .map(|(i, kind)| {
            let other = bundle.stack(kind).channel(i);
            (i, kind, gc_term(wv.channel(i), other))
        })
        .collect();

    let mut r = LossResult::new(0.0);
    let mut gv = vec![Image::zeros(h, w); n];
    let mut gm = vec![Image::zeros(h, w); n];
    for (i, kind, term) in terms {
        match term {
            Ok(t) => {
                r.value += scale * t.value;
                let target = if kind == DrrKind::V {
                    &mut gv[i]
                } else {
                    &mut gm[i]
                };
                target.add_scaled(&t.grad_b, scale);
            }
            Err(Error::Degenerate(_)) => {
                let name = &wv.names()[i];
                r.flags.push(format!(
                    "gc_chain: skipped ({name}, wv~{kind}), constant channel"
                ));
            }
            Err(e) => return Err(e),
        }
    }
    r.gradients.insert(GradTarget::V, gv);
    r.gradients.insert(GradTarget::M, gm);
    Ok(r)
}

fn target_sums(sup: &SupervisionBundle, kind: DrrKind, n: usize) -> Result<&[f64]> {
    let sums = sup
        .target_sums
        .get(&kind)
        .ok_or_else(|| Error::Config(format!("no {kind} target sums supplied")))?;
    if sums.len() != n {
        return Err(Error::Config(format!(
            "{} {kind} target sums for {n} objects",
            sums.len()
        )));
    }
    if let Some(i) = sums.iter().position(|s| !s.is_finite()) {
        return Err(Error::Config(format!(
            "{kind} target sum {i} is not finite"
        )));
    }
    Ok(sums)
}

/// `(1/(N·H·W)) Σ_i |S(pred_i) − target_i|` where `S` is the area-weighted sum.
pub fn loss_owis(
    bundle: &PredictionBundle,
    sup: &SupervisionBundle,
    kind: DrrKind,
) -> Result<LossResult> {
    let stack = bundle.stack(kind);
    let n = stack.len();
    let sums = target_sums(sup, kind, n)?;
    let (h, w) = stack.shape();
    let norm = (n * h * w) as f64;
    let area = stack.pixel_area_cm2();

    let mut r = LossResult::new(0.0);
    let mut grads = Vec::with_capacity(n);
    for (ch, &target) in stack.channels().iter().zip(sums) {
        let diff = ch.sum() * area - target;
        r.value += diff.abs();
        grads.push(Image::filled(h, w, sign0(diff) * area / norm));
    }
    r.value /= norm;
    r.gradients.insert(GradTarget::for_kind(kind), grads);
    Ok(r)
}

/// `(1/N_b) Σ_{i∈K} [λ_l1 ‖pred_i − target_i‖₁ − gc(pred_i, target_i)]`.
pub fn loss_bone(
    bundle: &PredictionBundle,
    sup: &SupervisionBundle,
    kind: DrrKind,
    w: &LossWeights,
) -> Result<LossResult> {
    if sup.bone_indices.is_empty() {
        return Ok(LossResult::new(0.0));
    }
    let stack = bundle.stack(kind);
    let targets = sup
        .aligned_bones
        .get(&kind)
        .ok_or_else(|| Error::Config(format!("no aligned {kind} bone targets supplied")))?;
    if targets.len() != sup.bone_indices.len() {
        return Err(Error::Config(format!(
            "{} aligned {kind} targets for {} bone indices",
            targets.len(),
            sup.bone_indices.len()
        )));
    }
    let nb = sup.bone_indices.len() as f64;
    let (h, wd) = stack.shape();

    let mut r = LossResult::new(0.0);
    let mut grads = vec![Image::zeros(h, wd); stack.len()];
    for (&i, target) in sup.bone_indices.iter().zip(targets) {
        if i >= stack.len() {
            return Err(Error::Config(format!("bone index {i} out of range")));
        }
        let pred = stack.channel(i);
        pred.ensure_same_shape(target, "aligned bone target")?;
        let t = gc_term(pred, target)?;
        let g = &mut grads[i];
        let mut l1 = 0.0;
        for ((gv, &p), &q) in g.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
            let d = p - q;
            l1 += d.abs();
            *gv = w.lambda_l1 * sign0(d) / nb;
        }
        g.add_scaled(&t.grad_a, -1.0 / nb);
        r.value += (w.lambda_l1 * l1 - t.value) / nb;
    }
    r.gradients.insert(GradTarget::for_kind(kind), grads);
    Ok(r)
}

/// Adversarial and cycle totals computed by the training framework.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GanTerms {
    /// Sum of both adversarial losses.
    pub adversarial: f64,
    /// Unweighted cycle-consistency loss.
    pub cycle: f64,
}

impl GanTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.adversarial + w.lambda_cyc * self.cycle
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KindTerms {
    pub wv: f64,
    pub v: f64,
    pub m: f64,
}

impl KindTerms {
    pub fn get(&self, kind: DrrKind) -> f64 {
        match kind {
            DrrKind::Wv => self.wv,
            DrrKind::V => self.v,
            DrrKind::M => self.m,
        }
    }

    fn set(&mut self, kind: DrrKind, v: f64) {
        match kind {
            DrrKind::Wv => self.wv = v,
            DrrKind::V => self.v = v,
            DrrKind::M => self.m = v,
        }
    }

    pub fn sum(&self) -> f64 {
        self.wv + self.v + self.m
    }
}

/// Weighted contributions; they add up to the total in declaration order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub gan: f64,
    pub gc_recon: f64,
    pub gc_chain: f64,
    pub owis: KindTerms,
    pub bone: KindTerms,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.gan
            + self.gc_recon
            + self.gc_chain
            + self.owis.wv
            + self.owis.v
            + self.owis.m
            + self.bone.wv
            + self.bone.v
            + self.bone.m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: LossTerms,
    pub weights: LossWeights,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FullLoss {
    pub result: LossResult,
    pub breakdown: LossBreakdown,
}

/// The composite objective with an itemized breakdown.
pub fn loss_full(
    bundle: &PredictionBundle,
    sup: &SupervisionBundle,
    gan: GanTerms,
    w: &LossWeights,
) -> Result<FullLoss> {
    w.validate()?;
    sup.validate()?;
    let mut terms = LossTerms {
        gan: gan.total(w),
        ..LossTerms::default()
    };
    let mut acc = LossResult::new(0.0);

    let recon = loss_gc_recon(bundle)?;
    terms.gc_recon = w.lambda_gca * recon.value;
    acc.absorb(recon, w.lambda_gca);

    let chain = loss_gc_chain(bundle)?;
    terms.gc_chain = chain.value;
    acc.absorb(chain, 1.0);

    for kind in DrrKind::ALL {
        let owis = loss_owis(bundle, sup, kind)?;
        terms.owis.set(kind, w.lambda_is * owis.value);
        acc.absorb(owis, w.lambda_is);
    }
    for kind in DrrKind::ALL {
        let bone = loss_bone(bundle, sup, kind, w)?;
        terms.bone.set(kind, bone.value);
        acc.absorb(bone, 1.0);
    }

    acc.value = terms.total();
    if !acc.value.is_finite() {
        return Err(Error::Degenerate("composite loss is not finite".into()));
    }
    let breakdown = LossBreakdown {
        total: acc.value,
        terms,
        weights: *w,
        flags: acc.flags.clone(),
    };
    Ok(FullLoss {
        result: acc,
        breakdown,
    })
}
