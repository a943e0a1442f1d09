//! Supervision losses for X-ray → object-wise DRR decomposition.
//!
//! Every loss returns a [`LossResult`]: the scalar value plus closed-form
//! gradients keyed by the input they differentiate. Inputs that receive no
//! gradient (data, or stop-gradient operands) have no key at all.

mod adversarial;
mod decomposition;
mod gc;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::project::{DrrKind, DrrStack};
use crate::volume::{ObjectClass, ObjectSet};

pub use adversarial::{loss_cycle, loss_gan, SCORE_EPSILON};
pub use decomposition::{
    loss_bone, loss_full, loss_gc_chain, loss_gc_recon, loss_owis, FullLoss, GanTerms, KindTerms,
    LossBreakdown, LossTerms,
};
pub use gc::{gc, gc_term, GcTerm, NCC_EPSILON};

/// The input a gradient refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    /// First operand of a pairwise similarity.
    A,
    /// Second operand of a pairwise similarity.
    B,
    Wv,
    V,
    M,
    DReal,
    DFake,
    XRoundTrip,
    YRoundTrip,
}

impl GradTarget {
    pub fn for_kind(kind: DrrKind) -> Self {
        match kind {
            DrrKind::Wv => GradTarget::Wv,
            DrrKind::V => GradTarget::V,
            DrrKind::M => GradTarget::M,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// One image per channel of the differentiated input.
    pub gradients: BTreeMap<GradTarget, Vec<Image>>,
    /// Terms that were skipped or clamped, in evaluation order.
    pub flags: Vec<String>,
}

impl LossResult {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            gradients: BTreeMap::new(),
            flags: Vec::new(),
        }
    }

    pub fn gradient(&self, target: GradTarget) -> Option<&[Image]> {
        self.gradients.get(&target).map(Vec::as_slice)
    }

    /// Accumulates `factor · other` into this result's gradients.
    fn absorb(&mut self, other: LossResult, factor: f64) {
        for (key, grads) in other.gradients {
            match self.gradients.get_mut(&key) {
                Some(mine) => {
                    for (m, g) in mine.iter_mut().zip(&grads) {
                        m.add_scaled(g, factor);
                    }
                }
                None => {
                    let scaled = grads.iter().map(|g| g.scaled(factor)).collect();
                    self.gradients.insert(key, scaled);
                }
            }
        }
        self.flags.extend(other.flags);
    }
}

/// Sign with the L1 subgradient convention: 0 at exactly 0.
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Balance parameters of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_gca: f64,
    pub lambda_l1: f64,
    pub lambda_is: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_gca: 0.5,
            lambda_l1: 100.0,
            lambda_is: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_gca", self.lambda_gca),
            ("lambda_l1", self.lambda_l1),
            ("lambda_is", self.lambda_is),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Model outputs for one radiograph.
#[derive(Debug, Clone)]
pub struct PredictionBundle {
    wv: DrrStack,
    v: DrrStack,
    m: DrrStack,
    xray: Image,
}

impl PredictionBundle {
    pub fn new(wv: DrrStack, v: DrrStack, m: DrrStack, xray: Image) -> Result<Self> {
        for (s, kind) in [(&wv, DrrKind::Wv), (&v, DrrKind::V), (&m, DrrKind::M)] {
            if s.kind() != kind {
                return Err(Error::Usage(format!(
                    "expected a {kind} stack, got {}",
                    s.kind()
                )));
            }
            if s.len() != wv.len() || s.shape() != wv.shape() {
                return Err(Error::Dimension(format!(
                    "{kind} stack is {}x{:?}, wv stack is {}x{:?}",
                    s.len(),
                    s.shape(),
                    wv.len(),
                    wv.shape()
                )));
            }
            if s.names() != wv.names() {
                return Err(Error::Dimension(format!(
                    "{kind} stack object order differs from wv"
                )));
            }
        }
        if xray.shape() != wv.shape() {
            return Err(Error::Dimension(format!(
                "x-ray is {:?}, stacks are {:?}",
                xray.shape(),
                wv.shape()
            )));
        }
        if !xray.is_finite() {
            return Err(Error::Usage("x-ray has non-finite pixels".into()));
        }
        Ok(Self { wv, v, m, xray })
    }

    pub fn stack(&self, kind: DrrKind) -> &DrrStack {
        match kind {
            DrrKind::Wv => &self.wv,
            DrrKind::V => &self.v,
            DrrKind::M => &self.m,
        }
    }

    pub fn xray(&self) -> &Image {
        &self.xray
    }

    pub fn objects(&self) -> usize {
        self.wv.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.wv.shape()
    }
}

/// Targets for the intensity-sum and aligned-bone losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisionBundle {
    /// Per kind, one target sum per object.
    pub target_sums: BTreeMap<DrrKind, Vec<f64>>,
    /// Object indices with registered targets (the set K).
    pub bone_indices: Vec<usize>,
    /// Per kind, one target image per entry of `bone_indices`.
    #[serde(skip)]
    pub aligned_bones: BTreeMap<DrrKind, Vec<Image>>,
}

impl SupervisionBundle {
    /// Structural checks that need no object catalog.
    pub fn validate(&self) -> Result<()> {
        for (kind, sums) in &self.target_sums {
            if let Some(i) = sums.iter().position(|s| !s.is_finite()) {
                return Err(Error::Config(format!(
                    "{kind} target sum {i} is not finite"
                )));
            }
        }
        let mut seen = self.bone_indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(
                "duplicate index in the aligned bone set".into(),
            ));
        }
        for (kind, imgs) in &self.aligned_bones {
            if imgs.len() != self.bone_indices.len() {
                return Err(Error::Config(format!(
                    "{} aligned {kind} images for {} bone indices",
                    imgs.len(),
                    self.bone_indices.len()
                )));
            }
        }
        Ok(())
    }

    /// Additionally checks that every index in K names a bone.
    pub fn validate_against(&self, objects: &ObjectSet) -> Result<()> {
        self.validate()?;
        for &i in &self.bone_indices {
            match objects.get(i) {
                Some(e) if e.class == ObjectClass::Bone => {}
                Some(e) => {
                    return Err(Error::Config(format!(
                        "aligned index {i} ({}) is not a bone",
                        e.name
                    )))
                }
                None => return Err(Error::Config(format!("aligned index {i} out of range"))),
            }
        }
        Ok(())
    }
}
