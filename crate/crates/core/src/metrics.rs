//! Agreement statistics for scalar predictions and image-quality scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR reported for (numerically) identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Predicted values paired with their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSamples {
    predicted: Vec<f64>,
    truth: Vec<f64>,
}

impl PairedSamples {
    pub fn new(predicted: Vec<f64>, truth: Vec<f64>) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} truth values",
                predicted.len(),
                truth.len()
            )));
        }
        if predicted.is_empty() {
            return Err(Error::Usage("no samples".into()));
        }
        if predicted.iter().chain(&truth).any(|v| !v.is_finite()) {
            return Err(Error::Usage("samples must be finite".into()));
        }
        Ok(Self { predicted, truth })
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }

    pub fn truth(&self) -> &[f64] {
        &self.truth
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    fn require(&self, n: usize, metric: &str) -> Result<()> {
        if self.len() < n {
            return Err(Error::UndefinedMetric(format!(
                "{metric} needs at least {n} samples, got {}",
                self.len()
            )));
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson correlation.
pub fn pcc(s: &PairedSamples) -> Result<f64> {
    s.require(2, "pcc")?;
    let (mp, mt) = (mean(&s.predicted), mean(&s.truth));
    let (mut spp, mut stt, mut spt) = (0.0, 0.0, 0.0);
    for (&p, &t) in s.predicted.iter().zip(&s.truth) {
        spp += (p - mp) * (p - mp);
        stt += (t - mt) * (t - mt);
        spt += (p - mp) * (t - mt);
    }
    if spp == 0.0 || stt == 0.0 {
        return Err(Error::UndefinedMetric("pcc of a constant series".into()));
    }
    Ok((spt / (spp * stt).sqrt()).clamp(-1.0, 1.0))
}

/// ICC(2,1): two-way random effects, absolute agreement, single rater,
/// with prediction and truth as the two raters.
pub fn icc(s: &PairedSamples) -> Result<f64> {
    s.require(2, "icc")?;
    let n = s.len() as f64;
    let k = 2.0;
    let grand = (s.predicted.iter().sum::<f64>() + s.truth.iter().sum::<f64>()) / (n * k);
    let (mp, mt) = (mean(&s.predicted), mean(&s.truth));

    let mut ss_rows = 0.0;
    let mut ss_total = 0.0;
    for (&p, &t) in s.predicted.iter().zip(&s.truth) {
        let row = 0.5 * (p + t);
        ss_rows += k * (row - grand).powi(2);
        ss_total += (p - grand).powi(2) + (t - grand).powi(2);
    }
    let ss_cols = n * ((mp - grand).powi(2) + (mt - grand).powi(2));
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);

    let ms_rows = ss_rows / (n - 1.0);
    let ms_cols = ss_cols / (k - 1.0);
    let ms_err = ss_err / ((n - 1.0) * (k - 1.0));
    let denom = ms_rows + (k - 1.0) * ms_err + k * (ms_cols - ms_err) / n;
    if !(denom > 0.0) {
        return Err(Error::UndefinedMetric(
            "icc with no between-target variance".into(),
        ));
    }
    Ok((ms_rows - ms_err) / denom)
}

pub fn mae(s: &PairedSamples) -> f64 {
    s.predicted
        .iter()
        .zip(&s.truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / s.len() as f64
}

/// Largest pixel of the reference, the default PSNR peak.
pub fn default_peak(reference: &Image) -> Result<f64> {
    let peak = reference
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(Error::UndefinedMetric(
            "reference image has no positive peak".into(),
        ));
    }
    Ok(peak)
}

/// Dynamic range spanned by both images, the default SSIM range.
pub fn default_range(a: &Image, b: &Image) -> Result<f64> {
    let (lo, hi) = a
        .data()
        .iter()
        .chain(b.data())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        return Err(Error::UndefinedMetric(
            "images span no intensity range".into(),
        ));
    }
    Ok(hi - lo)
}

fn check_pair(a: &Image, b: &Image, scale: f64, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Usage(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Usage(format!(
            "{what} must be positive, got {scale}"
        )));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_pair(a, b, peak, "peak")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse < peak * peak * 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully-contained 11×11 Gaussian windows. Images
/// smaller than the window use the largest odd window that fits.
pub fn ssim(a: &Image, b: &Image, range: f64) -> Result<f64> {
    check_pair(a, b, range, "range")?;
    let (h, w) = a.shape();
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - size {
        for c in 0..=w - size {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gi) in g.iter().enumerate() {
                for (j, gj) in g.iter().enumerate() {
                    let wt = gi * gj;
                    let x = a.get(r + i, c + j);
                    let y = b.get(r + i, c + j);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// One row of a prediction table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub case_id: String,
    pub object: String,
    pub predicted: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub object: String,
    pub n: usize,
    pub pcc: Option<f64>,
    pub icc: Option<f64>,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub icc_variant: String,
    pub objects: Vec<ObjectMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim_mean: Option<f64>,
}

impl MetricReport {
    pub const ICC_VARIANT: &'static str = "ICC(2,1) absolute agreement";

    /// Per-object statistics in order of first appearance. Correlations that
    /// are undefined for an object (constant series, n < 2) are `None`.
    pub fn from_records(records: &[SampleRecord]) -> Result<Self> {
        let mut order: Vec<&str> = Vec::new();
        for r in records {
            if !order.contains(&r.object.as_str()) {
                order.push(&r.object);
            }
        }
        let objects = order
            .into_iter()
            .map(|name| {
                let (p, t): (Vec<f64>, Vec<f64>) = records
                    .iter()
                    .filter(|r| r.object == name)
                    .map(|r| (r.predicted, r.truth))
                    .unzip();
                let s = PairedSamples::new(p, t)?;
                Ok(ObjectMetrics {
                    object: name.to_string(),
                    n: s.len(),
                    pcc: pcc(&s).ok(),
                    icc: icc(&s).ok(),
                    mae: mae(&s),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            icc_variant: Self::ICC_VARIANT.to_string(),
            objects,
            psnr_mean: None,
            ssim_mean: None,
        })
    }

    /// Adds mean PSNR/SSIM over `(prediction, reference)` pairs using the
    /// default peak and range of each pair.
    pub fn with_image_pairs(mut self, pairs: &[(Image, Image)]) -> Result<Self> {
        if pairs.is_empty() {
            return Ok(self);
        }
        let mut ps = 0.0;
        let mut ss = 0.0;
        for (pred, reference) in pairs {
            ps += psnr(pred, reference, default_peak(reference)?)?;
            ss += ssim(pred, reference, default_range(pred, reference)?)?;
        }
        self.psnr_mean = Some(ps / pairs.len() as f64);
        self.ssim_mean = Some(ss / pairs.len() as f64);
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(p: &[f64], t: &[f64]) -> PairedSamples {
        PairedSamples::new(p.to_vec(), t.to_vec()).unwrap()
    }

    #[test]
    fn trivial_agreement() {
        let t = [1.0, 2.5, 3.0, 7.0, 4.0];
        let s = pairs(&t, &t);
        assert_eq!(pcc(&s).unwrap(), 1.0);
        assert!((icc(&s).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(mae(&s), 0.0);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert_eq!(pcc(&pairs(&neg, &t)).unwrap(), -1.0);
        let off: Vec<f64> = t.iter().map(|v| v + 0.75).collect();
        assert!((mae(&pairs(&off, &t)) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn bias_lowers_icc_not_pcc() {
        let t = [1.0, 2.5, 3.0, 7.0, 4.0, 5.5];
        let p = [1.2, 2.1, 3.3, 6.5, 4.4, 5.0];
        let biased: Vec<f64> = p.iter().map(|v| v + 2.0).collect();
        let s = pairs(&p, &t);
        let sb = pairs(&biased, &t);
        assert!((pcc(&s).unwrap() - pcc(&sb).unwrap()).abs() < 1e-12);
        assert!(icc(&sb).unwrap() < icc(&s).unwrap());
        assert!(icc(&sb).unwrap() < pcc(&sb).unwrap());
    }

    #[test]
    fn undefined_cases() {
        let s = pairs(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]);
        assert!(matches!(pcc(&s), Err(Error::UndefinedMetric(_))));
        let flat = pairs(&[2.0, 2.0], &[2.0, 2.0]);
        assert!(matches!(icc(&flat), Err(Error::UndefinedMetric(_))));
        assert!(PairedSamples::new(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn psnr_closed_form_and_cap() {
        let a = Image::from_fn(8, 9, |r, c| (r + c) as f64 / 16.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&b, &a, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::zeros(3, 3), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = Image::from_fn(16, 14, |r, c| ((r * 3 + c * 7) % 11) as f64);
        let b = Image::from_fn(16, 14, |r, c| ((r * 5 + c * 2) % 13) as f64);
        assert!((ssim(&a, &a, 12.0).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b, 12.0).unwrap();
        assert!((ab - ssim(&b, &a, 12.0).unwrap()).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
        // smaller than the window still works
        let s = Image::from_fn(6, 5, |r, c| (r * c) as f64);
        assert!((ssim(&s, &s, 20.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_groups_by_object() {
        let rec = |case: &str, obj: &str, p, t| SampleRecord {
            case_id: case.into(),
            object: obj.into(),
            predicted: p,
            truth: t,
        };
        let records = vec![
            rec("a", "glu_max", 1.0, 1.1),
            rec("a", "iliacus", 2.0, 2.0),
            rec("b", "glu_max", 2.0, 2.2),
            rec("c", "glu_max", 3.5, 3.0),
        ];
        let r = MetricReport::from_records(&records).unwrap();
        assert_eq!(r.objects.len(), 2);
        assert_eq!(r.objects[0].object, "glu_max");
        assert_eq!(r.objects[0].n, 3);
        assert!(r.objects[0].pcc.is_some());
        assert!(r.objects[1].pcc.is_none());
        assert!((r.objects[0].mae - (0.1 + 0.2 + 0.5) / 3.0).abs() < 1e-12);
    }
}
