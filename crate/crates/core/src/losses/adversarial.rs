//! Adversarial and cycle-consistency terms over supplied tensors.

use crate::error::{Error, Result};
use crate::image::Image;

use super::{sign0, GradTarget, LossResult};

/// Scores are clamped into `[ε, 1 − ε]` before taking logarithms.
pub const SCORE_EPSILON: f64 = 1e-7;

fn clamp_scores(map: &Image, what: &str, flags: &mut Vec<String>) -> Result<Image> {
    if map.data().iter().any(|&s| !(0.0..=1.0).contains(&s)) {
        return Err(Error::Usage(format!("{what} scores must lie in [0, 1]")));
    }
    let clamped = map.map(|s| s.clamp(SCORE_EPSILON, 1.0 - SCORE_EPSILON));
    let n = map
        .data()
        .iter()
        .zip(clamped.data())
        .filter(|(a, b)| a != b)
        .count();
    if n > 0 {
        flags.push(format!("{what}: {n} scores clamped"));
    }
    Ok(clamped)
}

/// `mean(log d_real) + mean(log(1 − d_fake))`.
pub fn loss_gan(d_real: &Image, d_fake: &Image) -> Result<LossResult> {
    let mut flags = Vec::new();
    let real = clamp_scores(d_real, "d_real", &mut flags)?;
    let fake = clamp_scores(d_fake, "d_fake", &mut flags)?;
    let nr = real.len() as f64;
    let nf = fake.len() as f64;
    let value = real.data().iter().map(|s| s.ln()).sum::<f64>() / nr
        + fake.data().iter().map(|s| (1.0 - s).ln()).sum::<f64>() / nf;
    let mut r = LossResult::new(value);
    r.gradients
        .insert(GradTarget::DReal, vec![real.map(|s| 1.0 / (nr * s))]);
    r.gradients.insert(
        GradTarget::DFake,
        vec![fake.map(|s| -1.0 / (nf * (1.0 - s)))],
    );
    r.flags = flags;
    Ok(r)
}

fn mean_abs(orig: &Image, rt: &Image) -> (f64, Image) {
    let n = orig.len() as f64;
    let mut grad = Image::zeros(orig.height(), orig.width());
    let mut acc = 0.0;
    for ((g, &o), &p) in grad.data_mut().iter_mut().zip(orig.data()).zip(rt.data()) {
        let d = p - o;
        acc += d.abs();
        *g = sign0(d) / n;
    }
    (acc / n, grad)
}

/// `mean|x_rt − x| + mean|y_rt − y|`, differentiated w.r.t. the round trips.
pub fn loss_cycle(x: &Image, x_rt: &Image, y: &Image, y_rt: &Image) -> Result<LossResult> {
    x.ensure_same_shape(x_rt, "x round trip")?;
    y.ensure_same_shape(y_rt, "y round trip")?;
    let (vx, gx) = mean_abs(x, x_rt);
    let (vy, gy) = mean_abs(y, y_rt);
    let mut r = LossResult::new(vx + vy);
    r.gradients.insert(GradTarget::XRoundTrip, vec![gx]);
    r.gradients.insert(GradTarget::YRoundTrip, vec![gy]);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_scores_closed_form() {
        let h = Image::filled(4, 5, 0.5);
        let r = loss_gan(&h, &h).unwrap();
        assert!((r.value - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!((r.value + 1.3863).abs() < 1e-4);
        assert!(r.flags.is_empty());
    }

    #[test]
    fn extreme_scores_clamped_and_flagged() {
        let real = Image::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let fake = Image::filled(1, 2, 0.5);
        let r = loss_gan(&real, &fake).unwrap();
        assert!(r.value.is_finite());
        assert_eq!(r.flags.len(), 1);
        let bad = Image::filled(1, 1, 1.5);
        assert!(loss_gan(&bad, &bad).is_err());
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let x = Image::from_fn(3, 3, |r, c| (r * 3 + c) as f64);
        let y = x.scaled(2.0);
        let r = loss_cycle(&x, &x, &y, &y).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.gradients[&GradTarget::XRoundTrip][0]
            .data()
            .iter()
            .all(|&g| g == 0.0));
    }
}
