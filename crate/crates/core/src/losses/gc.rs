//! Gradient correlation: mean zero-mean NCC of 3x3 Sobel responses.

use crate::error::{Error, Result};
use crate::image::Image;

use super::{GradTarget, LossResult};

/// NCC denominators below this are treated as undefined.
pub const NCC_EPSILON: f64 = 1e-12;

const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Valid-region correlation with a 3x3 kernel; output is `(h-2) x (w-2)`.
fn correlate(img: &Image, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let (h, w) = img.shape();
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for r in 0..h - 2 {
        for c in 0..w - 2 {
            let mut acc = 0.0;
            for (i, krow) in k.iter().enumerate() {
                for (j, kv) in krow.iter().enumerate() {
                    acc += kv * img.get(r + i, c + j);
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Adjoint of [`correlate`]: scatters response-space gradients back to pixels.
fn correlate_adjoint(grad: &[f64], k: &[[f64; 3]; 3], out: &mut Image) {
    let (h, w) = out.shape();
    let ow = w - 2;
    for r in 0..h - 2 {
        for c in 0..ow {
            let g = grad[r * ow + c];
            if g == 0.0 {
                continue;
            }
            for (i, krow) in k.iter().enumerate() {
                for (j, kv) in krow.iter().enumerate() {
                    let idx = (r + i) * w + c + j;
                    out.data_mut()[idx] += kv * g;
                }
            }
        }
    }
}

struct Ncc {
    value: f64,
    dp: Vec<f64>,
    dq: Vec<f64>,
}

fn ncc(p: &[f64], q: &[f64]) -> Option<Ncc> {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mq = q.iter().sum::<f64>() / n;
    let mut spp = 0.0;
    let mut sqq = 0.0;
    let mut spq = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (da, db) = (a - mp, b - mq);
        spp += da * da;
        sqq += db * db;
        spq += da * db;
    }
    let denom = (spp * sqq).sqrt();
    if !(denom >= NCC_EPSILON) {
        return None;
    }
    let value = spq / denom;
    // d/dp_k = (q_k - q̄)/denom - value (p_k - p̄)/spp; the mean terms cancel
    let dp = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| (b - mq) / denom - value * (a - mp) / spp)
        .collect();
    let dq = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| (a - mp) / denom - value * (b - mq) / sqq)
        .collect();
    Some(Ncc { value, dp, dq })
}

/// GC value with gradients with respect to both images.
#[derive(Debug, Clone)]
pub struct GcTerm {
    pub value: f64,
    pub grad_a: Image,
    pub grad_b: Image,
}

pub fn gc_term(a: &Image, b: &Image) -> Result<GcTerm> {
    a.ensure_same_shape(b, "gc operands")?;
    let (h, w) = a.shape();
    if h < 3 || w < 3 {
        return Err(Error::Dimension(format!(
            "gc needs at least 3x3 images, got {h}x{w}"
        )));
    }
    let (ax, ay) = (correlate(a, &KX), correlate(a, &KY));
    let (bx, by) = (correlate(b, &KX), correlate(b, &KY));
    let degenerate = || Error::Degenerate("gradient correlation of a constant image".into());
    let nx = ncc(&ax, &bx).ok_or_else(degenerate)?;
    let ny = ncc(&ay, &by).ok_or_else(degenerate)?;

    let half = |v: Vec<f64>| v.into_iter().map(|g| 0.5 * g).collect::<Vec<_>>();
    let mut grad_a = Image::zeros(h, w);
    let mut grad_b = Image::zeros(h, w);
    correlate_adjoint(&half(nx.dp), &KX, &mut grad_a);
    correlate_adjoint(&half(ny.dp), &KY, &mut grad_a);
    correlate_adjoint(&half(nx.dq), &KX, &mut grad_b);
    correlate_adjoint(&half(ny.dq), &KY, &mut grad_b);

    Ok(GcTerm {
        value: (0.5 * (nx.value + ny.value)).clamp(-1.0, 1.0),
        grad_a,
        grad_b,
    })
}

/// Gradient correlation of two images, in `[-1, 1]`.
pub fn gc(a: &Image, b: &Image) -> Result<LossResult> {
    let t = gc_term(a, b)?;
    let mut r = LossResult::new(t.value);
    r.gradients.insert(GradTarget::A, vec![t.grad_a]);
    r.gradients.insert(GradTarget::B, vec![t.grad_b]);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn self_shift_and_negation() {
        let a = random(9, 11, 1);
        assert!((gc(&a, &a).unwrap().value - 1.0).abs() < 1e-12);
        assert!((gc(&a, &a.map(|v| v + 5.0)).unwrap().value - 1.0).abs() < 1e-12);
        assert!((gc(&a, &a.scaled(-1.0)).unwrap().value + 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_affine_invariant() {
        let a = random(10, 10, 2);
        let b = random(10, 10, 3);
        let ab = gc(&a, &b).unwrap().value;
        assert!((ab - gc(&b, &a).unwrap().value).abs() < 1e-12);
        let scaled = b.map(|v| 3.5 * v - 2.0);
        assert!((gc(&a, &scaled).unwrap().value - ab).abs() < 1e-9);
        let flipped = b.map(|v| -0.25 * v + 7.0);
        assert!((gc(&a, &flipped).unwrap().value + ab).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn constant_image_is_degenerate() {
        let a = random(5, 5, 4);
        let c = Image::filled(5, 5, 2.0);
        assert!(matches!(gc(&a, &c), Err(Error::Degenerate(_))));
        // varies along rows only: the x response vanishes
        let rows = Image::from_fn(5, 5, |r, _| r as f64);
        assert!(matches!(gc(&a, &rows), Err(Error::Degenerate(_))));
    }

    #[test]
    fn small_or_mismatched_inputs_rejected() {
        assert!(gc(&random(2, 5, 1), &random(2, 5, 2)).is_err());
        assert!(gc(&random(4, 5, 1), &random(5, 4, 2)).is_err());
    }

    #[test]
    fn adjoint_identity() {
        // <K a, g> == <a, K* g>
        let a = random(7, 8, 5);
        let g: Vec<f64> = random(5, 6, 6).into_vec();
        for k in [&KX, &KY] {
            let ka = correlate(&a, k);
            let lhs: f64 = ka.iter().zip(&g).map(|(x, y)| x * y).sum();
            let mut adj = Image::zeros(7, 8);
            correlate_adjoint(&g, k, &mut adj);
            let rhs: f64 = a.data().iter().zip(adj.data()).map(|(x, y)| x * y).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
