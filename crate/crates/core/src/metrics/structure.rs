//! Structure measure: an object-aware term blended with a region-aware SSIM
//! over four quadrants split at the ground-truth centroid.

use super::{check_pair, BinaryMask, SaliencyMap};
use crate::error::{Error, Result};

const EPS: f64 = f64::EPSILON;

pub fn s_measure(pred: &SaliencyMap, gt: &BinaryMask, alpha: f64) -> Result<f64> {
    check_pair("s_measure", pred, gt)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("s_measure", format!("alpha {alpha} outside [0, 1]")));
    }
    let n = pred.data().len() as f64;
    let y = gt.count() as f64 / n;
    let mean_pred = pred.data().iter().sum::<f64>() / n;
    let score = if gt.count() == 0 {
        1.0 - mean_pred
    } else if gt.count() == pred.data().len() {
        mean_pred
    } else {
        alpha * object(pred, gt, y) + (1.0 - alpha) * region(pred, gt)
    };
    Ok(score.max(0.0))
}

fn object(pred: &SaliencyMap, gt: &BinaryMask, u: f64) -> f64 {
    let fg: Vec<f64> = pred.data().iter().zip(gt.data()).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.data().iter().zip(gt.data()).filter(|(_, &g)| !g).map(|(&p, _)| 1.0 - p).collect();
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// `2x̄ / (x̄² + 1 + σ + eps)` with the sample standard deviation `σ`.
fn object_score(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sigma = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    2.0 * mean / (mean * mean + 1.0 + sigma + EPS)
}

/// 1-based centroid `(x, y)` of the foreground, rounded half to even.
fn centroid(gt: &BinaryMask) -> (usize, usize) {
    let (h, w) = (gt.height(), gt.width());
    let count = gt.count();
    if count == 0 {
        return (
            (w as f64 / 2.0).round_ties_even() as usize + 1,
            (h as f64 / 2.0).round_ties_even() as usize + 1,
        );
    }
    let (mut sy, mut sx) = (0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            if gt.get(r, c) {
                sy += r;
                sx += c;
            }
        }
    }
    let cy = (sy as f64 / count as f64).round_ties_even() as usize;
    let cx = (sx as f64 / count as f64).round_ties_even() as usize;
    (cx + 1, cy + 1)
}

fn region(pred: &SaliencyMap, gt: &BinaryMask) -> f64 {
    let (h, w) = (gt.height(), gt.width());
    let (x, y) = centroid(gt);
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quads = [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)];
    [w1, w2, w3, w4]
        .iter()
        .zip(quads)
        .map(|(&wt, (r0, r1, c0, c1))| wt * ssim(pred, gt, r0, r1, c0, c1))
        .sum()
}

fn ssim(pred: &SaliencyMap, gt: &BinaryMask, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
    let count = (r1 - r0) * (c1 - c0);
    if count == 0 {
        return 0.0;
    }
    let n = count as f64;
    let cells = || (r0..r1).flat_map(move |r| (c0..c1).map(move |c| (r, c)));
    let g = |r: usize, c: usize| if gt.get(r, c) { 1.0 } else { 0.0 };
    let mx = cells().map(|(r, c)| pred.get(r, c)).sum::<f64>() / n;
    let my = cells().map(|(r, c)| g(r, c)).sum::<f64>() / n;
    let dof = if count > 1 { n - 1.0 } else { 1.0 };
    let sx = cells().map(|(r, c)| (pred.get(r, c) - mx).powi(2)).sum::<f64>() / dof;
    let sy = cells().map(|(r, c)| (g(r, c) - my).powi(2)).sum::<f64>() / dof;
    let sxy = cells().map(|(r, c)| (pred.get(r, c) - mx) * (g(r, c) - my)).sum::<f64>() / dof;
    let a = 4.0 * mx * my * sxy;
    let b = (mx * mx + my * my) * (sx + sy);
    if a != 0.0 {
        a / (b + EPS)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_match_scores_one() {
        let gt = BinaryMask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (1..5).contains(&x));
        let s = s_measure(&gt.to_map(), &gt, 0.5).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn inverted_scores_lower() {
        let gt = BinaryMask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (1..5).contains(&x));
        let good = s_measure(&gt.to_map(), &gt, 0.5).unwrap();
        let bad = s_measure(&gt.inverted().to_map(), &gt, 0.5).unwrap();
        assert!(bad < good);
        assert!(bad >= 0.0);
    }

    #[test]
    fn degenerate_ground_truth() {
        let empty = BinaryMask::from_fn(4, 4, |_, _| false);
        let full = BinaryMask::from_fn(4, 4, |_, _| true);
        let pred = SaliencyMap::from_fn(4, 4, |_, _| 0.25).unwrap();
        assert_eq!(s_measure(&pred, &empty, 0.5).unwrap(), 0.75);
        assert_eq!(s_measure(&pred, &full, 0.5).unwrap(), 0.25);
    }

    #[test]
    fn centroid_is_one_based() {
        let gt = BinaryMask::from_fn(5, 5, |y, x| y == 2 && x == 2);
        assert_eq!(centroid(&gt), (3, 3));
    }
}
