//! Threshold-sweep metrics built on per-threshold confusion counts.

use super::{check_pair, thresholds, BinaryMask, Curve, SaliencyMap, BETA2, THRESHOLD_COUNT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn f_measure(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        let den = BETA2 * p + r;
        if den == 0.0 {
            0.0
        } else {
            (1.0 + BETA2) * p * r / den
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Enhanced-alignment score of the binarized prediction these counts describe.
    pub fn e_measure(&self) -> f64 {
        let n = self.total() as f64;
        let gt_pos = self.tp + self.fn_;
        if gt_pos == 0 {
            return (self.fn_ + self.tn) as f64 / n;
        }
        if gt_pos == self.total() {
            return (self.tp + self.fp) as f64 / n;
        }
        let mu_fm = (self.tp + self.fp) as f64 / n;
        let mu_gt = gt_pos as f64 / n;
        let phi = |fm: f64, gt: f64| {
            let (a, b) = (fm - mu_fm, gt - mu_gt);
            let align = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
            (align + 1.0).powi(2) / 4.0
        };
        (self.tp as f64 * phi(1.0, 1.0)
            + self.fp as f64 * phi(1.0, 0.0)
            + self.fn_ as f64 * phi(0.0, 1.0)
            + self.tn as f64 * phi(0.0, 0.0))
            / n
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
    pub f: f64,
}

impl From<Confusion> for Prf {
    fn from(c: Confusion) -> Self {
        Self {
            precision: c.precision(),
            recall: c.recall(),
            fpr: c.fpr(),
            f: c.f_measure(),
        }
    }
}

/// Precision, recall, false-positive rate and F-measure with `pred > t` positive.
pub fn prf_at_threshold(pred: &SaliencyMap, gt: &BinaryMask, t: f64) -> Result<Prf> {
    check_pair("prf_at_threshold", pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p > t, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c.into())
}

/// Number of sweep thresholds strictly below `p`.
fn thresholds_below(p: f64) -> usize {
    let mut k = ((p * 255.0).ceil().max(0.0) as usize).min(THRESHOLD_COUNT);
    while k > 0 && (k - 1) as f64 / 255.0 >= p {
        k -= 1;
    }
    while k < THRESHOLD_COUNT && (k as f64 / 255.0) < p {
        k += 1;
    }
    k
}

/// Confusion counts at each of the 256 thresholds, in one pass over the pixels.
pub fn confusion_sweep(pred: &SaliencyMap, gt: &BinaryMask) -> Result<Vec<Confusion>> {
    check_pair("confusion_sweep", pred, gt)?;
    let mut fg = [0u64; THRESHOLD_COUNT + 1];
    let mut bg = [0u64; THRESHOLD_COUNT + 1];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let k = thresholds_below(p);
        if g {
            fg[k] += 1;
        } else {
            bg[k] += 1;
        }
    }
    let (total_fg, total_bg): (u64, u64) = (fg.iter().sum(), bg.iter().sum());
    let mut out = Vec::with_capacity(THRESHOLD_COUNT);
    // positive at threshold i iff k > i
    let (mut tp, mut fp) = (total_fg - fg[0], total_bg - bg[0]);
    for i in 0..THRESHOLD_COUNT {
        out.push(Confusion {
            tp,
            fp,
            fn_: total_fg - tp,
            tn: total_bg - fp,
        });
        tp -= fg[i + 1];
        fp -= bg[i + 1];
    }
    Ok(out)
}

fn sweep_mean<F>(pairs: &[(SaliencyMap, BinaryMask)], f: F) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&Confusion) -> (f64, f64),
{
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = vec![(0.0, 0.0); THRESHOLD_COUNT];
    for (p, g) in pairs {
        for (a, c) in acc.iter_mut().zip(confusion_sweep(p, g)?) {
            let (x, y) = f(&c);
            a.0 += x;
            a.1 += y;
        }
    }
    let n = pairs.len() as f64;
    Ok(acc.into_iter().map(|(x, y)| (x / n, y / n)).collect())
}

fn curve(name: &str, points: Vec<(f64, f64)>) -> Curve {
    Curve {
        name: name.into(),
        thresholds: thresholds(),
        points,
    }
}

fn max_mean(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    (max, values.sum::<f64>() / n)
}

/// Per-threshold dataset-mean F-measure, with its max and mean over thresholds.
pub fn fm_curve(pairs: &[(SaliencyMap, BinaryMask)]) -> Result<(Curve, f64, f64)> {
    let pts = sweep_mean(pairs, |c| (c.f_measure(), c.f_measure()))?;
    let (max, mean) = max_mean(pts.iter().map(|p| p.1));
    let pts = thresholds().into_iter().zip(pts).map(|(t, (_, f))| (t, f)).collect();
    Ok((curve("fm", pts), max, mean))
}

/// Dataset-mean (recall, precision) per threshold.
pub fn pr_curve(pairs: &[(SaliencyMap, BinaryMask)]) -> Result<Curve> {
    Ok(curve("pr", sweep_mean(pairs, |c| (c.recall(), c.precision()))?))
}

/// Dataset-mean (FPR, TPR) per threshold and the trapezoid area under it,
/// anchored at (0,0) and (1,1).
pub fn roc_curve(pairs: &[(SaliencyMap, BinaryMask)]) -> Result<(Curve, f64)> {
    let pts = sweep_mean(pairs, |c| (c.fpr(), c.recall()))?;
    let mut path = vec![(0.0, 0.0)];
    // FPR falls as the threshold rises, so the reversed sweep runs left to right
    path.extend(pts.iter().rev().copied());
    path.push((1.0, 1.0));
    path.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let auc = path.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    Ok((curve("roc", pts), auc))
}

/// Enhanced-alignment measure over the threshold sweep for one image.
pub fn e_measure(pred: &SaliencyMap, gt: &BinaryMask) -> Result<(f64, f64, Curve)> {
    let scores: Vec<f64> = confusion_sweep(pred, gt)?.iter().map(Confusion::e_measure).collect();
    let (max, mean) = max_mean(scores.iter().copied());
    let pts = thresholds().into_iter().zip(scores).collect();
    Ok((max, mean, curve("em", pts)))
}

/// Per-threshold dataset-mean E-measure, with its max and mean over thresholds.
pub fn em_curve(pairs: &[(SaliencyMap, BinaryMask)]) -> Result<(Curve, f64, f64)> {
    let pts = sweep_mean(pairs, |c| (c.e_measure(), c.e_measure()))?;
    let (max, mean) = max_mean(pts.iter().map(|p| p.1));
    let pts = thresholds().into_iter().zip(pts).map(|(t, (_, e))| (t, e)).collect();
    Ok((curve("em", pts), max, mean))
}
