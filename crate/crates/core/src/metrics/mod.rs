//! Saliency evaluation: MAE, F-measure, E-measure, S-measure and the PR, ROC,
//! Fm and Em curves over a 256-step threshold sweep.

mod structure;
mod threshold;

use std::fmt::Write as _;
use std::path::Path;

pub use structure::s_measure;
pub use threshold::{
    confusion_sweep, e_measure, em_curve, fm_curve, pr_curve, prf_at_threshold, roc_curve, Confusion, Prf,
};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const THRESHOLD_COUNT: usize = 256;
pub const BETA2: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;

/// `i/255` for `i = 0..=255`.
pub fn thresholds() -> Vec<f64> {
    (0..THRESHOLD_COUNT).map(|i| i as f64 / 255.0).collect()
}

/// `(H, W)` map of `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("BinaryMask", format!("{} values for {h}x{w}", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.h, self.w, |y, x| self.get(y, self.w - 1 - x))
    }

    pub fn inverted(&self) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// `(1, 1, H, W)` tensor of zeros and ones.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn([1, 1, self.h, self.w], |[_, _, y, x]| if self.get(y, x) { T::one() } else { T::zero() })
    }

    pub fn to_map(&self) -> SaliencyMap {
        SaliencyMap {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// `(H, W)` map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("SaliencyMap", format!("{} values for {h}x{w}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("SaliencyMap", format!("value {v} outside [0, 1]")));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect())
    }

    /// Sample `n`, channel 0 of an `(N, 1, H, W)` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<Self> {
        Self::new(t.h(), t.w(), t.plane(n, 0).iter().map(|v| v.f64()).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// 8-bit quantization `round(255·v)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }
}

pub(crate) fn check_pair(op: &'static str, pred: &SaliencyMap, gt: &BinaryMask) -> Result<()> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::shape(
            op,
            format!("prediction {}x{} vs ground truth {}x{}", pred.h, pred.w, gt.h, gt.w),
        ));
    }
    if pred.data.is_empty() {
        return Err(Error::invalid(op, "empty map"));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    check_pair("mae", pred, gt)?;
    let total: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(total / pred.data.len() as f64)
}

/// Sampled `(x, y)` curve over an increasing threshold list.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub name: String,
    pub thresholds: Vec<f64>,
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,x,y\n");
        for (t, (x, y)) in self.thresholds.iter().zip(&self.points) {
            let _ = writeln!(s, "{t},{x},{y}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub max_fm: f64,
    pub mean_fm: f64,
    pub max_em: f64,
    pub mean_em: f64,
    pub sm: f64,
    pub auc: f64,
    pub pr: Curve,
    pub roc: Curve,
    pub fm: Curve,
    pub em: Curve,
}

impl MetricReport {
    pub fn scalars(&self) -> [(&'static str, f64); 7] {
        [
            ("mae", self.mae),
            ("max_fm", self.max_fm),
            ("mean_fm", self.mean_fm),
            ("max_em", self.max_em),
            ("mean_em", self.mean_em),
            ("sm", self.sm),
            ("auc", self.auc),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.scalars() {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    /// Write `report.csv`, `curve_{pr,roc,fm,em}.csv` and `sm_mae.csv` under `dir`.
    pub fn write(&self, dir: &Path, label: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        for c in [&self.pr, &self.roc, &self.fm, &self.em] {
            std::fs::write(dir.join(format!("curve_{}.csv", c.name)), c.to_csv())?;
        }
        std::fs::write(dir.join("sm_mae.csv"), format!("label,sm,mae\n{label},{},{}\n", self.sm, self.mae))?;
        Ok(())
    }
}

/// Full report over matched pairs. Per-image scores are averaged over images;
/// curves average per-image values at each threshold.
pub fn evaluate(pairs: &[(SaliencyMap, BinaryMask)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = pairs.len() as f64;
    let mut mae_sum = 0.0;
    let mut sm_sum = 0.0;
    for (p, g) in pairs {
        mae_sum += mae(p, g)?;
        sm_sum += s_measure(p, g, S_ALPHA)?;
    }
    let (fm, max_fm, mean_fm) = fm_curve(pairs)?;
    let (em, max_em, mean_em) = em_curve(pairs)?;
    let (roc, auc) = roc_curve(pairs)?;
    Ok(MetricReport {
        mae: mae_sum / n,
        max_fm,
        mean_fm,
        max_em,
        mean_em,
        sm: sm_sum / n,
        auc,
        pr: pr_curve(pairs)?,
        roc,
        fm,
        em,
    })
}

/// Evaluate 8-bit grayscale predictions against ground-truth masks matched by
/// file stem, in stem order.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let gts = crate::data::list_images(gt_dir)?;
    let preds = crate::data::list_images(pred_dir)?;
    if gts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (stem, _) in &preds {
        if !gts.iter().any(|(s, _)| s == stem) {
            return Err(Error::MissingPair(stem.clone()));
        }
    }
    let mut pairs = Vec::with_capacity(gts.len());
    for (stem, gt_path) in &gts {
        let pred_path = preds
            .iter()
            .find(|(s, _)| s == stem)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::MissingPair(stem.clone()))?;
        let gt = crate::data::load_mask(gt_path, None)?;
        let pred = crate::data::load_saliency(pred_path)?;
        check_pair("evaluate_dataset", &pred, &gt)?;
        pairs.push((pred, gt));
    }
    evaluate(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        let gt = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        assert_eq!(mae(&gt.to_map(), &gt).unwrap(), 0.0);
        assert_eq!(mae(&gt.inverted().to_map(), &gt).unwrap(), 1.0);
        let half = SaliencyMap::from_fn(4, 4, |y, x| {
            let g = if y < 2 { 1.0 } else { 0.0 };
            if x < 2 {
                g
            } else {
                0.5
            }
        })
        .unwrap();
        assert_eq!(mae(&half, &gt).unwrap(), 0.25);
    }

    #[test]
    fn out_of_range_map_rejected() {
        assert!(SaliencyMap::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(SaliencyMap::new(1, 2, vec![0.5]).is_err());
    }

    #[test]
    fn thresholds_are_strictly_increasing() {
        let t = thresholds();
        assert_eq!(t.len(), 256);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[255], 1.0);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
    }
}
