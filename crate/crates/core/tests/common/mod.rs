//! Independent scalar re-implementations used as oracles.

#![allow(dead_code)]

/// `[c][row][col]` planes of one image.
pub type Planes = Vec<Vec<Vec<f64>>>;

pub struct ScalarContrast {
    pub gx: Planes,
    pub gy: Planes,
    pub env: Planes,
    pub similarity: Vec<Vec<f64>>,
    pub mask: Vec<Vec<f64>>,
    pub masked: Planes,
    pub out: Planes,
}

fn depthwise3(x: &[Vec<f64>], k: &[[f64; 3]; 3]) -> Vec<Vec<f64>> {
    let (h, w) = (x.len() as isize, x[0].len() as isize);
    let mut y = vec![vec![0.0; w as usize]; h as usize];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (a, row) in k.iter().enumerate() {
                for (b, &kv) in row.iter().enumerate() {
                    let (rr, cc) = (r + a as isize - 1, c + b as isize - 1);
                    if rr >= 0 && rr < h && cc >= 0 && cc < w {
                        acc += kv * x[rr as usize][cc as usize];
                    }
                }
            }
            y[r as usize][c as usize] = acc;
        }
    }
    y
}

/// Contrast operator on one image: per-channel 3×3 kernels `kx`, `ky`,
/// then the 1×1 projection `norm_w[co][ci]`, `norm_b[co]`.
pub fn contrast_reference(
    x: &Planes,
    kx: &[[[f64; 3]; 3]],
    ky: &[[[f64; 3]; 3]],
    norm_w: &[Vec<f64>],
    norm_b: &[f64],
    eps: f64,
) -> ScalarContrast {
    let (ch, h, w) = (x.len(), x[0].len(), x[0][0].len());
    let gx: Planes = (0..ch).map(|c| depthwise3(&x[c], &kx[c])).collect();
    let gy: Planes = (0..ch).map(|c| depthwise3(&x[c], &ky[c])).collect();
    let env: Planes = (0..ch)
        .map(|c| (0..h).map(|r| (0..w).map(|q| gx[c][r][q].powi(2) + gy[c][r][q].powi(2)).collect()).collect())
        .collect();
    let mut similarity = vec![vec![0.0; w]; h];
    let mut mask = vec![vec![0.0; w]; h];
    for r in 0..h {
        for q in 0..w {
            let dot: f64 = (0..ch).map(|c| x[c][r][q] * env[c][r][q]).sum();
            let nx = (0..ch).map(|c| x[c][r][q].powi(2)).sum::<f64>().sqrt();
            let ne = (0..ch).map(|c| env[c][r][q].powi(2)).sum::<f64>().sqrt();
            let s = if nx < eps || ne < eps {
                0.0
            } else {
                (dot / (nx * ne)).clamp(-1.0, 1.0)
            };
            similarity[r][q] = s;
            mask[r][q] = (1.0 - s) / 2.0;
        }
    }
    let masked: Planes = (0..ch)
        .map(|c| (0..h).map(|r| (0..w).map(|q| x[c][r][q] * mask[r][q]).collect()).collect())
        .collect();
    let out: Planes = norm_w
        .iter()
        .zip(norm_b)
        .map(|(wrow, &b)| {
            (0..h)
                .map(|r| (0..w).map(|q| b + (0..ch).map(|c| wrow[c] * masked[c][r][q]).sum::<f64>()).collect())
                .collect()
        })
        .collect();
    ScalarContrast {
        gx,
        gy,
        env,
        similarity,
        mask,
        masked,
        out,
    }
}

/// Confusion counts of `pred > t` against `gt`, pixel by pixel.
pub fn count(pred: &[f64], gt: &[bool], t: f64) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p > t, g) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    (tp, fp, fn_, tn)
}

pub fn div0(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Precision, recall, FPR and F(β² = 0.3) from raw counts.
pub fn prf(pred: &[f64], gt: &[bool], t: f64) -> (f64, f64, f64, f64) {
    let (tp, fp, fn_, tn) = count(pred, gt, t);
    let p = div0(tp, tp + fp);
    let r = div0(tp, tp + fn_);
    let f = div0(1.3 * p * r, 0.3 * p + r);
    (p, r, div0(fp, fp + tn), f)
}

/// MAE, MaxFm and MeanFm of a set of maps, computed with plain loops.
pub fn scalar_fm_mae(pairs: &[(Vec<f64>, Vec<bool>)]) -> (f64, f64, f64) {
    let n = pairs.len() as f64;
    let mae = pairs
        .iter()
        .map(|(p, g)| p.iter().zip(g).map(|(&a, &b)| (a - b as u8 as f64).abs()).sum::<f64>() / p.len() as f64)
        .sum::<f64>()
        / n;
    let mut per_threshold = Vec::with_capacity(256);
    for i in 0..256 {
        let t = i as f64 / 255.0;
        per_threshold.push(pairs.iter().map(|(p, g)| prf(p, g, t).3).sum::<f64>() / n);
    }
    let max = per_threshold.iter().cloned().fold(f64::MIN, f64::max);
    let mean = per_threshold.iter().sum::<f64>() / 256.0;
    (mae, max, mean)
}

/// Enhanced-alignment score of `pred > t`, evaluated pixel by pixel.
pub fn scalar_em(pred: &[f64], gt: &[bool], t: f64) -> f64 {
    let n = pred.len() as f64;
    let fm: Vec<f64> = pred.iter().map(|&p| (p > t) as u8 as f64).collect();
    let g: Vec<f64> = gt.iter().map(|&b| b as u8 as f64).collect();
    let gt_sum: f64 = g.iter().sum();
    if gt_sum == 0.0 {
        return fm.iter().map(|v| 1.0 - v).sum::<f64>() / n;
    }
    if gt_sum == n {
        return fm.iter().sum::<f64>() / n;
    }
    let mu_f = fm.iter().sum::<f64>() / n;
    let mu_g = gt_sum / n;
    let mut acc = 0.0;
    for (f, g) in fm.iter().zip(&g) {
        let (a, b) = (f - mu_f, g - mu_g);
        let align = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
        acc += (align + 1.0).powi(2) / 4.0;
    }
    acc / n
}

fn region_ssim(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> f64 {
    let xs: Vec<f64> = pred.iter().flatten().copied().collect();
    let ys: Vec<f64> = gt.iter().flatten().copied().collect();
    let n = xs.len() as f64;
    if xs.is_empty() {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let d = if xs.len() > 1 { n - 1.0 } else { 1.0 };
    let vx = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / d;
    let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / d;
    let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / d;
    let a = 4.0 * mx * my * cxy;
    let b = (mx * mx + my * my) * (vx + vy);
    if a != 0.0 {
        a / (b + f64::EPSILON)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn object_term(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let s = if vals.len() > 1 {
        (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * m / (m * m + 1.0 + s + f64::EPSILON)
}

/// Structure measure on row-major `h × w` maps with the quadrant split at the
/// rounded foreground centroid.
pub fn scalar_sm(pred: &[f64], gt: &[bool], h: usize, w: usize, alpha: f64) -> f64 {
    let n = pred.len() as f64;
    let fg = gt.iter().filter(|&&b| b).count();
    let mean_p = pred.iter().sum::<f64>() / n;
    if fg == 0 {
        return (1.0 - mean_p).max(0.0);
    }
    if fg == gt.len() {
        return mean_p.max(0.0);
    }
    let u = fg as f64 / n;
    let on: Vec<f64> = (0..pred.len()).filter(|&i| gt[i]).map(|i| pred[i]).collect();
    let off: Vec<f64> = (0..pred.len()).filter(|&i| !gt[i]).map(|i| 1.0 - pred[i]).collect();
    let object = u * object_term(&on) + (1.0 - u) * object_term(&off);

    let (mut sr, mut sc) = (0.0, 0.0);
    for i in 0..gt.len() {
        if gt[i] {
            sr += (i / w) as f64;
            sc += (i % w) as f64;
        }
    }
    let y = ((sr / fg as f64).round_ties_even() as usize + 1).min(h);
    let x = ((sc / fg as f64).round_ties_even() as usize + 1).min(w);
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| {
        let p: Vec<Vec<f64>> = (r0..r1).map(|r| (c0..c1).map(|c| pred[r * w + c]).collect()).collect();
        let g: Vec<Vec<f64>> = (r0..r1).map(|r| (c0..c1).map(|c| gt[r * w + c] as u8 as f64).collect()).collect();
        region_ssim(&p, &g)
    };
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = ((w - x) * y) as f64 / area;
    let w3 = (x * (h - y)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let region = w1 * block(0, y, 0, x) + w2 * block(0, y, x, w) + w3 * block(y, h, 0, x) + w4 * block(y, h, x, w);
    (alpha * object + (1.0 - alpha) * region).max(0.0)
}
