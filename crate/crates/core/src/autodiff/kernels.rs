//! Slice-level compute kernels behind the tape ops.
//!
//! Convolution weights use the `(C_out, C_in / groups, k, k)` layout. Transposed
//! convolution reuses the convolution kernels with the roles of input and output
//! swapped.

use crate::scalar::Real;
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Output extent of a convolution along one axis, if positive.
pub fn conv_out_len(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Range of output columns `o` for which `o * stride + tap - padding` lands in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, tap: usize, stride: usize, padding: usize) -> (usize, usize) {
    // o*s + tap >= padding
    let lo = if tap >= padding {
        0
    } else {
        (padding - tap).div_ceil(stride)
    };
    // o*s + tap - padding <= len - 1
    let lim = len + padding;
    let hi = if tap >= lim {
        0
    } else {
        ((lim - 1 - tap) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// Per-call geometry of a grouped convolution, lowered to matrix products.
struct Lowering {
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
    groups: usize,
    cols: Vec<(usize, usize)>,
}

impl Lowering {
    fn new(xs: Shape, ws: Shape, ys: Shape, geo: ConvGeometry) -> Self {
        let [_, cin, h, wd] = xs;
        let [cout, cin_g, k, _] = ws;
        let [_, _, oh, ow] = ys;
        let (s, p) = (geo.stride, geo.padding);
        Self {
            cin,
            h,
            wd,
            cout,
            cin_g,
            cout_g: cout / geo.groups,
            k,
            s,
            p,
            oh,
            ow,
            groups: geo.groups,
            cols: (0..k).map(|kw| valid_range(ow, wd, kw, s, p)).collect(),
        }
    }

    /// Rows of the unfolded input: one per (input channel, kh, kw).
    fn rows(&self) -> usize {
        self.cin_g * self.k * self.k
    }

    fn len(&self) -> usize {
        self.oh * self.ow
    }

    /// The unfolded input is the input itself.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }

    fn x_block<'a, T>(&self, x: &'a [T], ni: usize, g: usize) -> &'a [T] {
        let plane = self.h * self.wd;
        &x[(ni * self.cin + g * self.cin_g) * plane..][..self.cin_g * plane]
    }

    fn y_range(&self, ni: usize, g: usize) -> std::ops::Range<usize> {
        let lo = (ni * self.cout + g * self.cout_g) * self.len();
        lo..lo + self.cout_g * self.len()
    }

    fn w_block<'a, T>(&self, w: &'a [T], g: usize) -> &'a [T] {
        &w[g * self.cout_g * self.rows()..][..self.cout_g * self.rows()]
    }

    /// Visit every in-bounds (column-matrix row segment, input row segment) pair.
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (k, s, p, l) = (self.k, self.s, self.p, self.len());
        for cl in 0..self.cin_g {
            for kh in 0..k {
                for kw in 0..k {
                    let r = (cl * k + kh) * k + kw;
                    let (lo, hi) = self.cols[kw];
                    if lo >= hi {
                        continue;
                    }
                    for orow in 0..self.oh {
                        let ih = orow * s + kh;
                        if ih < p || ih - p >= self.h {
                            continue;
                        }
                        let src = (cl * self.h + ih - p) * self.wd + lo * s + kw - p;
                        f(r * l + orow * self.ow + lo, src, hi - lo, s);
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, xb: &[T], col: &mut [T]) {
        col.fill(T::zero());
        self.for_each_segment(|dst, src, n, s| {
            let out = &mut col[dst..dst + n];
            if s == 1 {
                out.copy_from_slice(&xb[src..src + n]);
            } else {
                for (o, &v) in out.iter_mut().zip(xb[src..].iter().step_by(s)) {
                    *o = v;
                }
            }
        });
    }

    fn col2im<T: Real>(&self, col: &[T], xb: &mut [T]) {
        self.for_each_segment(|dst, src, n, s| {
            let seg = &col[dst..dst + n];
            if s == 1 {
                for (o, &v) in xb[src..src + n].iter_mut().zip(seg) {
                    *o += v;
                }
            } else {
                for (o, &v) in xb[src..].iter_mut().step_by(s).zip(seg) {
                    *o += v;
                }
            }
        });
    }
}

/// y = conv(x, w) + b.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    bias: Option<&[T]>,
    geo: ConvGeometry,
    ys: Shape,
) -> Vec<T> {
    let lw = Lowering::new(xs, ws, ys, geo);
    let (kr, l) = (lw.rows(), lw.len());
    let mut y = vec![T::zero(); xs[0] * lw.cout * l];
    if let Some(b) = bias {
        for (plane, &bv) in y.chunks_mut(l).zip(b.iter().cycle()) {
            plane.fill(bv);
        }
    }
    let mut col = vec![T::zero(); if lw.is_pointwise() { 0 } else { kr * l }];
    for ni in 0..xs[0] {
        for g in 0..lw.groups {
            let xb = lw.x_block(x, ni, g);
            let b = if lw.is_pointwise() {
                xb
            } else {
                lw.im2col(xb, &mut col);
                &col
            };
            let yr = lw.y_range(ni, g);
            T::gemm(
                [lw.cout_g, kr, l],
                (lw.w_block(w, g), [kr, 1]),
                (b, [l, 1]),
                T::one(),
                (&mut y[yr], [l, 1]),
            );
        }
    }
    y
}

/// Gradient of `conv2d_forward` with respect to its input, for upstream `dy`.
pub fn conv2d_backward_input<T: Real>(
    dy: &[T],
    ys: Shape,
    w: &[T],
    ws: Shape,
    geo: ConvGeometry,
    xs: Shape,
) -> Vec<T> {
    let lw = Lowering::new(xs, ws, ys, geo);
    let (kr, l) = (lw.rows(), lw.len());
    let plane = lw.h * lw.wd;
    let mut dx = vec![T::zero(); xs[0] * lw.cin * plane];
    let mut col = vec![T::zero(); kr * l];
    for ni in 0..xs[0] {
        for g in 0..lw.groups {
            let dyb = &dy[lw.y_range(ni, g)];
            let xlo = (ni * lw.cin + g * lw.cin_g) * plane;
            let dxb = &mut dx[xlo..xlo + lw.cin_g * plane];
            let target: &mut [T] = if lw.is_pointwise() { dxb } else { &mut col };
            T::gemm(
                [kr, lw.cout_g, l],
                (lw.w_block(w, g), [1, kr]),
                (dyb, [l, 1]),
                T::zero(),
                (target, [l, 1]),
            );
            if !lw.is_pointwise() {
                lw.col2im(&col, &mut dx[xlo..xlo + lw.cin_g * plane]);
            }
        }
    }
    dx
}

/// Gradient of `conv2d_forward` with respect to its weight.
pub fn conv2d_backward_weight<T: Real>(
    x: &[T],
    xs: Shape,
    dy: &[T],
    ys: Shape,
    ws: Shape,
    geo: ConvGeometry,
) -> Vec<T> {
    let lw = Lowering::new(xs, ws, ys, geo);
    let (kr, l) = (lw.rows(), lw.len());
    let mut dw = vec![T::zero(); lw.cout * kr];
    let mut col = vec![T::zero(); if lw.is_pointwise() { 0 } else { kr * l }];
    for ni in 0..xs[0] {
        for g in 0..lw.groups {
            let xb = lw.x_block(x, ni, g);
            let b = if lw.is_pointwise() {
                xb
            } else {
                lw.im2col(xb, &mut col);
                &col
            };
            let dwb = &mut dw[g * lw.cout_g * kr..][..lw.cout_g * kr];
            T::gemm(
                [lw.cout_g, l, kr],
                (&dy[lw.y_range(ni, g)], [l, 1]),
                (b, [1, l]),
                T::one(),
                (dwb, [kr, 1]),
            );
        }
    }
    dw
}

/// Per-channel sum of `dy` over batch and space.
pub fn channel_sums<T: Real>(dy: &[T], ys: Shape) -> Vec<T> {
    let [n, c, h, w] = ys;
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += dy[(ni * c + ci) * h * w..][..h * w].iter().copied().sum::<T>();
        }
    }
    out
}

/// Interpolation taps for one axis under the align-corners convention.
#[derive(Debug, Clone, Copy)]
pub struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

pub fn align_corner_taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    (0..output)
        .map(|o| {
            if output == 1 || input == 1 {
                return Tap {
                    lo: 0,
                    hi: 0,
                    frac: T::zero(),
                };
            }
            // exact rational position o·(in−1)/(out−1)
            let num = o * (input - 1);
            let den = output - 1;
            let lo = num / den;
            let rem = num % den;
            let hi = if rem == 0 { lo } else { lo + 1 };
            Tap {
                lo,
                hi,
                frac: T::c(rem as f64) / T::c(den as f64),
            }
        })
        .collect()
}

pub fn bilinear_forward<T: Real>(x: &[T], xs: Shape, oh: usize, ow: usize) -> Vec<T> {
    let [n, c, h, w] = xs;
    let rows = align_corner_taps::<T>(h, oh);
    let cols = align_corner_taps::<T>(w, ow);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks(h * w).take(n * c) {
        for r in &rows {
            let top = &plane[r.lo * w..][..w];
            let bot = &plane[r.hi * w..][..w];
            for q in &cols {
                let t = top[q.lo] + (top[q.hi] - top[q.lo]) * q.frac;
                let b = bot[q.lo] + (bot[q.hi] - bot[q.lo]) * q.frac;
                y.push(t + (b - t) * r.frac);
            }
        }
    }
    y
}

pub fn bilinear_backward<T: Real>(dy: &[T], xs: Shape, oh: usize, ow: usize) -> Vec<T> {
    let [n, c, h, w] = xs;
    let rows = align_corner_taps::<T>(h, oh);
    let cols = align_corner_taps::<T>(w, ow);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, gplane) in dx.chunks_mut(h * w).zip(dy.chunks(oh * ow)) {
        for (r, grow) in rows.iter().zip(gplane.chunks(ow)) {
            let (wt, wb) = (T::one() - r.frac, r.frac);
            for (q, &g) in cols.iter().zip(grow) {
                let (wl, wr) = (T::one() - q.frac, q.frac);
                plane[r.lo * w + q.lo] += g * wt * wl;
                plane[r.lo * w + q.hi] += g * wt * wr;
                plane[r.hi * w + q.lo] += g * wb * wl;
                plane[r.hi * w + q.hi] += g * wb * wr;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_len_formula() {
        assert_eq!(conv_out_len(8, 3, 1, 1), Some(8));
        assert_eq!(conv_out_len(8, 3, 2, 1), Some(4));
        assert_eq!(conv_out_len(2, 5, 1, 0), None);
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for len in 1..7 {
            for stride in 1..4 {
                for padding in 0..3 {
                    for tap in 0..4 {
                        let Some(out) = conv_out_len(len, 4.max(tap + 1), stride, padding) else {
                            continue;
                        };
                        let (lo, hi) = valid_range(out, len, tap, stride, padding);
                        let brute: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let pos = (o * stride + tap) as isize - padding as isize;
                                pos >= 0 && (pos as usize) < len
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "len={len} s={stride} p={padding} tap={tap}");
                    }
                }
            }
        }
    }

    #[test]
    fn align_corner_endpoints_exact() {
        let taps = align_corner_taps::<f64>(5, 9);
        assert_eq!(taps[0].lo, 0);
        assert_eq!(taps[0].frac, 0.0);
        assert_eq!(taps[8].lo, 4);
        assert_eq!(taps[8].frac, 0.0);
        assert_eq!(taps[1].lo, 0);
        assert_eq!(taps[1].frac, 0.5);
    }
}
