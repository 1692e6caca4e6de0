//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its output value and the handles of its
//! inputs. [`Tape::backward`] walks the nodes in exact reverse order of
//! execution and hands each differentiable input its contribution once.
//! Parameter leaves deposit their gradient into the owning [`ParamStore`],
//! honoring freeze flags and learnability masks.

use super::kernels::{self, ConvGeometry};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Statistics source for [`Tape::batch_norm`].
#[derive(Debug, Clone)]
pub enum NormStats<'a, T> {
    /// Normalize by the statistics of the batch itself.
    Batch,
    /// Normalize by fixed (running) statistics.
    Fixed { mean: &'a [T], var: &'a [T] },
}

/// Output of [`Tape::batch_norm`]; batch statistics are returned so the caller
/// can fold them into running estimates.
#[derive(Debug, Clone)]
pub struct NormOutput<T> {
    pub out: Var,
    pub batch_mean: Option<Vec<T>>,
    pub batch_var_unbiased: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geo: ConvGeometry,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    Resize {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Cosine {
        a: Var,
        b: Var,
        eps: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulChannels {
        x: Var,
        m: Var,
    },
    Square {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Bce {
        pred: Var,
        target: Tensor<T>,
        eps: T,
        scale: T,
    },
    WeightedSum {
        xs: Vec<Var>,
        weights: Vec<T>,
    },
    Dot {
        x: Var,
        w: Tensor<T>,
    },
    GlobalAvgPool {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of non-parameter leaves after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn check_same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Which side of every piecewise boundary each recorded value lies on:
    /// PReLU inputs below zero, clamped BCE predictions, degenerate or clamped
    /// cosine sites. Equal patterns mean two evaluations share one smooth piece.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Prelu { x, .. } => out.extend(self.value(*x).data().iter().map(|&v| v < T::zero())),
                Op::Bce { pred, eps, .. } => {
                    let hi = T::one() - *eps;
                    for &f in self.value(*pred).data() {
                        out.push(f < *eps);
                        out.push(f > hi);
                    }
                }
                Op::Cosine { a, b, eps } => {
                    let [n, c, h, w] = self.shape(*a);
                    let hw = h * w;
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let eps2 = *eps * *eps;
                    for ni in 0..n {
                        let (mut na, mut nb) = (vec![T::zero(); hw], vec![T::zero(); hw]);
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            for site in 0..hw {
                                na[site] += av[off + site] * av[off + site];
                                nb[site] += bv[off + site] * bv[off + site];
                            }
                        }
                        for site in 0..hw {
                            out.push(na[site] < eps2 || nb[site] < eps2);
                            out.push(node.value.data()[ni * hw + site].abs() >= T::one());
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable non-parameter input; its gradient is returned by backward.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Record a parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), !p.frozen)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if groups == 0 || xs[1] % groups != 0 || ws[0] % groups != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("groups {groups} incompatible with {xs:?} / {ws:?}"),
            ));
        }
        if xs[1] / groups != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", xs[1], ws[1] * groups),
            ));
        }
        if ws[2] != ws[3] || stride == 0 {
            return Err(Error::invalid("conv2d", "square kernel and positive stride required"));
        }
        let k = ws[2];
        let (Some(oh), Some(ow)) = (
            kernels::conv_out_len(xs[2], k, stride, padding),
            kernels::conv_out_len(xs[3], k, stride, padding),
        ) else {
            return Err(Error::invalid(
                "conv2d",
                format!("non-positive output size for input {xs:?}, kernel {k}"),
            ));
        };
        if let Some(b) = b {
            if self.value(b).numel() != ws[0] {
                return Err(Error::shape("conv2d", "bias length must equal output channels"));
            }
        }
        let ys = [xs[0], ws[0], oh, ow];
        let geo = ConvGeometry {
            stride,
            padding,
            groups,
        };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            xs,
            self.value(w).data(),
            ws,
            b.map(|b| self.value(b).data()),
            geo,
            ys,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::from_vec(ys, y)?, Op::Conv2d { x, w, b, geo }, rg))
    }

    /// Transposed convolution with weight layout `(C_in, C_out, k, k)`; output
    /// extent `(in − 1)·stride − 2·padding + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs[1] != ws[0] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {} channels, weight expects {}", xs[1], ws[0]),
            ));
        }
        if stride == 0 || ws[2] != ws[3] {
            return Err(Error::invalid("conv_transpose2d", "square kernel and positive stride required"));
        }
        let k = ws[2];
        let out = |len: usize| ((len - 1) * stride + k).checked_sub(2 * padding).filter(|&o| o > 0);
        let (Some(oh), Some(ow)) = (out(xs[2]), out(xs[3])) else {
            return Err(Error::invalid("conv_transpose2d", "non-positive output size"));
        };
        let ys = [xs[0], ws[1], oh, ow];
        let geo = ConvGeometry {
            stride,
            padding,
            groups: 1,
        };
        let y = kernels::conv2d_backward_input(self.value(x).data(), xs, self.value(w).data(), ws, geo, ys);
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::from_vec(ys, y)?, Op::ConvTranspose2d { x, w, geo }, rg))
    }

    /// Parametric ReLU with a scalar or per-channel slope.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ns = self.value(slope).numel();
        if ns != 1 && ns != xs[1] {
            return Err(Error::shape("prelu", format!("{ns} slopes for {} channels", xs[1])));
        }
        let a = self.value(slope).data().to_vec();
        let hw = xs[2] * xs[3];
        let mut y = self.value(x).clone();
        for (i, plane) in y.data_mut().chunks_mut(hw).enumerate() {
            let s = a[if ns == 1 { 0 } else { i % xs[1] }];
            for v in plane {
                if *v < T::zero() {
                    *v *= s;
                }
            }
        }
        let rg = self.rg(&[x, slope]);
        Ok(self.push(y, Op::Prelu { x, slope }, rg))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<NormOutput<T>> {
        let [n, c, h, w] = self.shape(x);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm", "affine parameters must have one entry per channel"));
        }
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x);
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut s = T::zero();
                    for ni in 0..n {
                        s += xv.plane(ni, ci).iter().copied().sum::<T>();
                    }
                    let mu = s / T::c(m as f64);
                    let mut ss = T::zero();
                    for ni in 0..n {
                        ss += xv.plane(ni, ci).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                    mean[ci] = mu;
                    var[ci] = ss / T::c(m as f64);
                }
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut y = xv.clone();
        for (i, plane) in y.data_mut().chunks_mut(hw).enumerate() {
            let ci = i % c;
            let (mu, is, gc, bc) = (mean[ci], inv_std[ci], g[ci], b[ci]);
            for v in plane {
                *v = (*v - mu) * is * gc + bc;
            }
        }
        let (batch_mean, batch_var_unbiased) = if batch {
            let corr = if m > 1 {
                T::c(m as f64) / T::c((m - 1) as f64)
            } else {
                T::one()
            };
            (Some(mean.clone()), Some(var.iter().map(|&v| v * corr).collect()))
        } else {
            (None, None)
        };
        let rg = self.rg(&[x, gamma, beta]);
        let out = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch,
            },
            rg,
        );
        Ok(NormOutput {
            out,
            batch_mean,
            batch_var_unbiased,
        })
    }

    /// Bilinear resampling with aligned corners.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "target size must be positive"));
        }
        let xs = self.shape(x);
        let y = kernels::bilinear_forward(self.value(x).data(), xs, out_h, out_w);
        let rg = self.rg(&[x]);
        let ys = [xs[0], xs[1], out_h, out_w];
        Ok(self.push(Tensor::from_vec(ys, y)?, Op::Resize { x }, rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let [n, _, h, w] = self.shape(first);
        for &v in xs {
            let s = self.shape(v);
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", s, self.shape(first)),
                ));
            }
        }
        let c: usize = xs.iter().map(|&v| self.shape(v)[1]).sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c * hw);
        for ni in 0..n {
            for &v in xs {
                let t = self.value(v);
                let per = t.c() * hw;
                data.extend_from_slice(&t.data()[ni * per..(ni + 1) * per]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::from_vec([n, c, h, w], data)?, Op::Concat { xs: xs.to_vec() }, rg))
    }

    /// Cosine similarity along channels at each site; `0` where either vector
    /// has norm below `eps`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let s = self.shape(a);
        check_same_shape("cosine_similarity", s, self.shape(b))?;
        let [n, c, h, w] = s;
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut y = vec![T::zero(); n * hw];
        for ni in 0..n {
            for p in 0..hw {
                let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
                for ci in 0..c {
                    let i = (ni * c + ci) * hw + p;
                    dot += av[i] * bv[i];
                    na += av[i] * av[i];
                    nb += bv[i] * bv[i];
                }
                let (na, nb) = (na.sqrt(), nb.sqrt());
                if na >= eps && nb >= eps {
                    y[ni * hw + p] = (dot / (na * nb)).max(-T::one()).min(T::one());
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec([n, 1, h, w], y)?, Op::Cosine { a, b, eps }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("add", self.shape(a), self.shape(b))?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mul", self.shape(a), self.shape(b))?;
        let mut y = self.value(a).clone();
        for (v, &o) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= o;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    /// `x ⊙ m` with a single-channel `m` broadcast over the channels of `x`.
    pub fn mul_channels(&mut self, x: Var, m: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        check_same_shape("mul_channels", [n, 1, h, w], self.shape(m))?;
        let hw = h * w;
        let mv = self.value(m).data().to_vec();
        let mut y = self.value(x).clone();
        for (i, plane) in y.data_mut().chunks_mut(hw).enumerate() {
            let mp = &mv[(i / c) * hw..][..hw];
            for (v, &s) in plane.iter_mut().zip(mp) {
                *v *= s;
            }
        }
        let rg = self.rg(&[x, m]);
        Ok(self.push(y, Op::MulChannels { x, m }, rg))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(y, Op::Square { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(y, Op::Sigmoid { x }, rg)
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let y = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(y, Op::Affine { x, scale }, rg)
    }

    /// Binary cross-entropy of probabilities against a fixed target, summed over
    /// pixels and averaged over the batch; divided by `H·W` when `mean_pixels`.
    /// Predictions are clamped to `[eps, 1 − eps]` before the logarithms.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>, eps: T, mean_pixels: bool) -> Result<Var> {
        let s = self.shape(pred);
        check_same_shape("bce", s, target.shape())?;
        let mut scale = T::one() / T::c(s[0] as f64);
        if mean_pixels {
            scale /= T::c((s[1] * s[2] * s[3]) as f64);
        }
        let hi = T::one() - eps;
        let total: T = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&f, &g)| {
                let f = f.max(eps).min(hi);
                -(g * f.ln() + (T::one() - g) * (T::one() - f).ln())
            })
            .sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::Bce {
                pred,
                target: target.clone(),
                eps,
                scale,
            },
            rg,
        ))
    }

    /// `Σ wᵢ·xᵢ` over scalar vars.
    pub fn weighted_sum(&mut self, xs: &[Var], weights: &[T]) -> Result<Var> {
        if xs.len() != weights.len() {
            return Err(Error::invalid("weighted_sum", "one weight per term"));
        }
        let mut total = T::zero();
        for (&v, &w) in xs.iter().zip(weights) {
            if self.value(v).numel() != 1 {
                return Err(Error::shape("weighted_sum", "terms must be scalars"));
            }
            total += w * self.value(v).item();
        }
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                xs: xs.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ x ⊙ w` for a fixed tensor `w`.
    pub fn dot(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        check_same_shape("dot", self.shape(x), w.shape())?;
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Dot { x, w: w.clone() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let w = Tensor::full(self.shape(x), T::one());
        self.dot(x, &w).expect("same shape")
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let inv = T::one() / T::c((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_vec([n, c, 1, 1], data).expect("pooled shape"),
            Op::GlobalAvgPool { x },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `(N, K, 1, 1)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k, h, w] = self.shape(logits);
        if h != 1 || w != 1 || labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape("cross_entropy", "expected (N,K,1,1) logits and N labels < K"));
        }
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for (row, &l) in lv.chunks(k).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            total += lse - row[l];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / T::c(n as f64)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Propagate from the scalar `loss`. Parameter gradients accumulate into
    /// `store`; gradients of [`Tape::leaf`] inputs are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls != [1, 1, 1, 1] {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[idx].take() {
                        store.get_mut(*id).accumulate_grad(&g);
                    }
                    continue;
                }
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!("handled by caller"),
            Op::Conv2d { x, w, b, geo } => {
                let (xs, ws, ys) = (self.shape(*x), self.shape(*w), g.shape());
                if want(*x) {
                    let dx = kernels::conv2d_backward_input(gd, ys, self.value(*w).data(), ws, *geo, xs);
                    acc(*x, Tensor::from_vec(xs, dx).expect("shape"));
                }
                if want(*w) {
                    let dw = kernels::conv2d_backward_weight(self.value(*x).data(), xs, gd, ys, ws, *geo);
                    acc(*w, Tensor::from_vec(ws, dw).expect("shape"));
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let db = kernels::channel_sums(gd, ys);
                    acc(b, Tensor::from_vec(self.shape(b), db).expect("shape"));
                }
            }
            Op::ConvTranspose2d { x, w, geo } => {
                // forward was the input-gradient of conv2d(·, w); invert the roles
                let (xs, ws, ys) = (self.shape(*x), self.shape(*w), g.shape());
                if want(*x) {
                    let dx = kernels::conv2d_forward(gd, ys, self.value(*w).data(), ws, None, *geo, xs);
                    acc(*x, Tensor::from_vec(xs, dx).expect("shape"));
                }
                if want(*w) {
                    let dw = kernels::conv2d_backward_weight(gd, ys, self.value(*x).data(), xs, ws, *geo);
                    acc(*w, Tensor::from_vec(ws, dw).expect("shape"));
                }
            }
            Op::Prelu { x, slope } => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let a = self.value(*slope).data();
                let ns = a.len();
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut da = vec![T::zero(); ns];
                for (i, ((dxp, xp), gp)) in dx.chunks_mut(hw).zip(xv.chunks(hw)).zip(gd.chunks(hw)).enumerate() {
                    let ai = if ns == 1 { 0 } else { i % xs[1] };
                    let s = a[ai];
                    let mut acc_a = T::zero();
                    for ((d, &xv), &gv) in dxp.iter_mut().zip(xp).zip(gp) {
                        if xv < T::zero() {
                            *d = s * gv;
                            acc_a += xv * gv;
                        } else {
                            *d = gv;
                        }
                    }
                    da[ai] += acc_a;
                }
                if want(*x) {
                    acc(*x, Tensor::from_vec(xs, dx).expect("shape"));
                }
                if want(*slope) {
                    acc(*slope, Tensor::from_vec(self.shape(*slope), da).expect("shape"));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch,
            } => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let m = T::c((n * hw) as f64);
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let o = (ni * c + ci) * hw;
                        for p in o..o + hw {
                            let xh = (xv[p] - mean[ci]) * inv_std[ci];
                            dgamma[ci] += gd[p] * xh;
                            dbeta[ci] += gd[p];
                        }
                    }
                }
                if want(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let o = (ni * c + ci) * hw;
                            let k = gam[ci] * inv_std[ci];
                            for p in o..o + hw {
                                dx[p] = if *batch {
                                    let xh = (xv[p] - mean[ci]) * inv_std[ci];
                                    k * (gd[p] - dbeta[ci] / m - xh * dgamma[ci] / m)
                                } else {
                                    k * gd[p]
                                };
                            }
                        }
                    }
                    acc(*x, Tensor::from_vec([n, c, h, w], dx).expect("shape"));
                }
                if want(*gamma) {
                    acc(*gamma, Tensor::from_vec(self.shape(*gamma), dgamma).expect("shape"));
                }
                if want(*beta) {
                    acc(*beta, Tensor::from_vec(self.shape(*beta), dbeta).expect("shape"));
                }
            }
            Op::Resize { x } => {
                let xs = self.shape(*x);
                let [_, _, oh, ow] = g.shape();
                let dx = kernels::bilinear_backward(gd, xs, oh, ow);
                acc(*x, Tensor::from_vec(xs, dx).expect("shape"));
            }
            Op::Concat { xs } => {
                let [n, _, h, w] = g.shape();
                let hw = h * w;
                let total_c = g.c();
                let mut c_off = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if want(v) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for ni in 0..n {
                            let start = (ni * total_c + c_off) * hw;
                            d.extend_from_slice(&gd[start..start + c * hw]);
                        }
                        acc(v, Tensor::from_vec([n, c, h, w], d).expect("shape"));
                    }
                    c_off += c;
                }
            }
            Op::Cosine { a, b, eps } => {
                let s = self.shape(*a);
                let [n, c, h, w] = s;
                let hw = h * w;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for ni in 0..n {
                    for p in 0..hw {
                        let (mut dot, mut na2, mut nb2) = (T::zero(), T::zero(), T::zero());
                        for ci in 0..c {
                            let i = (ni * c + ci) * hw + p;
                            dot += av[i] * bv[i];
                            na2 += av[i] * av[i];
                            nb2 += bv[i] * bv[i];
                        }
                        let (na, nb) = (na2.sqrt(), nb2.sqrt());
                        if na < *eps || nb < *eps {
                            continue;
                        }
                        let gs = gd[ni * hw + p];
                        let inv = T::one() / (na * nb);
                        let cos = dot * inv;
                        for ci in 0..c {
                            let i = (ni * c + ci) * hw + p;
                            da[i] = gs * (bv[i] * inv - cos * av[i] / na2);
                            db[i] = gs * (av[i] * inv - cos * bv[i] / nb2);
                        }
                    }
                }
                if want(*a) {
                    acc(*a, Tensor::from_vec(s, da).expect("shape"));
                }
                if want(*b) {
                    acc(*b, Tensor::from_vec(s, db).expect("shape"));
                }
            }
            Op::Add { a, b } => {
                if want(*a) {
                    acc(*a, g.clone());
                }
                if want(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&g, &o)| g * o).collect();
                    acc(*a, Tensor::from_vec(g.shape(), d).expect("shape"));
                }
                if want(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&g, &o)| g * o).collect();
                    acc(*b, Tensor::from_vec(g.shape(), d).expect("shape"));
                }
            }
            Op::MulChannels { x, m } => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let (xv, mv) = (self.value(*x).data(), self.value(*m).data());
                if want(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for (i, (dp, gp)) in dx.chunks_mut(hw).zip(gd.chunks(hw)).enumerate() {
                        let mp = &mv[(i / c) * hw..][..hw];
                        for ((d, &gv), &s) in dp.iter_mut().zip(gp).zip(mp) {
                            *d = gv * s;
                        }
                    }
                    acc(*x, Tensor::from_vec([n, c, h, w], dx).expect("shape"));
                }
                if want(*m) {
                    let mut dm = vec![T::zero(); n * hw];
                    for (i, (xp, gp)) in xv.chunks(hw).zip(gd.chunks(hw)).enumerate() {
                        let dp = &mut dm[(i / c) * hw..][..hw];
                        for ((d, &xv), &gv) in dp.iter_mut().zip(xp).zip(gp) {
                            *d += xv * gv;
                        }
                    }
                    acc(*m, Tensor::from_vec([n, 1, h, w], dm).expect("shape"));
                }
            }
            Op::Square { x } => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * (v + v))
                    .collect();
                acc(*x, Tensor::from_vec(g.shape(), d).expect("shape"));
            }
            Op::Sigmoid { x: xin } => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                acc(*xin, Tensor::from_vec(g.shape(), d).expect("shape"));
            }
            Op::Affine { x, scale } => {
                acc(*x, g.map(|v| v * *scale));
            }
            Op::Bce {
                pred,
                target,
                eps,
                scale,
            } => {
                let up = g.item() * *scale;
                let hi = T::one() - *eps;
                let d = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&f, &t)| {
                        if f > *eps && f < hi {
                            up * ((T::one() - t) / (T::one() - f) - t / f)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(*pred, Tensor::from_vec(target.shape(), d).expect("shape"));
            }
            Op::WeightedSum { xs, weights } => {
                let up = g.item();
                for (&v, &w) in xs.iter().zip(weights) {
                    if want(v) {
                        acc(v, Tensor::scalar(up * w));
                    }
                }
            }
            Op::Dot { x, w } => {
                let up = g.item();
                acc(*x, w.map(|v| v * up));
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::c(hw as f64);
                let mut d = Vec::with_capacity(xs.iter().product());
                for &gv in gd {
                    d.extend(std::iter::repeat_n(gv * inv, hw));
                }
                acc(*x, Tensor::from_vec(xs, d).expect("shape"));
            }
            Op::CrossEntropy { logits, labels } => {
                let s = self.shape(*logits);
                let k = s[1];
                let scale = g.item() / T::c(labels.len() as f64);
                let mut d = Vec::with_capacity(s[0] * k);
                for (row, &l) in self.value(*logits).data().chunks(k).zip(labels) {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v - mx).exp() / z;
                        let y = if j == l { T::one() } else { T::zero() };
                        d.push(scale * (p - y));
                    }
                }
                acc(*logits, Tensor::from_vec(s, d).expect("shape"));
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
