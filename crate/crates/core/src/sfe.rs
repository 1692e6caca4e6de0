//! Saliency feature extraction: cross-scale assembly followed by cascaded
//! contrast operators.
//!
//! A contrast operator runs two semi-learned depthwise 3×3 kernels over its
//! input, forms the square-sum environment map `E = Gx² + Gy²`, compares input
//! and environment by channel-wise cosine similarity `s`, and reweights the input
//! by `m = (1 − s)/2` before a 1×1 channel-normalizing conv.

use crate::autodiff::{ParamId, ParamStore, Parameter, Tape, Var};
use crate::backbone::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const PREFIX: &str = "sfe.";
pub const COS_EPS: f64 = 1e-8;

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SfeConfig {
    /// Number of cascaded operators per scale.
    pub order: usize,
    /// Output channels per scale.
    pub channels: [usize; LEVELS],
}

impl SfeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "saliency extraction needs order ≥ 1 and positive channels, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Which kernel of the operator: X zeros its middle column, Y its middle row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn is_fixed(self, r: usize, c: usize) -> bool {
        match self {
            Axis::X => c == 1,
            Axis::Y => r == 1,
        }
    }

    fn sobel(self) -> [[f64; 3]; 3] {
        match self {
            Axis::X => SOBEL_X,
            Axis::Y => SOBEL_Y,
        }
    }
}

/// Depthwise `(C,1,3,3)` Sobel-initialized kernel with its fixed line masked out.
pub fn semi_learned_kernel<T: Real>(name: impl Into<String>, channels: usize, axis: Axis) -> Parameter<T> {
    let k = axis.sobel();
    let value = Tensor::from_fn([channels, 1, 3, 3], |[_, _, r, c]| T::c(k[r][c]));
    let mask = (0..channels * 9).map(|i| !axis.is_fixed((i % 9) / 3, i % 3)).collect();
    Parameter::new(name, value).with_mask(mask)
}

/// Intermediate maps of one contrast-operator pass.
#[derive(Debug, Clone, Copy)]
pub struct ContrastTrace {
    pub gx: Var,
    pub gy: Var,
    pub env: Var,
    pub similarity: Var,
    pub mask: Var,
    pub masked: Var,
    pub out: Var,
}

#[derive(Debug, Clone)]
pub struct ContrastOperator {
    pub kx: ParamId,
    pub ky: ParamId,
    pub norm: Conv2d,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ContrastOperator {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let kx = store.add(semi_learned_kernel(format!("{name}.kx"), in_channels, Axis::X));
        let ky = store.add(semi_learned_kernel(format!("{name}.ky"), in_channels, Axis::Y));
        let norm = Conv2d::new(store, init, &format!("{name}.norm"), in_channels, out_channels, 1, 1, 0, true);
        Self {
            kx,
            ky,
            norm,
            in_channels,
            out_channels,
        }
    }

    pub fn trace<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<ContrastTrace> {
        let c = ctx.tape.shape(x)[1];
        if c != self.in_channels {
            return Err(Error::shape(
                "contrast_operator_forward",
                format!("expected {} channels, got {c}", self.in_channels),
            ));
        }
        let kx = ctx.param(self.kx);
        let ky = ctx.param(self.ky);
        let gx = ctx.tape.conv2d(x, kx, None, 1, 1, c)?;
        let gy = ctx.tape.conv2d(x, ky, None, 1, 1, c)?;
        let gx2 = ctx.tape.square(gx);
        let gy2 = ctx.tape.square(gy);
        let env = ctx.tape.add(gx2, gy2)?;
        let similarity = ctx.tape.cosine_similarity(x, env, T::c(COS_EPS))?;
        let half = T::c(0.5);
        let mask = ctx.tape.affine(similarity, -half, half);
        let masked = ctx.tape.mul_channels(x, mask)?;
        let out = self.norm.forward(ctx, masked)?;
        Ok(ContrastTrace {
            gx,
            gy,
            env,
            similarity,
            mask,
            masked,
            out,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.trace(ctx, x)?.out)
    }
}

/// `cat(down(f^{i−1}), f^i, up(f^{i+1}))` at the resolution of level `i`
/// (0-based), dropping the neighbor that does not exist.
pub fn cross_scale_assemble<T: Real>(tape: &mut Tape<T>, pyramid: &[Var; LEVELS], i: usize) -> Result<Var> {
    if i >= LEVELS {
        return Err(Error::invalid("cross_scale_assemble", format!("scale {} out of range", i + 1)));
    }
    let [_, _, h, w] = tape.shape(pyramid[i]);
    let mut parts = Vec::with_capacity(3);
    if i > 0 {
        parts.push(tape.resize(pyramid[i - 1], h, w)?);
    }
    parts.push(pyramid[i]);
    if i + 1 < LEVELS {
        parts.push(tape.resize(pyramid[i + 1], h, w)?);
    }
    tape.concat_channels(&parts)
}

/// Input channels of the operator at scale `i` given per-scale input channels.
pub fn assembled_channels(channels: &[usize; LEVELS], i: usize) -> usize {
    let lo = i.saturating_sub(1);
    let hi = (i + 1).min(LEVELS - 1);
    channels[lo..=hi].iter().sum()
}

#[derive(Debug, Clone)]
pub struct SfeStage {
    pub config: SfeConfig,
    /// `operators[k][i]`: order `k + 1`, scale `i + 1`.
    pub operators: Vec<Vec<ContrastOperator>>,
}

impl SfeStage {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        config: &SfeConfig,
        input_channels: [usize; LEVELS],
    ) -> Result<Self> {
        config.validate()?;
        let mut operators = Vec::with_capacity(config.order);
        let mut current = input_channels;
        for k in 0..config.order {
            let row = (0..LEVELS)
                .map(|i| {
                    ContrastOperator::new(
                        store,
                        init,
                        &format!("{PREFIX}order{}.scale{}", k + 1, i + 1),
                        assembled_channels(&current, i),
                        config.channels[i],
                    )
                })
                .collect();
            operators.push(row);
            current = config.channels;
        }
        Ok(Self {
            config: config.clone(),
            operators,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, pre: &FeaturePyramid) -> Result<FeaturePyramid> {
        let mut current = pre.0;
        for row in &self.operators {
            let mut next = current;
            for (i, op) in row.iter().enumerate() {
                let x = cross_scale_assemble(ctx.tape, &current, i)?;
                next[i] = op.forward(ctx, x)?;
            }
            current = next;
        }
        Ok(FeaturePyramid(current))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_has_six_learnable_entries_per_channel() {
        for axis in [Axis::X, Axis::Y] {
            let p = semi_learned_kernel::<f64>("k", 3, axis);
            assert_eq!(p.learnable_count(), 18);
            for ch in 0..3 {
                for r in 0..3 {
                    for c in 0..3 {
                        let v = p.value.at([ch, 0, r, c]);
                        if axis.is_fixed(r, c) {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn assembled_channel_arithmetic() {
        let ch = [8, 16, 32, 64, 128];
        assert_eq!(assembled_channels(&ch, 0), 24);
        assert_eq!(assembled_channels(&ch, 2), 16 + 32 + 64);
        assert_eq!(assembled_channels(&ch, 4), 64 + 128);
    }

    #[test]
    fn zero_order_rejected() {
        let cfg = SfeConfig {
            order: 0,
            channels: [4; LEVELS],
        };
        assert!(cfg.validate().is_err());
    }
}
