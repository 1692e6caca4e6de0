//! Feature aggregation: one prediction head per scale, upsampled to input
//! resolution, and a 1×1 fusion over the five side logits.

use crate::autodiff::{ParamStore, Var};
use crate::backbone::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Init, PRelu};
use crate::scalar::Real;

pub const PREFIX: &str = "fa.";

/// `conv 1×1 → BN → PReLU` down to one channel, then bilinear upsampling.
#[derive(Debug, Clone)]
pub struct FaHead {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: PRelu,
    pub in_channels: usize,
}

impl FaHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, level: usize, in_channels: usize) -> Self {
        let name = format!("{PREFIX}head{level}");
        Self {
            conv: Conv2d::new(store, init, &format!("{name}.conv"), in_channels, 1, 1, 1, 0, false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), 1),
            act: PRelu::new(store, &format!("{name}.act"), 1),
            in_channels,
        }
    }

    /// Pre-sigmoid logits at `factor ×` the resolution of `f`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var, factor: usize) -> Result<Var> {
        let [_, c, h, w] = ctx.tape.shape(f);
        if c != self.in_channels {
            return Err(Error::shape(
                "fa_branch_forward",
                format!("expected {} channels, got {c}", self.in_channels),
            ));
        }
        if factor == 0 {
            return Err(Error::invalid("fa_branch_forward", "upsampling factor must be positive"));
        }
        let mut y = self.conv.forward(ctx, f)?;
        let mode = ctx.mode;
        y = self.bn.forward(ctx, y, mode)?;
        y = self.act.forward(ctx, y)?;
        if factor > 1 {
            y = ctx.tape.resize(y, h * factor, w * factor)?;
        }
        Ok(y)
    }
}

/// The six supervised outputs, as logits and as probabilities.
#[derive(Debug, Clone, Copy)]
pub struct SaliencyOutputs {
    pub side_logits: [Var; LEVELS],
    pub fused_logit: Var,
    pub sides: [Var; LEVELS],
    pub fused: Var,
}

impl SaliencyOutputs {
    /// Side outputs first, fused last.
    pub fn all(&self) -> [Var; LEVELS + 1] {
        std::array::from_fn(|i| if i < LEVELS { self.sides[i] } else { self.fused })
    }
}

#[derive(Debug, Clone)]
pub struct FaStage {
    pub heads: Vec<FaHead>,
    pub fuse: Conv2d,
}

impl FaStage {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, channels: [usize; LEVELS]) -> Self {
        let heads = (0..LEVELS).map(|i| FaHead::new(store, init, i + 1, channels[i])).collect();
        let fuse = Conv2d::new(store, init, &format!("{PREFIX}fuse"), LEVELS, 1, 1, 1, 0, true);
        Self { heads, fuse }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, sal: &FeaturePyramid) -> Result<SaliencyOutputs> {
        let [_, _, h, w] = ctx.tape.shape(sal.level(0));
        let mut side_logits = [sal.level(0); LEVELS];
        for (i, head) in self.heads.iter().enumerate() {
            let factor = 1 << i;
            let s = ctx.tape.shape(sal.level(i));
            if s[2] * factor != h || s[3] * factor != w {
                return Err(Error::shape(
                    "fa_fuse_forward",
                    format!("scale {} is {}x{}, expected {}x{}", i + 1, s[2], s[3], h / factor, w / factor),
                ));
            }
            side_logits[i] = head.forward(ctx, sal.level(i), factor)?;
        }
        let stacked = ctx.tape.concat_channels(&side_logits)?;
        let fused_logit = self.fuse.forward(ctx, stacked)?;
        let sides = side_logits.map(|v| ctx.tape.sigmoid(v));
        let fused = ctx.tape.sigmoid(fused_logit);
        Ok(SaliencyOutputs {
            side_logits,
            fused_logit,
            sides,
            fused,
        })
    }
}
