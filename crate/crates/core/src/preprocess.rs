//! Feature preprocessing: top-down refinement of the general pyramid.
//!
//! `f⁵_pre = M⁵(f⁵_gen)` and `f^i_pre = M^i(f^{i+1}_pre) + f^i_gen` for `i = 4…1`.

use crate::autodiff::{ParamStore, Var};
use crate::backbone::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Ctx, Init, PRelu};
use crate::scalar::Real;

pub const PREFIX: &str = "fp.";

/// `[convT ×2] → conv-a → BN → PReLU → conv-b`. The transposed conv exists
/// only below the deepest level.
#[derive(Debug, Clone)]
pub struct FpBlock {
    pub up: Option<ConvTranspose2d>,
    pub conv_a: Conv2d,
    pub bn: BatchNorm2d,
    pub act: PRelu,
    pub conv_b: Conv2d,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl FpBlock {
    /// Block for level `level` (1-based).
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        level: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let name = format!("{PREFIX}block{level}");
        let up = (level < LEVELS).then(|| {
            ConvTranspose2d::new(store, init, &format!("{name}.up"), in_channels, in_channels, 4, 2, 1)
        });
        Self {
            up,
            conv_a: Conv2d::new(store, init, &format!("{name}.conv_a"), in_channels, in_channels, 3, 1, 1, false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), in_channels),
            act: PRelu::new(store, &format!("{name}.act"), in_channels),
            conv_b: Conv2d::new(store, init, &format!("{name}.conv_b"), in_channels, out_channels, 3, 1, 1, true),
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x)[1];
        if c != self.in_channels {
            return Err(Error::shape(
                "fp_block_forward",
                format!("expected {} channels, got {c}", self.in_channels),
            ));
        }
        let mut y = match &self.up {
            Some(up) => up.forward(ctx, x)?,
            None => x,
        };
        y = self.conv_a.forward(ctx, y)?;
        let mode = ctx.mode;
        y = self.bn.forward(ctx, y, mode)?;
        y = self.act.forward(ctx, y)?;
        self.conv_b.forward(ctx, y)
    }
}

#[derive(Debug, Clone)]
pub struct FpStage {
    /// Index `i` holds the block of level `i + 1`.
    pub blocks: Vec<FpBlock>,
}

impl FpStage {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, channels: [usize; LEVELS]) -> Self {
        let blocks = (0..LEVELS)
            .map(|i| {
                let input = if i + 1 == LEVELS { channels[i] } else { channels[i + 1] };
                FpBlock::new(store, init, i + 1, input, channels[i])
            })
            .collect();
        Self { blocks }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, gen: &FeaturePyramid) -> Result<FeaturePyramid> {
        let mut out = gen.0;
        out[LEVELS - 1] = self.blocks[LEVELS - 1].forward(ctx, gen.level(LEVELS - 1))?;
        for i in (0..LEVELS - 1).rev() {
            let processed = self.blocks[i].forward(ctx, out[i + 1])?;
            let (ps, gs) = (ctx.tape.shape(processed), ctx.tape.shape(gen.level(i)));
            if ps != gs {
                return Err(Error::shape(
                    "fp_stage_forward",
                    format!("level {}: processed {ps:?} vs skip {gs:?}", i + 1),
                ));
            }
            out[i] = ctx.tape.add(processed, gen.level(i))?;
        }
        Ok(FeaturePyramid(out))
    }
}
