//! General feature extraction: a five-block conv/BN/PReLU backbone producing a
//! feature pyramid at resolutions 1, 1/2, 1/4, 1/8 and 1/16.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Init, Mode, PRelu};
use crate::training::optim::{sgd_step, Sgd};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const LEVELS: usize = 5;
pub const PREFIX: &str = "backbone.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub in_channels: usize,
    pub block_depth: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            in_channels: 3,
            block_depth: 1,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 || self.block_depth == 0 {
            return Err(Error::Config(format!(
                "backbone needs positive base_channels, in_channels and block_depth, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Channels of level `i` (0-based): `C · 2^i`.
    pub fn level_channels(&self) -> [usize; LEVELS] {
        std::array::from_fn(|i| self.base_channels << i)
    }
}

/// Five feature maps, finest first; each level halves the resolution of the
/// previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePyramid(pub [Var; LEVELS]);

impl FeaturePyramid {
    pub fn level(&self, i: usize) -> Var {
        self.0[i]
    }

    /// Check the halving-resolution contract, and channel doubling when `doubling`.
    pub fn validate<T: Real>(&self, tape: &Tape<T>, doubling: bool) -> Result<()> {
        let base = tape.shape(self.0[0]);
        for i in 1..LEVELS {
            let s = tape.shape(self.0[i]);
            let p = tape.shape(self.0[i - 1]);
            if s[0] != base[0] || s[2] * 2 != p[2] || s[3] * 2 != p[3] {
                return Err(Error::shape("pyramid", format!("level {} {:?} after {:?}", i + 1, s, p)));
            }
            if doubling && s[1] != p[1] * 2 {
                return Err(Error::shape("pyramid", format!("level {} has {} channels", i + 1, s[1])));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Unit {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: PRelu,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    blocks: Vec<Vec<Unit>>,
    frozen: bool,
}

impl Backbone {
    /// Register backbone parameters (prefixed `backbone.`) in `store`.
    pub fn build<T: Real>(config: &BackboneConfig, store: &mut ParamStore<T>, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let channels = config.level_channels();
        let mut blocks = Vec::with_capacity(LEVELS);
        let mut c_in = config.in_channels;
        for (b, &c_out) in channels.iter().enumerate() {
            let mut units = Vec::with_capacity(config.block_depth);
            for d in 0..config.block_depth {
                let name = format!("{PREFIX}block{}.{d}", b + 1);
                let stride = if b > 0 && d == 0 { 2 } else { 1 };
                let src = if d == 0 { c_in } else { c_out };
                units.push(Unit {
                    conv: Conv2d::new(store, init, &format!("{name}.conv"), src, c_out, 3, stride, 1, false),
                    bn: BatchNorm2d::new(store, &format!("{name}.bn"), c_out),
                    act: PRelu::new(store, &format!("{name}.act"), c_out),
                });
            }
            blocks.push(units);
            c_in = c_out;
        }
        Ok(Self {
            config: config.clone(),
            blocks,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freeze or unfreeze every backbone parameter. A frozen backbone also runs
    /// its batch norms on running statistics.
    pub fn set_frozen<T: Real>(&mut self, store: &mut ParamStore<T>, frozen: bool) {
        self.frozen = frozen;
        store.set_frozen_prefix(PREFIX, frozen);
    }

    /// `F_gen = Ψ(x)`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<FeaturePyramid> {
        let [_, c, h, w] = ctx.tape.shape(x);
        if c != self.config.in_channels {
            return Err(Error::shape(
                "gfe_forward",
                format!("expected {} input channels, got {c}", self.config.in_channels),
            ));
        }
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::invalid(
                "gfe_forward",
                format!("spatial size {h}x{w} must be a positive multiple of 16"),
            ));
        }
        let mode = if self.frozen { Mode::Eval } else { ctx.mode };
        let mut cur = x;
        let mut levels = [x; LEVELS];
        for (b, units) in self.blocks.iter().enumerate() {
            for u in units {
                cur = u.conv.forward(ctx, cur)?;
                cur = u.bn.forward(ctx, cur, mode)?;
                cur = u.act.forward(ctx, cur)?;
            }
            levels[b] = cur;
        }
        Ok(FeaturePyramid(levels))
    }

    /// Output channels of the deepest level.
    pub fn top_channels(&self) -> usize {
        self.config.level_channels()[LEVELS - 1]
    }
}

/// Reset backbone batch-norm statistics and re-estimate them as a cumulative
/// average over `images` (train-mode forward, no parameter updates).
pub fn calibrate_stats<T: Real>(
    backbone: &Backbone,
    store: &mut ParamStore<T>,
    images: &[Tensor<T>],
    batch_size: usize,
) -> Result<()> {
    for s in store.all_stats_mut().iter_mut().filter(|s| s.name.starts_with(PREFIX)) {
        s.mean.iter_mut().for_each(|v| *v = T::zero());
        s.var.iter_mut().for_each(|v| *v = T::one());
        s.tracked = 0;
    }
    let was = store.is_calibrating();
    store.set_calibrating(true);
    let result = (|| {
        for chunk in images.chunks(batch_size.max(1)) {
            let refs: Vec<&Tensor<T>> = chunk.iter().collect();
            let batch = Tensor::stack(&refs)?;
            let mut tape = Tape::new();
            let x = tape.constant(batch);
            let mut ctx = Ctx::new(&mut tape, store, Mode::Train);
            // run train-mode statistics even if the backbone is frozen
            let mut cur = x;
            for units in &backbone.blocks {
                for u in units {
                    cur = u.conv.forward(&mut ctx, cur)?;
                    cur = u.bn.forward(&mut ctx, cur, Mode::Train)?;
                    cur = u.act.forward(&mut ctx, cur)?;
                }
            }
        }
        Ok(())
    })();
    store.set_calibrating(was);
    result
}

/// Synthetic four-way texture/shape classification used to pretrain the backbone.
#[derive(Debug, Clone)]
pub struct PretextTask {
    pub size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl PretextTask {
    pub const CLASSES: usize = 4;

    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            size,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            seed,
        }
    }

    /// One image of class `label`: horizontal stripes, vertical stripes, a disk
    /// or a square, over a noisy background.
    pub fn sample<T: Real>(&self, rng: &mut impl Rng, label: usize) -> Tensor<T> {
        let s = self.size as f64;
        let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
        let fg: [f64; 3] = std::array::from_fn(|i| (bg[i] + rng.gen_range(0.2..0.4) * if bg[i] > 0.5 { -1.0 } else { 1.0 }).clamp(0.0, 1.0));
        let period = rng.gen_range(3.0..8.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let (cy, cx) = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.3..0.7) * s);
        let radius = rng.gen_range(0.15..0.3) * s;
        let noise: Vec<f64> = (0..3 * self.size * self.size).map(|_| rng.gen_range(-0.05..0.05)).collect();
        Tensor::from_fn([1, 3, self.size, self.size], |[_, c, y, x]| {
            let (yf, xf) = (y as f64, x as f64);
            let inside = match label {
                0 => ((yf * std::f64::consts::TAU / period) + phase).sin() > 0.0,
                1 => ((xf * std::f64::consts::TAU / period) + phase).sin() > 0.0,
                2 => (yf - cy).powi(2) + (xf - cx).powi(2) < radius * radius,
                _ => (yf - cy).abs() < radius && (xf - cx).abs() < radius,
            };
            let base = if inside { fg[c] } else { bg[c] };
            T::c((base + noise[(c * self.size + y) * self.size + x]).clamp(0.0, 1.0))
        })
    }
}

/// Train the backbone with a temporary linear head on the pretext task.
/// Returns the per-step loss. Head parameters are discarded afterwards.
pub fn pretrain<T: Real>(
    backbone: &Backbone,
    store: &mut ParamStore<T>,
    task: &PretextTask,
    steps: usize,
) -> Result<Vec<f64>> {
    if backbone.is_frozen() {
        return Err(Error::Config("cannot pretrain a frozen backbone".into()));
    }
    if steps == 0 {
        return Ok(Vec::new());
    }
    let mut work = store.clone();
    let mut init = Init::new(task.seed ^ 0x5eed);
    let head = Conv2d::new(&mut work, &mut init, "pretext.head", backbone.top_channels(), PretextTask::CLASSES, 1, 1, 0, true);
    let trainable: Vec<_> = work
        .ids()
        .filter(|&id| {
            let name = &work.get(id).name;
            name.starts_with(PREFIX) || name.starts_with("pretext.")
        })
        .collect();
    let mut opt = Sgd::new();
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut labels: Vec<usize> = (0..task.batch_size).map(|i| i % PretextTask::CLASSES).collect();
        labels.shuffle(&mut rng);
        let images: Vec<Tensor<T>> = labels.iter().map(|&l| task.sample(&mut rng, l)).collect();
        let refs: Vec<&Tensor<T>> = images.iter().collect();
        let batch = Tensor::stack(&refs)?;

        work.zero_grad();
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let loss = {
            let mut ctx = Ctx::new(&mut tape, &mut work, Mode::Train);
            let pyr = backbone.forward(&mut ctx, x)?;
            let pooled = ctx.tape.global_avg_pool(pyr.level(LEVELS - 1));
            let logits = head.forward(&mut ctx, pooled)?;
            ctx.tape.cross_entropy(logits, &labels)?
        };
        losses.push(tape.value(loss).item().f64());
        tape.backward(loss, &mut work)?;
        sgd_step(&mut work, &mut opt, &trainable, T::c(task.lr), T::c(task.momentum), T::zero())?;
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.get(id).name.clone();
        if name.starts_with(PREFIX) {
            let src = work.find(&name).expect("cloned store keeps names");
            store.get_mut(id).value = work.get(src).value.clone();
        }
    }
    for (dst, src) in store.all_stats_mut().iter_mut().zip(work.all_stats()) {
        if dst.name.starts_with(PREFIX) {
            *dst = src.clone();
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(c: usize, depth: usize, seed: u64) -> (Backbone, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            base_channels: c,
            in_channels: 3,
            block_depth: depth,
            seed,
        };
        let bb = Backbone::build(&cfg, &mut store, &mut Init::new(seed)).unwrap();
        (bb, store)
    }

    #[test]
    fn zero_channels_rejected() {
        let mut store = ParamStore::<f64>::new();
        let cfg = BackboneConfig {
            base_channels: 0,
            ..Default::default()
        };
        assert!(matches!(Backbone::build(&cfg, &mut store, &mut Init::new(0)), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = build(4, 2, 11);
        let (_, b) = build(4, 2, 11);
        let (_, c) = build(4, 2, 12);
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn parameter_count_closed_form() {
        // conv 3x3 without bias + BN (γ, β) + per-channel PReLU slope, per unit
        let (_, store) = build(8, 1, 0);
        let chans = [3usize, 8, 16, 32, 64, 128];
        let expected: usize = (0..5).map(|i| chans[i] * chans[i + 1] * 9 + 3 * chans[i + 1]).sum();
        assert_eq!(expected, 98_880);
        assert_eq!(store.numel_prefix(PREFIX), expected);

        let (_, deep) = build(8, 2, 0);
        let extra: usize = (1..6).map(|i| chans[i] * chans[i] * 9 + 3 * chans[i]).sum();
        assert_eq!(deep.numel_prefix(PREFIX), expected + extra);
    }

    #[test]
    fn indivisible_input_rejected() {
        let (bb, mut store) = build(2, 1, 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 3, 24, 32]));
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
        assert!(bb.forward(&mut ctx, x).is_err());
    }

    #[test]
    fn zero_pretrain_steps_change_nothing() {
        let (bb, mut store) = build(2, 1, 0);
        let before = store.clone();
        let losses = pretrain(&bb, &mut store, &PretextTask::new(16, 0), 0).unwrap();
        assert!(losses.is_empty());
        assert_eq!(store, before);
    }

    #[test]
    fn calibration_initializes_stats() {
        let (mut bb, mut store) = build(2, 1, 0);
        bb.set_frozen(&mut store, true);
        let imgs: Vec<Tensor<f64>> = (0..3)
            .map(|i| Tensor::from_fn([1, 3, 16, 16], |[_, c, y, x]| ((i + c + y * x) % 7) as f64 / 7.0))
            .collect();
        let params_before: Vec<_> = store.params().to_vec();
        calibrate_stats(&bb, &mut store, &imgs, 2).unwrap();
        assert!(store.all_stats().iter().all(|s| s.tracked == 2));
        assert_eq!(store.params(), &params_before[..]);
        let mut tape = Tape::new();
        let x = tape.constant(imgs[0].clone());
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
        bb.forward(&mut ctx, x).unwrap();
    }
}
