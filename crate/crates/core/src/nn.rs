//! Layers built from tape ops, with parameters held in a [`ParamStore`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnStats, NormStats, ParamId, ParamStore, Parameter, StatsId, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Self { tape, store, mode }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Seeded weight initializer. Draws in `f64` so both precisions start from the
/// same values.
#[derive(Debug, Clone)]
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-uniform for a PReLU-activated layer with the given fan-in.
    pub fn he_uniform<T: Real>(&mut self, shape: Shape, fan_in: usize) -> Tensor<T> {
        let gain = (2.0 / (1.0 + PRELU_INIT * PRELU_INIT)).sqrt();
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform<T: Real>(&mut self, shape: Shape, bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::c(self.rng.gen_range(-bound..=bound)))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = init.he_uniform([out_channels, in_channels, kernel, kernel], fan_in);
        let weight = store.add(Parameter::new(format!("{name}.weight"), w));
        let bias = bias.then(|| {
            let b = init.uniform([1, out_channels, 1, 1], 1.0 / (fan_in as f64).sqrt());
            store.add(Parameter::new(format!("{name}.bias"), b))
        });
        Self {
            weight,
            bias,
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).value.shape()[0]
    }
}

/// Transposed convolution, `(C_in, C_out, k, k)` weight, no bias.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        // each output site sees about in·(k/stride)² taps
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        let w = init.he_uniform([in_channels, out_channels, kernel, kernel], fan_in);
        let weight = store.add(Parameter::new(format!("{name}.weight"), w));
        Self {
            weight,
            stride,
            padding,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        ctx.tape.conv_transpose2d(x, w, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(Parameter::new(
            format!("{name}.gamma"),
            Tensor::full([1, channels, 1, 1], T::one()),
        ));
        let beta = store.add(Parameter::new(
            format!("{name}.beta"),
            Tensor::zeros([1, channels, 1, 1]),
        ));
        let stats = store.add_stats(BnStats::new(name, channels));
        Self {
            gamma,
            beta,
            stats,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Train mode normalizes by batch statistics and folds them into the
    /// running estimates; eval mode uses the running estimates.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let eps = T::c(self.eps);
        match mode {
            Mode::Train => {
                let out = ctx.tape.batch_norm(x, g, b, NormStats::Batch, eps)?;
                let momentum = if ctx.store.is_calibrating() {
                    None
                } else {
                    Some(T::c(self.momentum))
                };
                let (mean, var) = (
                    out.batch_mean.expect("batch statistics"),
                    out.batch_var_unbiased.expect("batch statistics"),
                );
                ctx.store.stats_mut(self.stats).update(&mean, &var, momentum);
                Ok(out.out)
            }
            Mode::Eval => {
                let stats = ctx.store.stats(self.stats);
                if stats.tracked == 0 {
                    return Err(Error::UninitializedStats(stats.name.clone()));
                }
                let out = ctx.tape.batch_norm(
                    x,
                    g,
                    b,
                    NormStats::Fixed {
                        mean: &stats.mean,
                        var: &stats.var,
                    },
                    eps,
                )?;
                Ok(out.out)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let slope = store.add(Parameter::new(
            format!("{name}.slope"),
            Tensor::full([1, channels, 1, 1], T::c(PRELU_INIT)),
        ));
        Self { slope }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let a = ctx.param(self.slope);
        ctx.tape.prelu(x, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_before_stats_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 2, 2, 2], 1.0));
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
        assert!(matches!(
            bn.forward(&mut ctx, x, Mode::Eval),
            Err(Error::UninitializedStats(_))
        ));
    }

    #[test]
    fn init_is_deterministic() {
        let a: Tensor<f64> = Init::new(3).he_uniform([2, 2, 3, 3], 18);
        let b: Tensor<f64> = Init::new(3).he_uniform([2, 2, 3, 3], 18);
        let c: Tensor<f32> = Init::new(3).he_uniform([2, 2, 3, 3], 18);
        assert_eq!(a, b);
        assert_eq!(c.data()[0], a.data()[0] as f32);
    }
}
