//! Deep-supervision binary cross-entropy.

use crate::autodiff::{Tape, Var};
use crate::backbone::LEVELS;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Divide each map's summed loss by its pixel count.
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub side_weights: [f64; LEVELS],
    pub fused_weight: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            side_weights: [1.0; LEVELS],
            fused_weight: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

/// `−Σ[G log f + (1−G) log(1−f)]` per map, batch-averaged.
pub fn bce_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>, reduction: Reduction) -> Result<Var> {
    tape.bce(pred, gt, T::c(BCE_EPS), reduction == Reduction::Mean)
}

/// `L = Σ W_s^i l_s^i + W_f l_f` on recorded scalar losses.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, sides: &[Var], fused: Var, cfg: &LossConfig) -> Result<Var> {
    if sides.len() != LEVELS {
        return Err(Error::invalid(
            "total_loss",
            format!("expected {LEVELS} side losses, got {}", sides.len()),
        ));
    }
    let mut terms = sides.to_vec();
    terms.push(fused);
    let weights: Vec<T> = cfg
        .side_weights
        .iter()
        .chain(std::iter::once(&cfg.fused_weight))
        .map(|&w| T::c(w))
        .collect();
    tape.weighted_sum(&terms, &weights)
}

/// Plain-number counterpart of [`total_loss`].
pub fn combine_losses(sides: &[f64], fused: f64, cfg: &LossConfig) -> Result<f64> {
    if sides.len() != LEVELS {
        return Err(Error::invalid(
            "total_loss",
            format!("expected {LEVELS} side losses, got {}", sides.len()),
        ));
    }
    Ok(sides.iter().zip(&cfg.side_weights).map(|(l, w)| l * w).sum::<f64>() + cfg.fused_weight * fused)
}
