//! Learnable parameters and the store that owns them.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// A learnable tensor. `learn_mask[i] == false` pins entry `i` at its initial value.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub frozen: bool,
    pub learn_mask: Option<Vec<bool>>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            frozen: false,
            learn_mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.value.numel(), "mask length");
        self.learn_mask = Some(mask);
        self
    }

    /// Whether entry `i` may change under optimization.
    pub fn is_learnable(&self, i: usize) -> bool {
        !self.frozen && self.learn_mask.as_ref().is_none_or(|m| m[i])
    }

    pub fn learnable_count(&self) -> usize {
        (0..self.value.numel()).filter(|&i| self.is_learnable(i)).count()
    }

    /// Add `g` into the gradient buffer, dropping mask-0 entries.
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) {
        if self.frozen {
            return;
        }
        let buf = self
            .grad
            .get_or_insert_with(|| Tensor::zeros(self.value.shape()));
        match &self.learn_mask {
            Some(mask) => {
                for ((b, &v), &m) in buf.data_mut().iter_mut().zip(g.data()).zip(mask) {
                    if m {
                        *b += v;
                    }
                }
            }
            None => buf.add_assign(g),
        }
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of batches folded in; zero means uninitialized.
    pub tracked: u64,
}

impl<T: Real> BnStats<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            tracked: 0,
        }
    }

    /// Fold in one batch. `momentum == None` keeps a cumulative average.
    pub fn update(&mut self, mean: &[T], unbiased_var: &[T], momentum: Option<T>) {
        let m = match momentum {
            Some(m) => m,
            None => T::one() / T::c((self.tracked + 1) as f64),
        };
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(unbiased_var) {
            *r = keep * *r + m * b;
        }
        self.tracked += 1;
    }
}

/// Owns every parameter and batch-norm statistic of a model, in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    stats: Vec<BnStats<T>>,
    /// Train-mode batch norm folds statistics in as a cumulative average.
    calibrating: bool,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            stats: Vec::new(),
            calibrating: false,
        }
    }

    pub fn add(&mut self, param: Parameter<T>) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != param.name),
            "duplicate parameter name {}",
            param.name
        );
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, stats: BnStats<T>) -> StatsId {
        self.stats.push(stats);
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn stats(&self, id: StatsId) -> &BnStats<T> {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut BnStats<T> {
        &mut self.stats[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn all_stats(&self) -> &[BnStats<T>] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [BnStats<T>] {
        &mut self.stats
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            if frozen {
                p.grad = None;
            }
        }
    }

    pub fn is_calibrating(&self) -> bool {
        self.calibrating
    }

    pub fn set_calibrating(&mut self, on: bool) {
        self.calibrating = on;
    }

    /// Total entry count over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn numel_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Replace the value of `name`, keeping flags. Shapes must match.
    pub fn load_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
        let p = self.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "load_value",
                format!("`{name}`: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_accumulation_skips_fixed_entries() {
        let mut p = Parameter::new("k", Tensor::<f64>::zeros([1, 1, 1, 3]))
            .with_mask(vec![true, false, true]);
        let g = Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        p.accumulate_grad(&g);
        assert_eq!(p.grad.as_ref().unwrap().data(), &[1.0, 0.0, 3.0]);
        assert_eq!(p.learnable_count(), 2);
    }

    #[test]
    fn frozen_parameter_never_receives_gradient() {
        let mut p = Parameter::new("w", Tensor::<f64>::zeros([1, 1, 1, 2]));
        p.frozen = true;
        p.accumulate_grad(&Tensor::full([1, 1, 1, 2], 1.0));
        assert!(p.grad.is_none());
        assert_eq!(p.learnable_count(), 0);
    }

    #[test]
    fn cumulative_stats_average_batches() {
        let mut s = BnStats::<f64>::new("bn", 1);
        s.update(&[2.0], &[4.0], None);
        s.update(&[4.0], &[2.0], None);
        assert_eq!(s.mean, vec![3.0]);
        assert_eq!(s.var, vec![3.0]);
        assert_eq!(s.tracked, 2);
    }

    #[test]
    fn momentum_stats_blend() {
        let mut s = BnStats::<f64>::new("bn", 1);
        s.update(&[1.0], &[1.0], Some(0.1));
        assert!((s.mean[0] - 0.1).abs() < 1e-15);
        assert!((s.var[0] - 1.0).abs() < 1e-15);
    }
}
