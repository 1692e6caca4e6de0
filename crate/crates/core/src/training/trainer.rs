//! The training loop.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState};
use super::loss::{bce_loss, total_loss, LossConfig};
use super::optim::{sgd_step, OptimizerConfig, Sgd};
use crate::autodiff::{ParamId, Tape};
use crate::backbone::LEVELS;
use crate::config::RunConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::PaaNet;
use crate::nn::Mode;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Backbone parameters and batch-norm statistics stay fixed.
    Frozen,
    Unfrozen,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Frozen => "frozen",
            Strategy::Unfrozen => "unfrozen",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Strategy::Frozen),
            "unfrozen" => Ok(Strategy::Unfrozen),
            _ => Err(Error::Config(format!("strategy must be frozen or unfrozen, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub strategy: Strategy,
    pub batch_size: usize,
    pub hflip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            strategy: Strategy::Frozen,
            batch_size: 4,
            hflip: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub total: f64,
    pub sides: [f64; LEVELS],
    pub fused: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,step,loss_total,loss_side1,loss_side2,loss_side3,loss_side4,loss_side5,loss_fused,lr";

    /// Mean total loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for s in &self.steps {
            match out.last_mut() {
                Some((e, sum, n)) if *e == s.epoch => {
                    *sum += s.total;
                    *n += 1;
                }
                _ => out.push((s.epoch, s.total, 1)),
            }
        }
        out.into_iter().map(|(e, sum, n)| (e, sum / n as f64)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.steps {
            let _ = write!(s, "{},{},{}", r.epoch, r.step, r.total);
            for l in r.sides {
                let _ = write!(s, ",{l}");
            }
            let _ = writeln!(s, ",{},{}", r.fused, r.lr);
        }
        s
    }
}

/// Stack samples into an image batch and a target batch, flipping where asked.
pub fn make_batch<T: Real>(samples: &[&Sample<T>], flips: &[bool]) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut images = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for (s, &flip) in samples.iter().zip(flips) {
        if flip {
            images.push(s.image.flip_horizontal());
            targets.push(s.mask.flip_horizontal().to_tensor());
        } else {
            images.push(s.image.clone());
            targets.push(s.mask.to_tensor());
        }
    }
    let (ir, tr): (Vec<&Tensor<T>>, Vec<&Tensor<T>>) = (images.iter().collect(), targets.iter().collect());
    Ok((Tensor::stack(&ir)?, Tensor::stack(&tr)?))
}

pub struct Trainer<T> {
    pub model: PaaNet<T>,
    pub config: TrainConfig,
    /// Text echoed into checkpoints.
    pub config_text: String,
    optimizer: Sgd<T>,
    rng: ChaCha8Rng,
    epoch: usize,
    step: u64,
    log: TrainLog,
}

impl<T: Real> Trainer<T> {
    pub fn new(mut model: PaaNet<T>, config: TrainConfig, config_text: String) -> Self {
        model.set_frozen(config.strategy == Strategy::Frozen);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self {
            model,
            config,
            config_text,
            optimizer: Sgd::new(),
            rng,
            epoch: 0,
            step: 0,
            log: TrainLog::default(),
        }
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn optimizer(&self) -> &Sgd<T> {
        &self.optimizer
    }

    /// One optimizer step on a prepared batch; returns the step record.
    pub fn step_on(&mut self, images: Tensor<T>, targets: &Tensor<T>, lr: f64) -> Result<StepRecord> {
        let cfg = &self.config;
        let store_ids: Vec<ParamId> = self.model.store.ids().collect();
        self.model.store.zero_grad();
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let out = self.model.forward(&mut tape, x, Mode::Train)?;
        let mut sides = Vec::with_capacity(LEVELS);
        for v in out.sides {
            sides.push(bce_loss(&mut tape, v, targets, cfg.loss.reduction)?);
        }
        let fused = bce_loss(&mut tape, out.fused, targets, cfg.loss.reduction)?;
        let total = total_loss(&mut tape, &sides, fused, &cfg.loss)?;
        tape.backward(total, &mut self.model.store)?;
        sgd_step(
            &mut self.model.store,
            &mut self.optimizer,
            &store_ids,
            T::c(lr),
            T::c(cfg.optimizer.momentum),
            T::c(cfg.optimizer.weight_decay),
        )?;
        self.step += 1;
        let value = |v| tape.value(v).item().f64();
        Ok(StepRecord {
            epoch: self.epoch + 1,
            step: self.step,
            total: value(total),
            sides: std::array::from_fn(|i| value(sides[i])),
            fused: value(fused),
            lr,
        })
    }

    /// One shuffled pass over `data`; returns the epoch's mean total loss.
    pub fn run_epoch(&mut self, data: &[Sample<T>]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let lr = self.config.optimizer.lr_at(self.epoch + 1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size.max(1)) {
            let samples: Vec<&Sample<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let flips: Vec<bool> = chunk
                .iter()
                .map(|_| self.config.hflip && self.rng.gen_bool(0.5))
                .collect();
            let (images, targets) = make_batch(&samples, &flips)?;
            let rec = self.step_on(images, &targets, lr)?;
            sum += rec.total;
            batches += 1;
            self.log.steps.push(rec);
        }
        self.epoch += 1;
        Ok(sum / batches as f64)
    }

    /// Run epochs until `epochs` are complete.
    pub fn train_until(&mut self, data: &[Sample<T>], epochs: usize) -> Result<&TrainLog> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        while self.epoch < epochs {
            self.run_epoch(data)?;
        }
        Ok(&self.log)
    }

    pub fn train(&mut self, data: &[Sample<T>]) -> Result<&TrainLog> {
        let epochs = self.config.optimizer.epochs;
        self.train_until(data, epochs)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let momentum = self
            .model
            .store
            .ids()
            .filter_map(|id| {
                self.optimizer
                    .velocity(id)
                    .map(|v| (self.model.store.get(id).name.clone(), v.clone()))
            })
            .collect();
        let mut store = self.model.store.clone();
        store.zero_grad();
        Checkpoint {
            config: self.config_text.clone(),
            epoch: self.epoch as u64,
            step: self.step,
            store,
            momentum,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Rebuild a trainer from a checkpoint whose config echo is a [`RunConfig`].
    /// The returned trainer's log starts empty.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let run = RunConfig::parse(&ckpt.config)?;
        let model = PaaNet::new(&run.model_config())?;
        let mut trainer = Trainer::new(model, run.train_config(), ckpt.config.clone());
        trainer.restore(ckpt)?;
        Ok(trainer)
    }

    /// Load parameters, statistics, optimizer state, counters and RNG state.
    pub fn restore(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        ckpt.apply_to(&mut self.model.store)?;
        let frozen = ckpt
            .store
            .params()
            .iter()
            .any(|p| p.name.starts_with(crate::backbone::PREFIX) && p.frozen);
        self.model.backbone.set_frozen(&mut self.model.store, frozen);
        self.optimizer = Sgd::new();
        for (name, v) in &ckpt.momentum {
            let id = self
                .model
                .store
                .find(name)
                .ok_or_else(|| Error::Format(format!("momentum for unknown parameter `{name}`")))?;
            self.optimizer.set_velocity(id, v.clone());
        }
        self.epoch = ckpt.epoch as usize;
        self.step = ckpt.step;
        self.rng = ckpt.rng.restore();
        self.log = TrainLog::default();
        Ok(())
    }
}
