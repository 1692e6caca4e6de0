//! End-to-end runs: prepare a model, train it, predict and evaluate.

use crate::backbone::{self, PretextTask};
use crate::config::RunConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, SaliencyMap};
use crate::model::PaaNet;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::training::Trainer;

/// Build the model, optionally pretrain the backbone, then estimate backbone
/// batch-norm statistics over the training images.
pub fn prepare_model<T: Real>(cfg: &RunConfig, train: &[Sample<T>]) -> Result<PaaNet<T>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = PaaNet::new(&cfg.model_config())?;
    if cfg.pretrain_steps > 0 {
        let task = PretextTask::new(cfg.input_size, cfg.seed);
        backbone::pretrain(&model.backbone, &mut model.store, &task, cfg.pretrain_steps)?;
    }
    let images: Vec<Tensor<T>> = train.iter().map(|s| s.image.clone()).collect();
    model.calibrate_backbone(&images, cfg.batch_size)?;
    Ok(model)
}

pub fn trainer_for<T: Real>(cfg: &RunConfig, train: &[Sample<T>]) -> Result<Trainer<T>> {
    let model = prepare_model(cfg, train)?;
    Ok(Trainer::new(model, cfg.train_config(), cfg.to_text()))
}

/// Fused eval-mode predictions, one map per sample.
pub fn predict_samples<T: Real>(model: &mut PaaNet<T>, samples: &[Sample<T>], batch: usize) -> Result<Vec<SaliencyMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Tensor<T>> = chunk.iter().map(|s| &s.image).collect();
        let pred = model.predict(&Tensor::stack(&refs)?)?;
        for n in 0..chunk.len() {
            out.push(SaliencyMap::from_tensor(&pred, n)?);
        }
    }
    Ok(out)
}

pub fn evaluate_samples<T: Real>(
    model: &mut PaaNet<T>,
    samples: &[Sample<T>],
    batch: usize,
) -> Result<(MetricReport, Vec<SaliencyMap>)> {
    let preds = predict_samples(model, samples, batch)?;
    let pairs: Vec<_> = preds.iter().cloned().zip(samples.iter().map(|s| s.mask.clone())).collect();
    Ok((evaluate(&pairs)?, preds))
}

pub struct RunOutcome<T> {
    pub trainer: Trainer<T>,
    pub report: Option<MetricReport>,
}

/// Prepare, train for the configured epochs, and evaluate on `test` when non-empty.
pub fn run<T: Real>(cfg: &RunConfig, train: &[Sample<T>], test: &[Sample<T>]) -> Result<RunOutcome<T>> {
    let mut trainer = trainer_for(cfg, train)?;
    trainer.train(train)?;
    let report = if test.is_empty() {
        None
    } else {
        Some(evaluate_samples(&mut trainer.model, test, cfg.batch_size)?.0)
    };
    Ok(RunOutcome { trainer, report })
}
