//! The full four-stage network over a single parameter store.

use crate::aggregation::{FaStage, SaliencyOutputs};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::backbone::{self, Backbone, BackboneConfig, FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Mode};
use crate::preprocess::FpStage;
use crate::scalar::Real;
use crate::sfe::{SfeConfig, SfeStage};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub order: usize,
    /// Per-scale saliency channels; defaults to the pyramid channels.
    pub sfe_channels: Option<[usize; LEVELS]>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            order: 3,
            sfe_channels: None,
        }
    }
}

impl ModelConfig {
    pub fn sfe(&self) -> SfeConfig {
        SfeConfig {
            order: self.order,
            channels: self.sfe_channels.unwrap_or_else(|| self.backbone.level_channels()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.sfe().validate()
    }
}

/// Every intermediate pyramid of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelTrace {
    pub general: FeaturePyramid,
    pub preprocessed: FeaturePyramid,
    pub saliency: FeaturePyramid,
    pub outputs: SaliencyOutputs,
}

#[derive(Debug, Clone)]
pub struct PaaNet<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub fp: FpStage,
    pub sfe: SfeStage,
    pub fa: FaStage,
}

impl<T: Real> PaaNet<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.backbone.seed);
        let backbone = Backbone::build(&config.backbone, &mut store, &mut init)?;
        let channels = config.backbone.level_channels();
        let fp = FpStage::new(&mut store, &mut init, channels);
        let sfe_cfg = config.sfe();
        let sfe = SfeStage::new(&mut store, &mut init, &sfe_cfg, channels)?;
        let fa = FaStage::new(&mut store, &mut init, sfe_cfg.channels);
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            fp,
            sfe,
            fa,
        })
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.backbone.set_frozen(&mut self.store, frozen);
    }

    pub fn trace(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ModelTrace> {
        let mut ctx = Ctx::new(tape, &mut self.store, mode);
        let general = self.backbone.forward(&mut ctx, x)?;
        let preprocessed = self.fp.forward(&mut ctx, &general)?;
        let saliency = self.sfe.forward(&mut ctx, &preprocessed)?;
        let outputs = self.fa.forward(&mut ctx, &saliency)?;
        Ok(ModelTrace {
            general,
            preprocessed,
            saliency,
            outputs,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<SaliencyOutputs> {
        Ok(self.trace(tape, x, mode)?.outputs)
    }

    /// Fused saliency probabilities `(N,1,H,W)` in eval mode.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(out.fused).clone())
    }

    /// Re-estimate backbone batch-norm statistics over `images`.
    pub fn calibrate_backbone(&mut self, images: &[Tensor<T>], batch_size: usize) -> Result<()> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        backbone::calibrate_stats(&self.backbone, &mut self.store, images, batch_size)
    }

    /// Re-estimate every batch-norm statistic of the model over `images`.
    pub fn calibrate_all(&mut self, images: &[Tensor<T>], batch_size: usize) -> Result<()> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in self.store.all_stats_mut() {
            s.mean.iter_mut().for_each(|v| *v = T::zero());
            s.var.iter_mut().for_each(|v| *v = T::one());
            s.tracked = 0;
        }
        let frozen = self.backbone.is_frozen();
        // unfreeze the flag only, so the backbone norms run on batch statistics too
        self.backbone.set_frozen(&mut self.store, false);
        self.store.set_calibrating(true);
        let mut result = Ok(());
        for chunk in images.chunks(batch_size.max(1)) {
            let refs: Vec<&Tensor<T>> = chunk.iter().collect();
            let step = Tensor::stack(&refs).and_then(|batch| {
                let mut tape = Tape::new();
                let x = tape.constant(batch);
                self.forward(&mut tape, x, Mode::Train).map(|_| ())
            });
            if step.is_err() {
                result = step;
                break;
            }
        }
        self.store.set_calibrating(false);
        self.backbone.set_frozen(&mut self.store, frozen);
        result
    }
}
