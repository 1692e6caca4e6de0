//! Salient object detection in four stages: general feature extraction,
//! feature preprocessing, cascaded contrast-based saliency feature extraction,
//! and side-output aggregation. Ships its own small reverse-mode autodiff engine,
//! the training loop, checkpointing, evaluation metrics and a synthetic dataset
//! generator.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root pick a precision.

pub mod aggregation;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod scalar;
pub mod sfe;
pub mod tensor;
pub mod training;

pub use aggregation::SaliencyOutputs;
pub use autodiff::{ParamStore, Tape, Var};
pub use backbone::{Backbone, BackboneConfig, FeaturePyramid, LEVELS};
pub use config::RunConfig;
pub use data::{Sample, SynthConfig};
pub use error::{Error, Result};
pub use metrics::{BinaryMask, Curve, MetricReport, SaliencyMap};
pub use model::{ModelConfig, PaaNet};
pub use nn::Mode;
pub use scalar::{DType, Real};
pub use sfe::SfeConfig;
pub use tensor::{Shape, Tensor};
pub use training::{Checkpoint, LossConfig, OptimizerConfig, Reduction, Strategy, TrainConfig, TrainLog, Trainer};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type PaaNet32 = PaaNet<f32>;
pub type PaaNet64 = PaaNet<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
pub type Sample32 = Sample<f32>;
pub type Sample64 = Sample<f64>;
