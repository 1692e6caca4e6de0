//! Flat `key = value` run configuration. Every key has a default; unknown keys
//! are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::backbone::{BackboneConfig, LEVELS};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scalar::DType;
use crate::training::{LossConfig, OptimizerConfig, Reduction, Strategy, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub base_channels: usize,
    pub block_depth: usize,
    pub order: usize,
    pub sfe_channels: Option<[usize; LEVELS]>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub lr_step: usize,
    pub batch_size: usize,
    pub input_size: usize,
    pub side_weights: [f64; LEVELS],
    pub fused_weight: f64,
    pub reduction: Reduction,
    pub hflip: bool,
    pub strategy: Strategy,
    pub seed: u64,
    pub precision: DType,
    pub pretrain_steps: usize,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        Self {
            base_channels: 8,
            block_depth: 1,
            order: 3,
            sfe_channels: None,
            lr: opt.lr,
            momentum: opt.momentum,
            weight_decay: opt.weight_decay,
            gamma: opt.gamma,
            epochs: opt.epochs,
            lr_step: opt.lr_step,
            batch_size: 4,
            input_size: 64,
            side_weights: [1.0; LEVELS],
            fused_weight: 1.0,
            reduction: Reduction::Mean,
            hflip: true,
            strategy: Strategy::Frozen,
            seed: 0,
            precision: DType::F64,
            pretrain_steps: 0,
            train_data: None,
            test_data: None,
            out: PathBuf::from("out"),
        }
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<N: std::str::FromStr + Copy>(key: &str, value: &str) -> Result<[N; LEVELS]> {
    let items: Vec<N> = value
        .split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs {LEVELS} comma-separated values")))
}

fn join<N: std::fmt::Display>(xs: &[N]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 23] = [
        "base_channels",
        "block_depth",
        "order",
        "sfe_channels",
        "lr",
        "momentum",
        "weight_decay",
        "gamma",
        "epochs",
        "lr_step",
        "batch_size",
        "input_size",
        "side_weights",
        "fused_weight",
        "reduction",
        "hflip",
        "strategy",
        "seed",
        "precision",
        "pretrain_steps",
        "train_data",
        "test_data",
        "out",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "base_channels" => self.base_channels = parse_num(key, value)?,
            "block_depth" => self.block_depth = parse_num(key, value)?,
            "order" => self.order = parse_num(key, value)?,
            "sfe_channels" => {
                self.sfe_channels = if value == "auto" {
                    None
                } else {
                    Some(parse_list(key, value)?)
                }
            }
            "lr" => self.lr = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "lr_step" => self.lr_step = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "input_size" => self.input_size = parse_num(key, value)?,
            "side_weights" => self.side_weights = parse_list(key, value)?,
            "fused_weight" => self.fused_weight = parse_num(key, value)?,
            "reduction" => {
                self.reduction = match value {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(Error::Config(format!("`reduction` must be mean or sum, got `{value}`"))),
                }
            }
            "hflip" => self.hflip = parse_num(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "seed" => self.seed = parse_num(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("`precision` must be f32 or f64, got `{value}`"))),
                }
            }
            "pretrain_steps" => self.pretrain_steps = parse_num(key, value)?,
            "train_data" => self.train_data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "test_data" => self.test_data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("`batch_size` must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!(
                "`input_size` must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                base_channels: self.base_channels,
                in_channels: 3,
                block_depth: self.block_depth,
                seed: self.seed,
            },
            order: self.order,
            sfe_channels: self.sfe_channels,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerConfig {
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                gamma: self.gamma,
                epochs: self.epochs,
                lr_step: self.lr_step,
            },
            loss: LossConfig {
                side_weights: self.side_weights,
                fused_weight: self.fused_weight,
                reduction: self.reduction,
            },
            strategy: self.strategy,
            batch_size: self.batch_size,
            hflip: self.hflip,
            seed: self.seed,
        }
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "base_channels = {}", self.base_channels);
        let _ = writeln!(s, "block_depth = {}", self.block_depth);
        let _ = writeln!(s, "order = {}", self.order);
        let _ = writeln!(
            s,
            "sfe_channels = {}",
            self.sfe_channels.map_or("auto".to_string(), |c| join(&c))
        );
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr_step = {}", self.lr_step);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "side_weights = {}", join(&self.side_weights));
        let _ = writeln!(s, "fused_weight = {}", self.fused_weight);
        let _ = writeln!(
            s,
            "reduction = {}",
            match self.reduction {
                Reduction::Mean => "mean",
                Reduction::Sum => "sum",
            }
        );
        let _ = writeln!(s, "hflip = {}", self.hflip);
        let _ = writeln!(s, "strategy = {}", self.strategy);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(
            s,
            "precision = {}",
            match self.precision {
                DType::F32 => "f32",
                DType::F64 => "f64",
            }
        );
        let _ = writeln!(s, "pretrain_steps = {}", self.pretrain_steps);
        let _ = writeln!(s, "train_data = {}", path(&self.train_data));
        let _ = writeln!(s, "test_data = {}", path(&self.test_data));
        let _ = writeln!(s, "out = {}", self.out.display());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.sfe_channels = Some([4, 4, 8, 8, 16]);
        cfg.lr = 0.0123;
        cfg.strategy = Strategy::Unfrozen;
        cfg.train_data = Some("data/train".into());
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn every_key_is_emitted() {
        let text = RunConfig::default().to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, RunConfig::KEYS);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::parse("# tiny\n\norder = 1  # single pass\n").unwrap();
        assert_eq!(cfg.order, 1);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("input_size = 40").is_err());
        assert!(RunConfig::parse("order = 0").is_err());
        assert!(RunConfig::parse("side_weights = 1,1").is_err());
    }
}
