//! Run configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::datamodel::LabelScheme;
use crate::error::{io_err, Error, Result};
use crate::losses::{LossConfig, LossVariant};
use crate::model::{Backbone, ProjectionNorm, ProjectionSpec};
use crate::openset::PercentileRule;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Frame directory; when absent a synthetic benchmark is generated
    /// under the output directory.
    pub root: Option<PathBuf>,
    /// Second dataset for the cross-dataset protocol.
    pub cross_root: Option<PathBuf>,
    pub synthetic_seed: u64,
    pub synthetic_videos: usize,
    pub synthetic_frames: usize,
    pub image_side: usize,
    pub frames_per_video: usize,
    pub split: (f64, f64, f64),
    /// Method directory names accepted besides the built-in ones.
    pub extra_methods: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            cross_root: None,
            synthetic_seed: 7,
            synthetic_videos: 200,
            synthetic_frames: 2,
            image_side: 64,
            frames_per_video: 2,
            split: (0.6, 0.2, 0.2),
            extra_methods: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub projection_bias: bool,
    pub projection_norm: ProjectionNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: Backbone::SmallConv, projection_bias: false, projection_norm: ProjectionNorm::None }
    }
}

impl ModelConfig {
    pub fn projection(&self) -> ProjectionSpec {
        ProjectionSpec { bias: self.projection_bias, norm: self.projection_norm }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Epochs of linear learning-rate ramp before the cosine decay.
    pub warmup_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub scheme: LabelScheme,
    pub loss: LossVariant,
    pub temperature: f64,
    pub alpha: f64,
    /// Samples per batch; each contributes two views.
    pub batch_size: usize,
    pub epochs: usize,
    /// Trailing fraction of epochs whose end-of-epoch weights are averaged.
    pub swa_fraction: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            scheme: LabelScheme::ForgerySpecific,
            loss: LossVariant::WeightedSupcon,
            temperature: 0.2,
            alpha: 1.21,
            batch_size: 64,
            epochs: 40,
            swa_fraction: 0.25,
            optimizer: OptimizerConfig { learning_rate: 0.01, momentum: 0.9, weight_decay: 1e-4, warmup_epochs: 0 },
        }
    }
}

impl Stage1Config {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig { temperature: self.temperature, alpha: self.alpha, variant: self.loss }
    }

    /// Number of trailing epochs contributing snapshots (at least one).
    pub fn swa_window(&self) -> usize {
        ((self.swa_fraction * self.epochs as f64).round() as usize).clamp(1, self.epochs.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub scheme: LabelScheme,
    pub batch_size: usize,
    pub epochs: usize,
    /// Adds horizontally mirrored copies of the training images.
    pub flip_augment: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            scheme: LabelScheme::ForgerySpecific,
            batch_size: 64,
            epochs: 10,
            flip_augment: true,
            optimizer: OptimizerConfig { learning_rate: 0.1, momentum: 0.9, weight_decay: 1e-4, warmup_epochs: 0 },
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Stage1Config::default().optimizer
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenSetConfig {
    pub lambda: f64,
    pub percentile: PercentileRule,
    /// Extra λ values reported in the sweep table.
    pub sweep: Vec<f64>,
}

impl Default for OpenSetConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            percentile: PercentileRule::LowerNearestRank,
            sweep: vec![0.0, 5.0, 25.0, 50.0, 75.0, 95.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub openset: OpenSetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentPolicy::geometric(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            openset: OpenSetConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical TOML form.
    pub fn hash(&self) -> String {
        seed::sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.augment.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.stage1.loss_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.stage1.batch_size < 2 || self.stage2.batch_size < 1 {
            return bad("stage-1 batch size must be at least 2 and stage-2 at least 1".into());
        }
        if self.stage1.epochs == 0 || self.stage2.epochs == 0 {
            return bad("epoch counts must be positive".into());
        }
        if !(self.stage1.swa_fraction > 0.0 && self.stage1.swa_fraction <= 1.0) {
            return bad(format!("swa_fraction {} outside (0, 1]", self.stage1.swa_fraction));
        }
        for opt in [&self.stage1.optimizer, &self.stage2.optimizer] {
            if !(opt.learning_rate > 0.0) || !(0.0..1.0).contains(&opt.momentum) || opt.weight_decay < 0.0 {
                return bad(format!("invalid optimizer settings {opt:?}"));
            }
        }
        if !(0.0..=100.0).contains(&self.openset.lambda) || self.openset.sweep.iter().any(|l| !(0.0..=100.0).contains(l)) {
            return bad("λ values must lie in [0, 100]".into());
        }
        let (a, b, c) = self.data.split;
        if ((a + b + c) - 1.0).abs() > 1e-6 {
            return bad(format!("split ratios {:?} do not sum to 1", self.data.split));
        }
        if self.data.frames_per_video == 0 || self.data.image_side < 16 {
            return bad("frames_per_video must be positive and image_side at least 16".into());
        }
        for root in [&self.data.root, &self.data.cross_root].into_iter().flatten() {
            if !root.is_dir() {
                return bad(format!("data directory {} does not exist", root.display()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[stage1]\nalpha = 2.25\nloss = \"supcon\"\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.stage1.alpha, 2.25);
        assert_eq!(cfg.stage1.loss, LossVariant::Supcon);
        assert_eq!(cfg.stage2, Stage2Config::default());
    }

    #[test]
    fn rejects_invalid_values() {
        for text in [
            "[stage1]\nbatch_size = 1",
            "[stage1]\ntemperature = 0.0",
            "[openset]\nlambda = 120.0",
            "[data]\nsplit = [0.5, 0.2, 0.2]",
            "[data]\nroot = \"/definitely/not/here\"",
            "unknown_key = 1",
        ] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn swa_window_has_at_least_one_epoch() {
        let mut s = Stage1Config { epochs: 20, ..Stage1Config::default() };
        assert_eq!(s.swa_window(), 5);
        s.epochs = 1;
        assert_eq!(s.swa_window(), 1);
    }
}
