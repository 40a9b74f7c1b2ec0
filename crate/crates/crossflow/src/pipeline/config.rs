//! Versioned JSON configuration for the pipeline.
//!
//! Unknown keys are rejected (a typo in a sweep grid is the costliest
//! failure mode), every section has defaults, and `version` must be present
//! and equal to [`CONFIG_VERSION`].

use serde::{Deserialize, Serialize};

use crate::data::{Modality, SplitSizes, ToyWorldSpec};
use crate::detect::DetectorConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::sweep::Profile;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_modality")]
    pub modality: Modality,
    #[serde(default = "default_objects_min")]
    pub objects_min: usize,
    #[serde(default = "default_objects_max")]
    pub objects_max: usize,
}

fn default_image_size() -> usize {
    32
}
fn default_modality() -> Modality {
    Modality::IrLike
}
fn default_objects_min() -> usize {
    1
}
fn default_objects_max() -> usize {
    3
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            image_size: default_image_size(),
            modality: default_modality(),
            objects_min: default_objects_min(),
            objects_max: default_objects_max(),
        }
    }
}

impl WorldConfig {
    pub fn to_spec(&self, seed: u64) -> ToyWorldSpec {
        ToyWorldSpec {
            image_size: self.image_size,
            modality: self.modality,
            objects_min: self.objects_min,
            objects_max: self.objects_max,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_pretrain_images")]
    pub images: usize,
    #[serde(default = "default_pretrain_steps")]
    pub steps: u64,
    #[serde(default = "default_pretrain_lr")]
    pub learning_rate: f32,
}

fn default_pretrain_images() -> usize {
    192
}
fn default_pretrain_steps() -> u64 {
    1500
}
fn default_pretrain_lr() -> f32 {
    3e-3
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            images: default_pretrain_images(),
            steps: default_pretrain_steps(),
            learning_rate: default_pretrain_lr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepStageConfig {
    #[serde(default = "default_profile")]
    pub profile: Profile,
    /// Restrict the sweep to these grid config ids (desk-scale convenience);
    /// `None` runs the full grid.
    #[serde(default)]
    pub config_ids: Option<Vec<String>>,
    #[serde(default = "default_translate_steps")]
    pub translate_steps: u32,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_profile() -> Profile {
    Profile::Desk
}
fn default_translate_steps() -> u32 {
    20
}
fn default_workers() -> usize {
    2
}

impl Default for SweepStageConfig {
    fn default() -> Self {
        SweepStageConfig {
            profile: default_profile(),
            config_ids: None,
            translate_steps: default_translate_steps(),
            workers: default_workers(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorStageConfig {
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_det_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_score_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
    #[serde(default = "default_eval_seeds")]
    pub eval_seeds: usize,
}

fn default_epochs() -> u32 {
    10
}
fn default_det_lr() -> f32 {
    2e-3
}
fn default_grid() -> usize {
    4
}
fn default_score_threshold() -> f64 {
    0.25
}
fn default_nms_iou() -> f64 {
    0.5
}
fn default_eval_seeds() -> usize {
    5
}

impl Default for DetectorStageConfig {
    fn default() -> Self {
        DetectorStageConfig {
            epochs: default_epochs(),
            learning_rate: default_det_lr(),
            grid: default_grid(),
            score_threshold: default_score_threshold(),
            nms_iou: default_nms_iou(),
            eval_seeds: default_eval_seeds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimesConfig {
    /// Size of the data-scarce real subset used by the real-only and
    /// real+synthetic regimes (the synthetic side uses the full train split).
    #[serde(default = "default_real_count")]
    pub real_count: usize,
}

fn default_real_count() -> usize {
    64
}

impl Default for RegimesConfig {
    fn default() -> Self {
        RegimesConfig { real_count: default_real_count() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default = "default_splits")]
    pub splits: SplitSizes,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub model: FlowConfig,
    #[serde(default)]
    pub sweep: SweepStageConfig,
    #[serde(default)]
    pub detector: DetectorStageConfig,
    #[serde(default)]
    pub regimes: RegimesConfig,
    #[serde(default = "default_extractor_seed")]
    pub lpips_extractor_seed: u64,
}

fn default_splits() -> SplitSizes {
    SplitSizes { sensor_sample: 100, sensor_val: 50, train: 200, val: 50, test: 100 }
}

fn default_extractor_seed() -> u64 {
    42
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            seed: 0,
            world: WorldConfig::default(),
            splits: default_splits(),
            pretrain: PretrainConfig::default(),
            model: FlowConfig::default(),
            sweep: SweepStageConfig::default(),
            detector: DetectorStageConfig::default(),
            regimes: RegimesConfig::default(),
            lpips_extractor_seed: default_extractor_seed(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.world.objects_min < 1 || self.world.objects_min > self.world.objects_max {
            return Err(Error::Config("objects_min must be in 1..=objects_max".into()));
        }
        if self.model.image_size != self.world.image_size {
            return Err(Error::Config(format!(
                "model image size {} must match world image size {}",
                self.model.image_size, self.world.image_size
            )));
        }
        if self.regimes.real_count > self.splits.train {
            return Err(Error::Config(format!(
                "regimes.real_count {} exceeds train split size {}",
                self.regimes.real_count, self.splits.train
            )));
        }
        if self.detector.eval_seeds < 2 {
            return Err(Error::Config("detector.eval_seeds must be >= 2".into()));
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            image_size: self.world.image_size,
            in_channels: 1,
            grid: self.detector.grid,
            classes: 2,
            learning_rate: self.detector.learning_rate,
            score_threshold: self.detector.score_threshold,
            nms_iou: self.detector.nms_iou,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<PipelineConfig> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: PipelineConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}
