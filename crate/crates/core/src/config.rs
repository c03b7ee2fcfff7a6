//! Pipeline configuration loaded from a single TOML file.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::fusion::{CaptureSpec, FusionConfig, SceneSpec};
use crate::vae::VaeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 4, lr: 1e-4, warmup: 1000, weight_decay: 0.0, ema_decay: 0.999, seed: 0, log_every: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub vae: TrainConfig,
    pub flow: TrainConfig,
    pub control: TrainConfig,
    /// Probability of replacing the layout by the null condition.
    pub drop_prob: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            vae: TrainConfig::default(),
            flow: TrainConfig { steps: 10_000, seed: 1, ..Default::default() },
            control: TrainConfig { steps: 5000, seed: 2, ..Default::default() },
            drop_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunkConfig {
    pub shape: [usize; 3],
    pub overlap: f64,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self { shape: [32; 3], overlap: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, cfg_scale: 3.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenes: usize,
    pub frames_per_scene: usize,
    /// Fractions of frames kept when building degraded scans.
    pub keep_fractions: Vec<f64>,
    pub seed: u64,
    /// Minimum fraction of known voxels for a chunk to enter a dataset.
    pub min_known_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { scenes: 10, frames_per_scene: 48, keep_fractions: vec![1.0, 0.5], seed: 0, min_known_fraction: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub grid: FusionConfig,
    pub scene: SceneSpec,
    pub capture: CaptureSpec,
    pub chunk: ChunkConfig,
    pub vae: VaeConfig,
    pub flow: FlowConfig,
    pub train: TrainSection,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let ds = self.vae.downsample();
        if self.chunk.shape.iter().any(|&s| s == 0 || s % ds != 0) {
            return Err(Error::Config(format!(
                "chunk.shape {:?} must be positive multiples of the VAE downsample factor {ds}",
                self.chunk.shape
            )));
        }
        if !(0.0..1.0).contains(&self.chunk.overlap) {
            return Err(Error::Config(format!("chunk.overlap must be in [0, 1), got {}", self.chunk.overlap)));
        }
        if !(self.grid.voxel_size > 0.0 && self.grid.truncation_factor > 0.0) || self.grid.block_edge == 0 {
            return Err(Error::Config("grid.voxel_size, grid.truncation_factor and grid.block_edge must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.drop_prob) {
            return Err(Error::Config(format!("train.drop_prob must be in [0, 1], got {}", self.train.drop_prob)));
        }
        if self.sampler.steps == 0 || self.sampler.cfg_scale < 0.0 {
            return Err(Error::Config("sampler.steps must be >= 1 and sampler.cfg_scale >= 0".into()));
        }
        if let Some(k) = self.data.keep_fractions.iter().find(|k| !(**k > 0.0 && **k <= 1.0)) {
            return Err(Error::Config(format!("data.keep_fractions entries must be in (0, 1], got {k}")));
        }
        for (name, t) in [("vae", &self.train.vae), ("flow", &self.train.flow), ("control", &self.train.control)] {
            if t.batch == 0 || t.warmup > t.steps || !(0.0..1.0).contains(&t.ema_decay) {
                return Err(Error::Config(format!(
                    "train.{name}: batch must be >= 1, warmup <= steps and ema_decay in [0, 1)"
                )));
            }
        }
        self.vae.validate()?;
        self.flow.validate()?;
        self.scene.validate()
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PipelineConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn misspelled_key_is_named() {
        let err = PipelineConfig::from_toml("[sampler]\nstepz = 10\n").unwrap_err().to_string();
        assert!(err.contains("stepz"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn roundtrip() {
        let mut cfg = PipelineConfig::default();
        cfg.grid.carve_range_factor = Some(8.0);
        cfg.sampler.cfg_scale = 2.5;
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        let d = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&d.to_toml().unwrap()).unwrap(), d);
    }

    #[test]
    fn rejects_indivisible_chunk() {
        assert!(PipelineConfig::from_toml("[chunk]\nshape = [30, 32, 32]\n").is_err());
    }
}
