//! Run configuration: one JSON document covering the shell sampler, the
//! optimizer, encodings, the feature texture, refinement, and the training
//! schedule. Defaults are the production values; the desk presets shrink
//! iteration counts and resolutions for workstation runs.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use shellnerf_core::field::RadianceMlpConfig;
use shellnerf_core::refine::RefinementConfig;
use shellnerf_core::render::ShellConfig;
use shellnerf_core::training::{AlternateSchedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_rays: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { learning_rate: 0.0005, batch_rays: 1024 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub distance_frequencies: usize,
    pub view_frequencies: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig { distance_frequencies: 10, view_frequencies: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Grid,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub dim: usize,
    pub resolution: usize,
    pub encoder: EncoderKind,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { dim: 32, resolution: 128, encoder: EncoderKind::Grid }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub cycles: usize,
    pub stage1_batches: usize,
    pub stage3_batches: usize,
    pub eval_interval: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // Stage batch counts follow the published schedule (2M then 500k).
        ScheduleConfig { cycles: 1, stage1_batches: 2_000_000, stage3_batches: 500_000, eval_interval: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub shell: ShellConfig,
    pub refinement: RefinementConfig,
    pub optimizer: OptimizerConfig,
    pub encodings: EncodingConfig,
    pub feature: FeatureConfig,
    pub schedule: ScheduleConfig,
    pub confidence_threshold: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: 1,
            shell: ShellConfig::default(),
            refinement: RefinementConfig::default(),
            optimizer: OptimizerConfig::default(),
            encodings: EncodingConfig::default(),
            feature: FeatureConfig::default(),
            schedule: ScheduleConfig::default(),
            confidence_threshold: 0.5,
            seed: 7,
        }
    }
}

impl RunConfig {
    /// Workstation-scale preset: same physics, smaller budgets.
    pub fn desk() -> RunConfig {
        RunConfig {
            feature: FeatureConfig { resolution: 64, ..FeatureConfig::default() },
            optimizer: OptimizerConfig { batch_rays: 32, ..OptimizerConfig::default() },
            schedule: ScheduleConfig {
                cycles: 1,
                stage1_batches: 20_000,
                stage3_batches: 8_000,
                eval_interval: 0,
            },
            refinement: RefinementConfig {
                iterations: 5_000,
                points_per_view: 2_048,
                ..RefinementConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Small smoke-test preset for pipeline checks.
    pub fn smoke() -> RunConfig {
        RunConfig {
            feature: FeatureConfig { resolution: 16, ..FeatureConfig::default() },
            optimizer: OptimizerConfig { batch_rays: 8, ..OptimizerConfig::default() },
            schedule: ScheduleConfig {
                cycles: 1,
                stage1_batches: 20,
                stage3_batches: 10,
                eval_interval: 0,
            },
            refinement: RefinementConfig {
                iterations: 10,
                points_per_view: 64,
                ..RefinementConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let config: RunConfig = serde_json::from_slice(
            &std::fs::read(path).with_context(|| format!("read {}", path.display()))?,
        )?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            bail!("unsupported config schema version {}", self.schema_version);
        }
        if self.optimizer.batch_rays == 0 {
            bail!("batch_rays must be positive");
        }
        if self.feature.dim == 0 || self.feature.resolution == 0 {
            bail!("feature texture dimensions must be positive");
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            bail!("confidence threshold must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn mlp_config(&self) -> RadianceMlpConfig {
        RadianceMlpConfig {
            feature_dim: self.feature.dim,
            distance_frequencies: self.encodings.distance_frequencies,
            view_frequencies: self.encodings.view_frequencies,
            ..RadianceMlpConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            shell: self.shell,
            learning_rate: self.optimizer.learning_rate,
            batch_rays: self.optimizer.batch_rays,
            confidence_threshold: self.confidence_threshold,
            eval_interval: self.schedule.eval_interval,
        }
    }

    pub fn alternate_schedule(&self) -> AlternateSchedule {
        AlternateSchedule {
            cycles: self.schedule.cycles,
            stage1_batches: self.schedule.stage1_batches,
            stage3_batches: self.schedule.stage3_batches,
            refinement: self.refinement,
        }
    }
}
