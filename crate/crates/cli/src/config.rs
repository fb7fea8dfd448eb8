//! Run configuration: one TOML file with a section per pipeline stage,
//! overridden by command-line flags and echoed after resolution.

use std::path::Path;

use anyhow::{Context, Result};
use scenecast::math::LrSchedule;
use scenecast::metrics::MetricsConfig;
use scenecast::model::{ModelConfig, TrainConfig, TrajectoryConfig, TrajectoryTrainConfig};
use scenecast::recombiner::{RecombinerConfig, RecombinerTrainConfig};
use scenecast::sampler::SamplerConfig;
use scenecast::scene::GeneratorConfig;
use serde::{Deserialize, Serialize};

use crate::commands::HeatmapKind;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed for data generation; also copied into every stage seed when
    /// given on the command line.
    pub seed: u64,
    /// Heatmap producer used by the recombiner stage, prediction and rendering.
    pub heatmaps: HeatmapKind,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub decoder_train: TrainConfig,
    pub trajectory: TrajectoryConfig,
    pub trajectory_train: TrajectoryTrainConfig,
    pub recombiner: RecombinerConfig,
    pub recombiner_train: RecombinerTrainConfig,
    pub sampler: SamplerConfig,
    pub metrics: MetricsConfig,
}

/// Flag values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub radius: Option<f64>,
    pub d_col: Option<f64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.model.seed = seed;
            self.decoder_train.seed = seed;
            self.trajectory.seed = seed;
            self.trajectory_train.seed = seed;
            self.recombiner.seed = seed;
            self.recombiner_train.seed = seed;
        }
        if let Some(k) = o.k {
            self.sampler.k = k;
            self.recombiner.k = k;
            self.recombiner.l = k;
        }
        if let Some(r) = o.radius {
            self.sampler.radius = r;
        }
        if let Some(d) = o.d_col {
            self.metrics.d_col = d;
        }
        if let Some(e) = o.epochs {
            self.decoder_train.epochs = e;
            self.trajectory_train.epochs = e;
            self.recombiner_train.epochs = e;
        }
        if let Some(lr) = o.lr {
            for s in [
                &mut self.decoder_train.schedule,
                &mut self.trajectory_train.schedule,
                &mut self.recombiner_train.schedule,
            ] {
                *s = LrSchedule { base_lr: lr, ..s.clone() };
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply(&Overrides { seed: Some(7), k: Some(4), radius: Some(1.5), epochs: Some(2), lr: Some(3e-3), ..Default::default() });
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.recombiner.l, 4);
        assert_eq!(back.decoder_train.schedule.base_lr, 3e-3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        let c: RunConfig = toml::from_str("[sampler]\nk = 3").unwrap();
        assert_eq!(c.sampler.k, 3);
        assert_eq!(c.sampler.radius, 2.0);
    }
}
