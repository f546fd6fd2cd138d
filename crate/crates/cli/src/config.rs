use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sat_core::harness::HarnessSettings;
use sat_core::synthdata::OracleSegmenter;
use sat_core::tracker::{BoxStrategy, Source};
use sat_core::train::TrainConfig;
use sat_core::TrackerConfig;
use serde::{Deserialize, Serialize};

/// What produces per-frame probability maps in `track`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    Network,
    /// Ground-truth stand-in; needs an annotation for every frame.
    Oracle,
}

/// Every tunable, flat. Missing keys take the defaults below and unknown
/// keys are an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,

    // tracker
    pub state_threshold: f64,
    pub mu: f64,
    pub smoothing_lambda: f64,
    pub binarize_threshold: f64,
    pub saliency_context: f64,
    pub similarity_context: f64,
    pub strategy: BoxStrategy,
    pub global_loop: bool,
    pub box_source: Source,
    pub global_filter: Source,

    // segmenter
    pub segmenter: SegmenterKind,
    /// `toy`, `desk` or `full`; ignored when a checkpoint is loaded.
    pub network: String,
    pub checkpoint: Option<PathBuf>,
    pub oracle_flip_rate: f64,
    pub oracle_jitter: usize,
    pub oracle_map_size: usize,

    // training
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub aux_weight_stride8: f64,
    pub aux_weight_stride16: f64,
    pub samples_per_epoch: usize,
    pub validation_pairs: usize,
    pub pretrain_steps: usize,
    /// Synthetic training set used when `train` gets no `--data`.
    pub synthetic_sequences: usize,
    pub synthetic_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tracker = TrackerConfig::default();
        let train = TrainConfig::default();
        let harness = HarnessSettings::default();
        Self {
            seed: 0,
            output_dir: None,
            state_threshold: tracker.state_threshold,
            mu: tracker.mu,
            smoothing_lambda: tracker.smoothing_lambda,
            binarize_threshold: tracker.binarize_threshold,
            saliency_context: tracker.saliency_context,
            similarity_context: tracker.similarity_context,
            strategy: tracker.strategy,
            global_loop: tracker.global_loop,
            box_source: tracker.box_source,
            global_filter: tracker.global_filter,
            segmenter: SegmenterKind::Network,
            network: "desk".into(),
            checkpoint: None,
            oracle_flip_rate: harness.oracle.flip_rate,
            oracle_jitter: harness.oracle.jitter_radius,
            oracle_map_size: harness.map_size,
            epochs: train.epochs,
            warmup_epochs: train.warmup_epochs,
            lr_start: train.lr_start,
            lr_peak: train.lr_peak,
            momentum: train.momentum,
            batch_size: train.batch_size,
            aux_weight_stride8: train.aux_weights[0],
            aux_weight_stride16: train.aux_weights[1],
            samples_per_epoch: train.samples_per_epoch,
            validation_pairs: train.validation_pairs,
            pretrain_steps: train.pretrain_steps,
            synthetic_sequences: 24,
            synthetic_frames: 24,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.tracker().validate()?;
        Ok(config)
    }

    pub fn tracker(&self) -> TrackerConfig {
        TrackerConfig {
            state_threshold: self.state_threshold,
            mu: self.mu,
            smoothing_lambda: self.smoothing_lambda,
            binarize_threshold: self.binarize_threshold,
            saliency_context: self.saliency_context,
            similarity_context: self.similarity_context,
            strategy: self.strategy,
            global_loop: self.global_loop,
            box_source: self.box_source,
            global_filter: self.global_filter,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            lr_start: self.lr_start,
            lr_peak: self.lr_peak,
            momentum: self.momentum,
            batch_size: self.batch_size,
            aux_weights: [self.aux_weight_stride8, self.aux_weight_stride16],
            samples_per_epoch: self.samples_per_epoch,
            validation_pairs: self.validation_pairs,
            pretrain_steps: self.pretrain_steps,
            seed: self.seed,
        }
    }

    pub fn harness(&self) -> HarnessSettings {
        HarnessSettings {
            oracle: OracleSegmenter {
                flip_rate: self.oracle_flip_rate,
                jitter_radius: self.oracle_jitter,
                seed: self.seed,
                ..OracleSegmenter::exact()
            },
            map_size: self.oracle_map_size,
            ..HarnessSettings::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_core_modules() {
        let c = RunConfig::load(None).unwrap();
        assert_eq!(c.tracker(), TrackerConfig::default());
        assert_eq!(c.train(), TrainConfig::default());
        assert_eq!(c.state_threshold, 0.85);
        assert_eq!(c.mu, 0.5);
        assert_eq!(c.smoothing_lambda, 0.3);
        assert_eq!(c.binarize_threshold, 0.5);
    }

    #[test]
    fn partial_files_keep_defaults_and_unknown_keys_fail() {
        let c: RunConfig = toml::from_str("mu = 0.25\nstrategy = \"mask_only\"\nnetwork = \"toy\"").unwrap();
        assert_eq!(c.mu, 0.25);
        assert_eq!(c.strategy, BoxStrategy::MaskOnly);
        assert_eq!(c.smoothing_lambda, 0.3);
        assert!(toml::from_str::<RunConfig>("state_treshold = 0.9").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig {
            checkpoint: Some("w.ckpt".into()),
            segmenter: SegmenterKind::Oracle,
            ..RunConfig::default()
        };
        let back: RunConfig = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
