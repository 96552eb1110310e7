//! Optional TOML config file shared by all subcommands. Every field
//! has a default; command-line flags override file values.

use autodet_core::losses::DrmcConfig;
use autodet_core::schedule::{SearchSchedule, TrainSchedule};
use autodet_core::synth::SynthParams;
use autodet_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub data: Option<DataSection>,
    pub model: Option<ModelSection>,
    pub search: Option<SearchSection>,
    pub train: Option<TrainSection>,
    pub loss: Option<LossSection>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub resolution: Option<usize>,
    pub count: Option<usize>,
    pub min_faces: Option<usize>,
    pub max_faces: Option<usize>,
    pub tier_mix: Option<[f64; 3]>,
    pub noise: Option<f32>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub phi: Option<u32>,
    pub width: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub epochs: Option<usize>,
    pub arch_start: Option<usize>,
    pub batch: Option<usize>,
    pub nodes: Option<usize>,
    pub channel_fraction: Option<usize>,
    pub retain_k: Option<usize>,
    pub output_rule: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub warmup_iters: Option<usize>,
    pub peak_lr: Option<f64>,
    pub decay_epochs: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub margin: Option<f64>,
    pub scale: Option<f64>,
    pub lambda_aux: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let s = std::fs::read_to_string(p)?;
                toml::from_str(&s).map_err(|e| Error::config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn synth_params(&self, resolution_flag: Option<usize>) -> SynthParams {
        let d = self.data.clone().unwrap_or_default();
        let base = SynthParams::default();
        SynthParams {
            resolution: resolution_flag.or(d.resolution).unwrap_or(base.resolution),
            min_faces: d.min_faces.unwrap_or(base.min_faces),
            max_faces: d.max_faces.unwrap_or(base.max_faces),
            tier_mix: d.tier_mix.unwrap_or(base.tier_mix),
            noise: d.noise.unwrap_or(base.noise),
            ..base
        }
    }

    pub fn train_schedule(&self, preset: TrainSchedule) -> TrainSchedule {
        let t = self.train.clone().unwrap_or_default();
        TrainSchedule {
            total_epochs: t.epochs.unwrap_or(preset.total_epochs),
            batch_size: t.batch.unwrap_or(preset.batch_size),
            warmup_iters: t.warmup_iters.unwrap_or(preset.warmup_iters),
            peak_lr: t.peak_lr.unwrap_or(preset.peak_lr),
            decay_epochs: t.decay_epochs.unwrap_or(preset.decay_epochs),
            ..preset
        }
    }

    pub fn search_schedule(&self, preset: SearchSchedule) -> SearchSchedule {
        let s = self.search.clone().unwrap_or_default();
        SearchSchedule {
            total_epochs: s.epochs.unwrap_or(preset.total_epochs),
            arch_update_start_epoch: s.arch_start.unwrap_or(preset.arch_update_start_epoch),
            batch_size: s.batch.unwrap_or(preset.batch_size),
            ..preset
        }
    }

    pub fn loss_config(&self, base: DrmcConfig) -> DrmcConfig {
        let l = self.loss.clone().unwrap_or_default();
        DrmcConfig {
            margin: l.margin.unwrap_or(base.margin),
            scale: l.scale.unwrap_or(base.scale),
            lambda_aux: l.lambda_aux.unwrap_or(base.lambda_aux),
            ..base
        }
    }
}
