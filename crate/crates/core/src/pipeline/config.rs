use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::strategy::{RefStrategy, StrategyKind};
use crate::diffcore::ScheduleConfig;
use crate::error::{Error, Result};

/// Diffusion training and evaluation settings; serialized as the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub strategy: StrategyKind,
    pub np: usize,
    /// Leading audio-encoder layers held fixed.
    pub freeze_k: usize,
    pub schedule: ScheduleConfig,
    pub base_channels: usize,
    pub low_channels: usize,
    /// Training targets drawn per epoch; 0 means every eligible target.
    pub samples_per_epoch: usize,
    /// Epoch interval of periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Targets in the fixed validation batch used to pick `best.ckpt`.
    pub val_samples: usize,
    /// DDIM steps used when synthesizing for evaluation.
    pub eval_ddim_steps: usize,
    pub eval_clips: usize,
    pub eval_frames: usize,
    pub data: Option<PathBuf>,
    pub codec: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 8,
            lr: 1e-3,
            seeds: vec![0],
            strategy: StrategyKind::RndPlusPrvBN,
            np: 1,
            freeze_k: 0,
            schedule: ScheduleConfig::default(),
            base_channels: 32,
            low_channels: 64,
            samples_per_epoch: 2048,
            checkpoint_every: 0,
            val_samples: 64,
            eval_ddim_steps: 50,
            eval_clips: 32,
            eval_frames: 20,
            data: None,
            codec: None,
            eval_data: None,
        }
    }
}

impl TrainConfig {
    pub fn ref_strategy(&self) -> Result<RefStrategy> {
        RefStrategy::new(self.strategy, self.np)
    }

    pub fn validate(&self) -> Result<()> {
        self.ref_strategy()?;
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("base_channels", self.base_channels),
            ("low_channels", self.low_channels),
            ("val_samples", self.val_samples),
            ("eval_ddim_steps", self.eval_ddim_steps),
            ("eval_clips", self.eval_clips),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        if self.freeze_k > crate::audiofeat::AUDIO_LAYERS {
            return Err(Error::InvalidArgument(format!(
                "freeze_k {} exceeds {} audio layers",
                self.freeze_k,
                crate::audiofeat::AUDIO_LAYERS
            )));
        }
        if self.eval_frames < crate::evalkit::MIN_SYNC_FRAMES {
            return Err(Error::InvalidArgument(format!(
                "eval_frames must be at least {}",
                crate::evalkit::MIN_SYNC_FRAMES
            )));
        }
        if self.schedule.ddim_steps == 0 || self.eval_ddim_steps > self.schedule.steps {
            return Err(Error::InvalidArgument("DDIM step counts must lie in 1..=schedule.steps".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key value` overrides, addressing nested fields as `schedule.steps`.
    /// Values parse as JSON, falling back to a plain string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
            let mut slot = &mut doc;
            for part in key.replace('-', "_").split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown config key {key:?}")))?;
            }
            *slot = value;
        }
        let cfg: Self =
            serde_json::from_value(doc).map_err(|e| Error::InvalidArgument(format!("invalid override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
