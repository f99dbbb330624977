//! `key = value` run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sifall_core::fallnet::{FallNetConfig, TrainConfig};
use sifall_core::online::{MeanShiftConfig, OnlineConfig, ThresholdConfig};
use sifall_core::AugmentPlan;

use crate::GatewayError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,

    pub latent: usize,
    pub widths: Vec<usize>,
    pub kl_weight: f64,
    pub dc_bins: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Benign traces simulated for pretraining; each holds four activities.
    pub train_traces: usize,

    pub ema_weight: f64,
    pub history: usize,
    pub env_change: f64,
    pub buffer_capacity: usize,
    pub pca_dims: usize,
    pub far_factor: f64,
    pub quarantine_cap: usize,
    pub retrain_steps: usize,
    pub retrain_lr: f64,
    pub retrain_on_normal: bool,

    pub listen: String,
    pub queue_depth: usize,
    /// `fsync` the event log after every append.
    pub fsync: bool,
    /// Evaluation window in stream seconds.
    pub window_s: f64,
    /// Verdicts in the rolling false-positive rate.
    pub rolling_verdicts: usize,
    /// Versioned model files kept on disk besides the base model.
    pub keep_models: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let net = FallNetConfig::default();
        let online = OnlineConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            latent: net.latent,
            widths: net.widths,
            kl_weight: net.kl_weight,
            dc_bins: net.dc_bins,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr,
            train_traces: 52,
            ema_weight: online.thresholds.ema_weight,
            history: online.thresholds.history,
            env_change: online.thresholds.env_change,
            buffer_capacity: online.buffer_capacity,
            pca_dims: online.pca_dims,
            far_factor: online.far_factor,
            quarantine_cap: online.quarantine_cap,
            retrain_steps: online.retrain_steps,
            retrain_lr: online.retrain_lr,
            retrain_on_normal: online.retrain_on_normal,
            listen: "127.0.0.1:8080".into(),
            queue_depth: 64,
            fsync: true,
            window_s: 1200.0,
            rolling_verdicts: 20,
            keep_models: 2,
        }
    }
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        let s: Settings = toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("settings serialise")
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::Config(m.to_string()));
        if self.queue_depth == 0 {
            return bad("queue_depth must be positive");
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity must be positive");
        }
        if !(self.ema_weight > 0.0 && self.ema_weight <= 1.0) {
            return bad("ema_weight must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.history == 0 {
            return bad("batch_size and history must be positive");
        }
        if !(self.window_s > 0.0) {
            return bad("window_s must be positive");
        }
        Ok(())
    }

    /// Network shape for `channels` streams of `freq_bins` bins.
    pub fn net_config(&self, channels: usize, freq_bins: usize) -> FallNetConfig {
        FallNetConfig {
            freq_bins,
            channels,
            latent: self.latent,
            widths: self.widths.clone(),
            kl_weight: self.kl_weight,
            dc_bins: self.dc_bins,
            ..FallNetConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }

    pub fn thresholds(&self) -> ThresholdConfig {
        ThresholdConfig {
            ema_weight: self.ema_weight,
            history: self.history,
            env_change: self.env_change,
        }
    }

    pub fn online_config(&self) -> OnlineConfig {
        OnlineConfig {
            thresholds: self.thresholds(),
            buffer_capacity: self.buffer_capacity,
            pca_dims: self.pca_dims,
            far_factor: self.far_factor,
            quarantine_cap: self.quarantine_cap,
            mean_shift: MeanShiftConfig::default(),
            retrain_steps: self.retrain_steps,
            retrain_lr: self.retrain_lr,
            augment: AugmentPlan::default(),
            retrain_on_normal: self.retrain_on_normal,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_partial_file_keeps_defaults() {
        let s = Settings::parse("seed = 7\n# comment\nwidths = [4, 8]\nretrain_on_normal = false\n").unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.widths, vec![4, 8]);
        assert!(!s.retrain_on_normal);
        assert_eq!(s.buffer_capacity, 50);
        assert_eq!(s.online_config().seed, 7);
    }

    #[test]
    fn test_unknown_key_rejected() {
        assert!(matches!(Settings::parse("sede = 1"), Err(GatewayError::Config(_))));
        assert!(matches!(Settings::parse("queue_depth = 0"), Err(GatewayError::Config(_))));
    }

    #[test]
    fn test_text_round_trip() {
        let s = Settings {
            seed: 3,
            lr: 2.5e-3,
            ..Settings::default()
        };
        assert_eq!(Settings::parse(&s.to_text()).unwrap(), s);
    }
}
