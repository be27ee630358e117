//! Run configuration: every tunable in one flat, JSON-serializable
//! struct with `--set key=value` overrides and whole-config validation.

use serde::{Deserialize, Serialize};
use sscf_core::backbone::{BackboneConfig, BackboneVariant};
use sscf_core::losses::LossConfig;
use sscf_core::model::ModelConfig;
use sscf_core::spiking::LifParams;
use sscf_core::fewshot::{NoiseSpec, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // temporal dynamics
    pub timesteps: usize,
    pub tau: f64,
    pub v_th: f64,
    pub surrogate_width: f64,
    // backbone
    pub backbone: String,
    pub channel_divisor: usize,
    pub use_sfe: bool,
    pub use_cfc: bool,
    // attention
    pub compact_channels: usize,
    pub refine_channels: usize,
    pub attention_gamma: f64,
    // losses
    pub lambda: f64,
    pub tau_c: f64,
    // episodes
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub episodes: usize,
    pub eval_episodes: usize,
    // optimization
    pub lr: f64,
    pub momentum: f64,
    pub cosine_decay: bool,
    pub seed: u64,
    // data
    pub resolution: usize,
    pub dataset_path: Option<String>,
    pub dataset_kind: String,
    pub split_file: Option<String>,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    // noise
    pub noise_rate: f64,
    pub noise_on_support: bool,
    // logging
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            timesteps: 2,
            tau: 0.5,
            v_th: 1.0,
            surrogate_width: 1.0,
            backbone: "vggsnn".into(),
            channel_divisor: 8,
            use_sfe: true,
            use_cfc: true,
            compact_channels: 64,
            refine_channels: 16,
            attention_gamma: 5.0,
            lambda: 0.7,
            tau_c: 0.2,
            n_way: 5,
            k_shot: 1,
            q_queries: 5,
            episodes: 2000,
            eval_episodes: 200,
            lr: 0.05,
            momentum: 0.9,
            cosine_decay: true,
            seed: 42,
            resolution: 32,
            dataset_path: None,
            dataset_kind: "synthetic".into(),
            split_file: None,
            synthetic_classes: 40,
            synthetic_per_class: 20,
            train_classes: 30,
            val_classes: 0,
            test_classes: 10,
            noise_rate: 0.0,
            noise_on_support: true,
            log_every: 100,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("cannot parse {value:?} for key {key}"))
        }
        match key {
            "timesteps" => self.timesteps = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "v_th" => self.v_th = parse(key, value)?,
            "surrogate_width" => self.surrogate_width = parse(key, value)?,
            "backbone" => self.backbone = value.to_string(),
            "channel_divisor" => self.channel_divisor = parse(key, value)?,
            "use_sfe" => self.use_sfe = parse(key, value)?,
            "use_cfc" => self.use_cfc = parse(key, value)?,
            "compact_channels" => self.compact_channels = parse(key, value)?,
            "refine_channels" => self.refine_channels = parse(key, value)?,
            "attention_gamma" => self.attention_gamma = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "tau_c" => self.tau_c = parse(key, value)?,
            "n_way" => self.n_way = parse(key, value)?,
            "k_shot" => self.k_shot = parse(key, value)?,
            "q_queries" => self.q_queries = parse(key, value)?,
            "episodes" => self.episodes = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "cosine_decay" => self.cosine_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "resolution" => self.resolution = parse(key, value)?,
            "dataset_path" => self.dataset_path = Some(value.to_string()),
            "dataset_kind" => self.dataset_kind = value.to_string(),
            "split_file" => self.split_file = Some(value.to_string()),
            "synthetic_classes" => self.synthetic_classes = parse(key, value)?,
            "synthetic_per_class" => self.synthetic_per_class = parse(key, value)?,
            "train_classes" => self.train_classes = parse(key, value)?,
            "val_classes" => self.val_classes = parse(key, value)?,
            "test_classes" => self.test_classes = parse(key, value)?,
            "noise_rate" => self.noise_rate = parse(key, value)?,
            "noise_on_support" => self.noise_on_support = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Re-validates every range constraint; reports all violations, not
    /// just the first.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if self.timesteps == 0 {
            problems.push("timesteps must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            problems.push(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.v_th <= 0.0 {
            problems.push(format!("v_th must be positive, got {}", self.v_th));
        }
        if self.surrogate_width <= 0.0 {
            problems.push(format!(
                "surrogate_width must be positive, got {}",
                self.surrogate_width
            ));
        }
        if self.backbone != "vggsnn" && self.backbone != "scnn" {
            problems.push(format!(
                "backbone must be \"vggsnn\" or \"scnn\", got {:?}",
                self.backbone
            ));
        }
        if self.channel_divisor == 0 {
            problems.push("channel_divisor must be >= 1".into());
        }
        if self.compact_channels == 0 {
            problems.push("compact_channels must be >= 1".into());
        }
        if self.refine_channels == 0 {
            problems.push("refine_channels must be >= 1".into());
        }
        if self.attention_gamma <= 0.0 {
            problems.push(format!(
                "attention_gamma must be positive, got {}",
                self.attention_gamma
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            problems.push(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.tau_c <= 0.0 {
            problems.push(format!("tau_c must be positive, got {}", self.tau_c));
        }
        if self.n_way == 0 || self.k_shot == 0 || self.q_queries == 0 {
            problems.push(format!(
                "episode shape must be positive (n_way={}, k_shot={}, q_queries={})",
                self.n_way, self.k_shot, self.q_queries
            ));
        }
        if self.resolution < 16 {
            problems.push(format!("resolution must be at least 16, got {}", self.resolution));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            problems.push(format!("noise_rate must lie in [0, 1], got {}", self.noise_rate));
        }
        if self.dataset_kind != "synthetic"
            && self.dataset_kind != "images"
            && self.dataset_kind != "events"
        {
            problems.push(format!(
                "dataset_kind must be synthetic|images|events, got {:?}",
                self.dataset_kind
            ));
        }
        if self.dataset_kind != "synthetic" && self.dataset_path.is_none() {
            problems.push(format!(
                "dataset_kind {:?} requires dataset_path",
                self.dataset_kind
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    pub fn lif(&self) -> Result<LifParams, String> {
        LifParams::new(self.tau, self.v_th, self.surrogate_width).map_err(|e| e.to_string())
    }

    pub fn model_config(&self) -> Result<ModelConfig, String> {
        let mut backbone = match self.backbone.as_str() {
            "vggsnn" => BackboneConfig::vggsnn(self.timesteps, 1, self.channel_divisor),
            "scnn" => BackboneConfig::scnn(self.timesteps, 1, self.channel_divisor),
            other => return Err(format!("unknown backbone {other:?}")),
        };
        backbone.lif = self.lif()?;
        debug_assert!(matches!(
            backbone.variant,
            BackboneVariant::Vggsnn | BackboneVariant::Scnn
        ));
        Ok(ModelConfig {
            backbone,
            input_hw: (self.resolution, self.resolution),
            use_sfe: self.use_sfe,
            use_cfc: self.use_cfc,
            compact_channels: self.compact_channels,
            refine_channels: self.refine_channels,
            attention_gamma: self.attention_gamma,
            head_classes: self.train_classes.max(1),
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_queries: self.q_queries,
            episodes: self.episodes,
            lr: self.lr,
            momentum: self.momentum,
            cosine_decay: self.cosine_decay,
            loss: LossConfig {
                lambda: self.lambda,
                tau_c: self.tau_c,
                num_classes_train: self.train_classes.max(1),
            },
            seed: self.seed,
            train_noise: None,
            log_every: self.log_every,
        }
    }

    pub fn noise(&self) -> Option<NoiseSpec> {
        if self.noise_rate > 0.0 {
            Some(NoiseSpec {
                rate: self.noise_rate,
            })
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.set("lambda", "0.4").unwrap();
        cfg.set("timesteps", "8").unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("not_a_key", "1").is_err());
    }

    #[test]
    fn validation_reports_every_violation() {
        let mut cfg = RunConfig::default();
        cfg.lambda = 1.5;
        cfg.tau = 0.0;
        cfg.resolution = 8;
        let problems = cfg.validate().unwrap_err();
        assert_eq!(problems.len(), 3, "{problems:?}");
    }
}
