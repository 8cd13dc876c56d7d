//! Run configuration: hyperparameters, ablation axes, and the flat
//! `key=value` config-file format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::FusionMode;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input size in pixels.
    pub s: usize,
    /// Backbone feature width (global feature channels).
    pub c: usize,
    /// ViT embedding dimension.
    pub d: usize,
    /// ViT depth (number of transformer blocks).
    pub l: usize,
    pub heads: usize,
    pub adapter_enabled: bool,
    pub fusion_mode: FusionMode,
    pub cbrnet_enabled: bool,
    /// BCE weight in the total loss; the soft-Dice term gets `1 - alpha`.
    pub alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
    pub train_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            s: 64,
            c: 64,
            d: 64,
            l: 4,
            heads: 4,
            adapter_enabled: true,
            fusion_mode: FusionMode::AtteFfb,
            cbrnet_enabled: true,
            alpha: 0.5,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 40,
            seed: 42,
            freeze_backbone: false,
            train_fraction: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s < 16 || self.s % 16 != 0 {
            return Err(Error::config(format!("s={} must be >=16 and divisible by 16", self.s)));
        }
        if self.c % 8 != 0 || self.c == 0 {
            return Err(Error::config(format!("c={} must be a positive multiple of 8", self.c)));
        }
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::config(format!("d={} must be positive and even", self.d)));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "heads={} must divide d={}",
                self.heads, self.d
            )));
        }
        if self.l == 0 {
            return Err(Error::config("l must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha={} must lie in [0,1]", self.alpha)));
        }
        if self.fusion_mode != FusionMode::None && !self.cbrnet_enabled {
            return Err(Error::config(
                "fusion_mode atteffb/add requires cbrnet_enabled=true".to_string(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be >= 1".to_string()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config(format!(
                "train_fraction={} must lie in (0,1]",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Serialize as the flat `key=value` file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "s={}", self.s);
        let _ = writeln!(s, "c={}", self.c);
        let _ = writeln!(s, "d={}", self.d);
        let _ = writeln!(s, "l={}", self.l);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "adapter_enabled={}", self.adapter_enabled);
        let _ = writeln!(s, "fusion_mode={}", self.fusion_mode);
        let _ = writeln!(s, "cbrnet_enabled={}", self.cbrnet_enabled);
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "freeze_backbone={}", self.freeze_backbone);
        let _ = writeln!(s, "train_fraction={}", self.train_fraction);
        s
    }

    /// Parse the flat format: one `key=value` per line, `#` comments and
    /// blank lines allowed, unknown keys rejected. Missing keys keep their
    /// defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("config line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::config(format!("config line {}: invalid {what} '{value}'", lineno + 1))
            };
            match key {
                "s" => cfg.s = value.parse().map_err(|_| bad("integer"))?,
                "c" => cfg.c = value.parse().map_err(|_| bad("integer"))?,
                "d" => cfg.d = value.parse().map_err(|_| bad("integer"))?,
                "l" => cfg.l = value.parse().map_err(|_| bad("integer"))?,
                "heads" => cfg.heads = value.parse().map_err(|_| bad("integer"))?,
                "adapter_enabled" => cfg.adapter_enabled = value.parse().map_err(|_| bad("bool"))?,
                "fusion_mode" => cfg.fusion_mode = value.parse()?,
                "cbrnet_enabled" => cfg.cbrnet_enabled = value.parse().map_err(|_| bad("bool"))?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad("number"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("number"))?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad("number"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("integer"))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("integer"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
                "freeze_backbone" => cfg.freeze_backbone = value.parse().map_err(|_| bad("bool"))?,
                "train_fraction" => cfg.train_fraction = value.parse().map_err(|_| bad("number"))?,
                other => {
                    return Err(Error::config(format!(
                        "config line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// The four ablation rows, in reporting order.
    pub fn ablation_variants(&self) -> Vec<(String, ModelConfig)> {
        let full = ModelConfig {
            adapter_enabled: true,
            fusion_mode: FusionMode::AtteFfb,
            cbrnet_enabled: true,
            ..self.clone()
        };
        let wo_adapter = ModelConfig {
            adapter_enabled: false,
            ..full.clone()
        };
        let wo_atteffb = ModelConfig {
            fusion_mode: FusionMode::Add,
            ..full.clone()
        };
        let wo_cbr = ModelConfig {
            fusion_mode: FusionMode::None,
            cbrnet_enabled: false,
            ..full.clone()
        };
        vec![
            ("full".to_string(), full),
            ("wo_adapter".to_string(), wo_adapter),
            ("wo_atteffb".to_string(), wo_atteffb),
            ("wo_cbrnet_atteffb".to_string(), wo_cbr),
        ]
    }
}
