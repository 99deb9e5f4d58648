//! Architecture and training configuration.
//!
//! The on-disk format is TOML with a `[model]` and a `[train]` section. Every
//! field has a default, so an empty file describes the toy preset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Focal stacks are zero-padded to this many slices.
pub const MAX_FOCAL_SLICES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Depth,
    Thermal,
    FocalStack,
}

impl Modality {
    /// Channel count of the supplementary tensor fed to the auxiliary stem.
    pub fn channels(self) -> usize {
        match self {
            Modality::Depth | Modality::Thermal => 1,
            Modality::FocalStack => 3 * MAX_FOCAL_SLICES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Depth => "depth",
            Modality::Thermal => "thermal",
            Modality::FocalStack => "focal_stack",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Modality::Depth),
            "thermal" => Ok(Modality::Thermal),
            "focal_stack" | "focal" => Ok(Modality::FocalStack),
            _ => Err(Error::Config(format!("unknown modality {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels at strides 4, 8, 16, 32.
    pub branch_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub attention_heads: usize,
    pub window_size: usize,
    pub token_dim: usize,
    pub triple_it_depth: usize,
    /// Hidden width of backbone feed-forward layers, relative to branch width.
    pub ffn_ratio: f64,
    pub input_hw: [usize; 2],
    pub modality: Modality,
    pub fusion_heads: usize,
    pub coa_reduction: usize,
    /// Residual blocks per auxiliary stage.
    pub aux_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            branch_channels: [32, 64, 128, 256],
            blocks_per_stage: [1, 1, 2, 2],
            attention_heads: 4,
            window_size: 7,
            token_dim: 128,
            triple_it_depth: 2,
            ffn_ratio: 4.0,
            input_hw: [224, 224],
            modality: Modality::Depth,
            fusion_heads: 4,
            coa_reduction: 8,
            aux_blocks: 2,
        }
    }
}

impl ModelConfig {
    /// Small preset used for training runs on a CPU: 64x64 input, widths 16..128, 64-dim tokens.
    pub fn small() -> Self {
        ModelConfig {
            branch_channels: [16, 32, 64, 128],
            blocks_per_stage: [1, 1, 1, 1],
            window_size: 8,
            token_dim: 64,
            ffn_ratio: 2.0,
            input_hw: [64, 64],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.attention_heads == 0 {
            return bad("attention_heads must be positive".into());
        }
        for (i, &c) in self.branch_channels.iter().enumerate() {
            if c == 0 || c % self.attention_heads != 0 {
                return bad(format!(
                    "branch_channels[{i}] = {c} must be positive and divisible by attention_heads = {}",
                    self.attention_heads
                ));
            }
        }
        let [h, w] = self.input_hw;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return bad(format!("input_hw {h}x{w} must be positive multiples of 32"));
        }
        if self.window_size == 0 {
            return bad("window_size must be positive".into());
        }
        if self.fusion_heads == 0 || self.token_dim == 0 || self.token_dim % self.fusion_heads != 0 {
            return bad(format!(
                "token_dim = {} must be positive and divisible by fusion_heads = {}",
                self.token_dim, self.fusion_heads
            ));
        }
        // sin/cos pairs for y and x
        if self.token_dim % 4 != 0 {
            return bad(format!("token_dim = {} must be divisible by 4", self.token_dim));
        }
        if self.triple_it_depth == 0 {
            return bad("triple_it_depth must be at least 1".into());
        }
        if !(self.ffn_ratio.is_finite() && self.ffn_ratio > 0.0) {
            return bad(format!("ffn_ratio = {} must be positive", self.ffn_ratio));
        }
        if self.coa_reduction == 0 {
            return bad("coa_reduction must be positive".into());
        }
        if self.aux_blocks == 0 {
            return bad("aux_blocks must be at least 1".into());
        }
        Ok(())
    }

    /// Spatial size of branch `level` (0-based, stride `4 * 2^level`).
    pub fn level_hw(&self, level: usize) -> (usize, usize) {
        let s = 4 << level;
        (self.input_hw[0] / s, self.input_hw[1] / s)
    }

    pub fn ffn_hidden(&self, channels: usize) -> usize {
        ((channels as f64 * self.ffn_ratio).round() as usize).max(1)
    }

    /// Deterministic text form embedded in checkpoints.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let c: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Size of the fixed training set. Ignored when `fresh_samples` is set.
    pub num_samples: usize,
    /// Draw a new batch of scenes every step instead of cycling a fixed set.
    pub fresh_samples: bool,
    pub seed: u64,
    pub noise_level: f64,
    pub supp_corruption: f64,
    /// Fraction of objects drawn only in the supplementary channel.
    pub hidden_in_primary: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub focal_slices: usize,
    pub eval_samples: usize,
    pub log_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 800,
            lr: 5e-5,
            weight_decay: 1e-4,
            batch_size: 2,
            num_samples: 8,
            fresh_samples: false,
            seed: 0,
            noise_level: 0.4,
            supp_corruption: 0.3,
            hidden_in_primary: 0.0,
            min_objects: 1,
            max_objects: 3,
            focal_slices: 5,
            eval_samples: 64,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !self.fresh_samples && self.num_samples == 0 {
            return bad("num_samples must be positive");
        }
        for (name, v) in [
            ("noise_level", self.noise_level),
            ("supp_corruption", self.supp_corruption),
            ("hidden_in_primary", self.hidden_in_primary),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if self.focal_slices == 0 || self.focal_slices > MAX_FOCAL_SLICES {
            return Err(Error::Config(format!("focal_slices must lie in 1..={MAX_FOCAL_SLICES}")));
        }
        Ok(())
    }
}

/// Contents of a harness config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl HarnessConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: HarnessConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
