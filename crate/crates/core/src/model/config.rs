use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How tokens attend to each other inside an encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMode {
    /// Every token attends to every token across all frames and patches.
    #[serde(rename = "full")]
    FullSpaceTime,
    /// Spatial sub-step (same frame) followed by a temporal sub-step (same patch).
    #[serde(rename = "s-t")]
    SpaceThenTime,
    /// Temporal sub-step followed by a spatial sub-step.
    #[serde(rename = "t-s")]
    TimeThenSpace,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [
        AttentionMode::FullSpaceTime,
        AttentionMode::SpaceThenTime,
        AttentionMode::TimeThenSpace,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AttentionMode::FullSpaceTime => "full",
            AttentionMode::SpaceThenTime => "s-t",
            AttentionMode::TimeThenSpace => "t-s",
        }
    }

    /// Attention sub-steps (each with its own weights) per encoder block.
    pub fn sub_steps(self) -> usize {
        match self {
            AttentionMode::FullSpaceTime => 1,
            _ => 2,
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AttentionMode::FullSpaceTime),
            "s-t" => Ok(AttentionMode::SpaceThenTime),
            "t-s" => Ok(AttentionMode::TimeThenSpace),
            other => Err(Error::Config(format!(
                "unknown attention mode {other:?} (expected full, s-t or t-s)"
            ))),
        }
    }
}

/// Denominator of the attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreScale {
    /// `1/sqrt(dim)`, the model width.
    ModelDim,
    /// `1/sqrt(head_dim)`, the usual multi-head convention.
    HeadDim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub n_bins: usize,
    pub mlp_ratio: usize,
    pub attention: AttentionMode,
    pub score_scale: ScoreScale,
    pub ln_eps: f64,
    /// Standard deviation of the truncated-normal weight initializer.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full_size()
    }
}

impl ModelConfig {
    /// The full-size configuration: 4 frames of 11×32×32 radiances, 4×4
    /// patches, width 512 with 8 heads, 12 blocks, 64 output bins.
    pub fn full_size() -> Self {
        Self {
            frames: 4,
            channels: 11,
            height: 32,
            width: 32,
            patch: 4,
            dim: 512,
            heads: 8,
            depth: 12,
            n_bins: 64,
            mlp_ratio: 4,
            attention: AttentionMode::FullSpaceTime,
            score_scale: ScoreScale::ModelDim,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Patches per frame.
    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Token count including the class token.
    pub fn seq_len(&self) -> usize {
        self.frames * self.patches_per_frame() + 1
    }

    /// Length of a flattened patch.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn score_scale_factor(&self) -> f64 {
        let denom = match self.score_scale {
            ScoreScale::ModelDim => self.dim,
            ScoreScale::HeadDim => self.head_dim(),
        };
        1.0 / (denom as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch size {} does not tile {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.n_bins < 2 {
            return Err(Error::Config("n_bins must be at least 2".into()));
        }
        if !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config("ln_eps must be positive and init_std non-negative".into()));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.dim;
        let hidden = self.mlp_hidden();
        let attention = 4 * d * d + 2 * d;
        let mlp = 2 * d + d * hidden + hidden + hidden * d + d;
        let block = self.attention.sub_steps() * attention + mlp;
        self.patch_len() * d + d + self.seq_len() * d + self.depth * block + d * self.n_bins + self.n_bins
    }
}
