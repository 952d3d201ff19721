use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, SEG};
use crate::error::{Error, Result};

/// Which pairs inside the vision block may attend to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisionAttention {
    /// Vision tokens see each other bidirectionally.
    Full,
    /// Plain causal attention everywhere.
    Causal,
}

/// How visual prompts reach the transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Add `<VP_i>` embeddings onto covered vision tokens.
    Injection,
    /// Replace `<VP_i>` text rows with mask-pooled patch embeddings.
    Pooling,
}

/// Minimum number of non-vision positions a config must leave room for.
pub const TEXT_BUDGET: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Patch size; also the feature stride of the vision hidden states.
    pub patch_size: usize,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Number of reserved `<VP_i>` tokens.
    pub num_prompts: usize,
    pub vision_attention: VisionAttention,
    pub prompt_mode: PromptMode,
    pub teacher_m2f_channels: usize,
    pub teacher_sam2_channels: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            channels: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            vocab_size: 512,
            max_seq_len: 256,
            num_prompts: 8,
            vision_attention: VisionAttention::Full,
            prompt_mode: PromptMode::Injection,
            teacher_m2f_channels: 16,
            teacher_sam2_channels: 16,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.channels == 0 || c.heads == 0 || c.channels % c.heads != 0 {
            return Err(Error::config(format!(
                "channels {} must be a positive multiple of heads {}",
                c.channels, c.heads
            )));
        }
        if c.patch_size == 0 || c.image_height % c.patch_size != 0 || c.image_width % c.patch_size != 0 {
            return Err(Error::config(format!(
                "image {}x{} is not divisible by patch size {}",
                c.image_height, c.image_width, c.patch_size
            )));
        }
        if c.image_height == 0 || c.image_width == 0 {
            return Err(Error::config("image size must be positive"));
        }
        upsample_blocks(c.patch_size)?;
        if c.max_seq_len < c.num_vision_tokens() + TEXT_BUDGET {
            return Err(Error::config(format!(
                "max_seq_len {} leaves no room for text after {} vision tokens",
                c.max_seq_len,
                c.num_vision_tokens()
            )));
        }
        let need = self.vocab().min_size();
        if c.vocab_size < need {
            return Err(Error::config(format!("vocab_size {} is below the minimum {need}", c.vocab_size)));
        }
        if c.mlp_ratio == 0 || c.teacher_m2f_channels == 0 || c.teacher_sam2_channels == 0 {
            return Err(Error::config("mlp_ratio and teacher channels must be positive"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.num_prompts)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn num_vision_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Spatial size of the upsampled mask features.
    pub fn mask_grid(&self) -> (usize, usize) {
        (self.image_height / 4, self.image_width / 4)
    }

    pub fn seg_id(&self) -> usize {
        SEG
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Number of stride-2 upsampling blocks taking stride `s` features to stride 4.
pub fn upsample_blocks(s: usize) -> Result<usize> {
    if s < 8 || !s.is_power_of_two() {
        return Err(Error::config(format!(
            "feature stride {s} must be a power of two no smaller than 8"
        )));
    }
    Ok((s / 4).trailing_zeros() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().num_vision_tokens(), 64);
    }

    #[test]
    fn block_counts() {
        assert_eq!(upsample_blocks(8).unwrap(), 1);
        assert_eq!(upsample_blocks(16).unwrap(), 2);
        assert_eq!(upsample_blocks(32).unwrap(), 3);
        assert!(upsample_blocks(4).is_err());
        assert!(upsample_blocks(12).is_err());
    }

    #[test]
    fn rejects_bad_heads_and_sizes() {
        let mut c = ModelConfig { heads: 3, ..Default::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { image_height: 60, ..Default::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { max_seq_len: 70, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
