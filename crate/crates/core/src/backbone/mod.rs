//! Joint vision/text sequence and the decoder-only transformer.

mod config;
mod sequence;
mod transformer;
pub mod vocab;

pub use config::{upsample_blocks, ModelConfig, PromptMode, VisionAttention, TEXT_BUDGET};
pub use sequence::{build_attention_mask, Role, TokenSequence, DEFAULT_MAX_LEN};
pub use transformer::{init_params, patchify, patchify_project, transformer_stack, lm_logits};
pub use vocab::Vocab;
