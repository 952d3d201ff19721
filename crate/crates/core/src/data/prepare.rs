use std::path::Path;

use super::record::SampleRecord;
use crate::backbone::{ModelConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::grounding::check_prompts;
use crate::model::{stack_masks, Example};
use crate::objectives::TeacherFeatures;

/// Drops tail tokens past `max_len`; see [`TokenSequence::truncate`].
pub fn truncate(seq: &TokenSequence, max_len: usize) -> Result<TokenSequence> {
    seq.truncate(max_len)
}

/// Builds the model input for a record. Sequences longer than
/// `max_seq_len` are truncated and masks of dropped `[SEG]` tokens are
/// discarded with them.
pub fn prepare_example(
    record: &SampleRecord,
    cfg: &ModelConfig,
    base_dir: Option<&Path>,
    teacher: Option<TeacherFeatures>,
) -> Result<Example> {
    record.validate(Some(cfg.num_prompts))?;
    let img = record.load_image(base_dir)?;
    let p = cfg.patch_size;
    let (h, w) = (img.height(), img.width());
    if h % p != 0 || w % p != 0 {
        return Err(Error::data(format!(
            "record {}: image {h}x{w} is not divisible by patch size {p}",
            record.id
        )));
    }
    let grid = (h / p, w / p);
    check_prompts(&record.visual_prompts, grid, cfg.num_prompts)
        .map_err(|e| Error::data(format!("record {}: {e}", record.id)))?;
    let vocab = cfg.vocab();
    let turns: Vec<(String, String)> = record.conversations.iter().map(|t| (t.q.clone(), t.a.clone())).collect();
    let seq = TokenSequence::conversation(&vocab, grid.0 * grid.1, &turns, None)?.truncate(cfg.max_seq_len)?;
    let k = seq.seg_positions().len();
    let gt_masks = stack_masks(&record.gt_masks[..k], h, w)?;
    Ok(Example {
        id: record.id.clone(),
        image: img.to_tensor(),
        seq,
        prompts: record.visual_prompts.clone(),
        gt_masks,
        teacher,
    })
}
