//! The full model: patch projection, prompt injection, transformer,
//! language head, upsampled mask features and mask decoding.

use crate::backbone::{
    build_attention_mask, init_params, lm_logits, patchify_project, transformer_stack, vocab, ModelConfig,
    PromptMode, Role, TokenSequence, Vocab,
};
use crate::error::{Error, Result};
use crate::grounding::{
    binarize_masks, check_prompts, inject_visual_prompts, mask_pool, predict_masks, reshape_vision_hidden,
    upsample_module, MaskLogits, VisualPrompt,
};
use crate::mask::BinaryMask;
use crate::numerics::{ops, Bound, ParamSet, Tape, Tensor, Var};
use crate::objectives::{distill_loss, ntp_loss, seg_loss, total_loss, LossWeights, TeacherFeatures};

/// Which rows get language-model logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LogitRows {
    None,
    All,
    Last,
    Rows(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub logits: LogitRows,
    /// Build the low- and high-resolution feature maps and mask logits.
    pub features: bool,
}

/// Handles into the tape for one forward pass.
pub struct ForwardOutput {
    pub hidden: Var,
    pub logits: Option<Var>,
    pub logit_rows: Vec<usize>,
    pub vision_hidden: Option<Var>,
    pub seg_positions: Vec<usize>,
    pub seg_hidden: Option<Var>,
    pub f_l: Option<Var>,
    pub f_h: Option<Var>,
    pub mask_logits: Option<Var>,
}

/// One supervised example ready for the model.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub image: Tensor,
    pub seq: TokenSequence,
    pub prompts: Vec<VisualPrompt>,
    /// `[K×H×W]`, one mask per `[SEG]` position in order.
    pub gt_masks: Tensor,
    pub teacher: Option<TeacherFeatures>,
}

/// Scalar handles of every loss component.
pub struct LossParts {
    pub total: Var,
    pub ntp: Var,
    pub ce: Var,
    pub dice: Var,
    pub distill: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Generation {
    /// Prefix, generated tokens, and a forced `[SEG]` if one was appended.
    pub seq: TokenSequence,
    /// Newly generated ids, excluding the end token.
    pub new_ids: Vec<usize>,
    pub text: String,
    pub forced_seg: bool,
    pub mask_logits: MaskLogits,
}

#[derive(Clone, Debug)]
pub struct PixelSail {
    cfg: ModelConfig,
    vocab: Vocab,
    params: ParamSet,
}

impl PixelSail {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let params = init_params(&cfg)?;
        Ok(Self { vocab: cfg.vocab(), cfg, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        let reference = init_params(&cfg)?;
        check_compatible(&reference, &params)?;
        Ok(Self { vocab: cfg.vocab(), cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Vision-token grid for an image of the given pixel size.
    pub fn grid_for(&self, image: &Tensor) -> Result<(usize, usize)> {
        let s = image.shape();
        let p = self.cfg.patch_size;
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("forward", format!("expected 3xHxW image, got {s:?}")));
        }
        if s[1] % p != 0 || s[2] % p != 0 {
            let near = |n: usize| (n / p).max(1) * p;
            return Err(Error::config(format!(
                "image {}x{} is not divisible by patch size {p}; nearest valid size is {}x{}",
                s[1],
                s[2],
                near(s[1]),
                near(s[2])
            )));
        }
        Ok((s[1] / p, s[2] / p))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: &Tensor,
        seq: &TokenSequence,
        prompts: &[VisualPrompt],
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let n = seq.len();
        if n > cfg.max_seq_len {
            return Err(Error::config(format!(
                "sequence of {n} tokens exceeds max_seq_len {}; truncate first",
                cfg.max_seq_len
            )));
        }
        if n == 0 {
            return Err(Error::data("empty token sequence"));
        }
        let span = seq.vision_span();
        let has_vision = !span.is_empty();
        let grid = if has_vision { self.grid_for(image)? } else { (0, 0) };
        if has_vision && span.len() != grid.0 * grid.1 {
            return Err(Error::shape(
                "forward",
                format!("vision block of {} tokens for a {}x{} patch grid", span.len(), grid.0, grid.1),
            ));
        }
        let tok = bound.var("tok_emb")?;
        let mut vision = None;
        if has_vision {
            let mut v = patchify_project(tape, image, bound.var("patch_proj")?, cfg.patch_size)?;
            if cfg.prompt_mode == PromptMode::Injection {
                if !prompts.is_empty() {
                    let vp = tape.slice_rows(tok, vocab::VP_BASE, vocab::VP_BASE + cfg.num_prompts)?;
                    v = inject_visual_prompts(tape, v, vp, prompts, grid)?;
                }
            } else {
                check_prompts(prompts, grid, cfg.num_prompts)?;
            }
            vision = Some(v);
        }

        let ids = seq.ids();
        let mut parts = Vec::new();
        if span.start > 0 {
            parts.push(tape.embedding(tok, &ids[..span.start])?);
        }
        if let Some(v) = vision {
            parts.push(v);
        }
        if span.end < n {
            parts.push(tape.embedding(tok, &ids[span.end..])?);
        }
        let mut x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };

        if cfg.prompt_mode == PromptMode::Pooling {
            if let Some(v) = vision {
                let mut rows = Vec::new();
                let mut pooled = Vec::new();
                for t in seq.positions(Role::PromptRef) {
                    let idx = self.vocab.vp_index(ids[t]).expect("prompt-ref role implies a prompt id");
                    if let Some(p) = prompts.iter().find(|p| p.index == idx) {
                        rows.push(t);
                        pooled.push(p.clone());
                    }
                }
                if !rows.is_empty() {
                    let o = mask_pool(tape, v, &pooled)?;
                    x = tape.overwrite_rows(x, o, &rows)?;
                }
            }
        }

        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.embedding(bound.var("pos_emb")?, &positions)?;
        x = tape.add(x, pos)?;
        let mask = build_attention_mask(seq, cfg.vision_attention);
        let hidden = transformer_stack(tape, bound, cfg, x, &mask)?;

        let logit_rows: Vec<usize> = match &opts.logits {
            LogitRows::None => Vec::new(),
            LogitRows::All => positions.clone(),
            LogitRows::Last => vec![n - 1],
            LogitRows::Rows(r) => r.clone(),
        };
        let logits = if logit_rows.is_empty() {
            None
        } else if logit_rows.len() == n {
            Some(lm_logits(tape, bound, hidden, None)?)
        } else {
            Some(lm_logits(tape, bound, hidden, Some(&logit_rows))?)
        };

        let vision_hidden = if has_vision { Some(tape.slice_rows(hidden, span.start, span.end)?) } else { None };
        let seg_positions = seq.seg_positions();
        let seg_hidden = if seg_positions.is_empty() {
            None
        } else {
            Some(tape.gather_rows(hidden, &seg_positions)?)
        };

        let (mut f_l, mut f_h, mut mask_logits) = (None, None, None);
        if opts.features {
            let vh = vision_hidden.ok_or_else(|| Error::data("mask features need a vision block"))?;
            let fl = reshape_vision_hidden(tape, vh, grid)?;
            let fh = upsample_module(tape, bound, fl, cfg.patch_size)?;
            if let Some(q) = seg_hidden {
                mask_logits = Some(predict_masks(tape, q, fh)?);
            }
            f_l = Some(fl);
            f_h = Some(fh);
        }

        Ok(ForwardOutput {
            hidden,
            logits,
            logit_rows,
            vision_hidden,
            seg_positions,
            seg_hidden,
            f_l,
            f_h,
            mask_logits,
        })
    }

    /// Weighted objective for one example. The distillation term is built
    /// whenever teacher features are present, even at `α = 0`.
    pub fn loss(&self, tape: &mut Tape, bound: &Bound, ex: &Example, w: &LossWeights) -> Result<LossParts> {
        let (rows, targets) = ex.seq.loss_targets();
        let k = ex.seq.seg_positions().len();
        let gs = ex.gt_masks.shape();
        if gs.len() != 3 || gs[0] != k {
            return Err(Error::data(format!(
                "example {} has {k} [SEG] tokens but ground truth {:?}",
                ex.id, gs
            )));
        }
        let needs_features = k > 0 || ex.teacher.is_some();
        let out = self.forward(
            tape,
            bound,
            &ex.image,
            &ex.seq,
            &ex.prompts,
            &ForwardOptions { logits: LogitRows::Rows(rows.clone()), features: needs_features },
        )?;
        let ntp = match out.logits {
            Some(l) => ntp_loss(tape, l, &targets, &vec![true; rows.len()])?,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        let (seg, ce, dice) = match out.mask_logits {
            Some(m) => {
                let up = tape.bilinear_resize(m, gs[1], gs[2])?;
                let s = seg_loss(tape, up, &ex.gt_masks, w)?;
                (s.total, s.ce, s.dice)
            }
            None => {
                let z = tape.constant(Tensor::scalar(0.0));
                (z, z, z)
            }
        };
        let distill = match &ex.teacher {
            Some(t) => Some(distill_loss(
                tape,
                out.f_h.expect("features requested"),
                out.f_l.expect("features requested"),
                t,
                bound.var("distill.m2f")?,
                bound.var("distill.sam2")?,
            )?),
            None => None,
        };
        let d = distill.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
        let total = total_loss(tape, ntp, seg, d, w)?;
        Ok(LossParts { total, ntp, ce, dice, distill })
    }

    /// Greedy decoding from `prefix`, then one pass for mask features.
    ///
    /// Stops at the end token, after `max_new` tokens, or at `max_seq_len`.
    /// Argmax ties go to the lowest id. With `force_seg`, a `[SEG]` is
    /// appended when none was produced.
    pub fn generate(
        &self,
        image: &Tensor,
        prefix: &TokenSequence,
        prompts: &[VisualPrompt],
        max_new: usize,
        force_seg: bool,
    ) -> Result<Generation> {
        let mut seq = prefix.clone();
        let mut new_ids = Vec::new();
        let no_features = ForwardOptions { logits: LogitRows::Last, features: false };
        while new_ids.len() < max_new && seq.len() < self.cfg.max_seq_len {
            let mut tape = Tape::new();
            let bound = Bound::bind_frozen(&mut tape, &self.params);
            let out = self.forward(&mut tape, &bound, image, &seq, prompts, &no_features)?;
            let logits = tape.value(out.logits.expect("last-row logits requested"));
            let next = argmax(logits.data());
            if next == vocab::EOS {
                break;
            }
            seq.push(&self.vocab, next, false);
            new_ids.push(next);
        }
        let mut forced_seg = false;
        if force_seg && !new_ids.contains(&vocab::SEG) {
            if seq.len() >= self.cfg.max_seq_len {
                seq = seq.truncate(self.cfg.max_seq_len - 1)?;
            }
            seq.push(&self.vocab, vocab::SEG, false);
            forced_seg = true;
        }
        let mut tape = Tape::new();
        let bound = Bound::bind_frozen(&mut tape, &self.params);
        let out = self.forward(
            &mut tape,
            &bound,
            image,
            &seq,
            prompts,
            &ForwardOptions { logits: LogitRows::None, features: true },
        )?;
        let positions = out.seg_positions.clone();
        let logits = match out.mask_logits {
            Some(m) => tape.value(m).clone(),
            None => {
                let (h, w) = self.cfg_mask_grid(image);
                Tensor::zeros([0, h, w])
            }
        };
        // only [SEG] tokens produced in this turn decode to masks
        let first_new = prefix.len();
        let keep: Vec<usize> = positions
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= first_new)
            .map(|(i, _)| i)
            .collect();
        let (h4, w4) = (logits.shape()[1], logits.shape()[2]);
        let plane = h4 * w4;
        let mut data = Vec::with_capacity(keep.len() * plane);
        for &i in &keep {
            data.extend_from_slice(&logits.data()[i * plane..(i + 1) * plane]);
        }
        let mask_logits = MaskLogits {
            logits: Tensor::new([keep.len(), h4, w4], data)?,
            seg_token_positions: keep.iter().map(|&i| positions[i]).collect(),
        };
        let text = self.vocab.decode(&new_ids);
        Ok(Generation { seq, new_ids, text, forced_seg, mask_logits })
    }

    fn cfg_mask_grid(&self, image: &Tensor) -> (usize, usize) {
        let s = image.shape();
        (s[1] / 4, s[2] / 4)
    }

    /// Answers one question about `image` and decodes full-resolution masks.
    pub fn answer(
        &self,
        image: &Tensor,
        question: &str,
        prompts: &[VisualPrompt],
        max_new: usize,
        force_seg: bool,
    ) -> Result<(Generation, Vec<BinaryMask>)> {
        let grid = self.grid_for(image)?;
        let prefix = TokenSequence::conversation(&self.vocab, grid.0 * grid.1, &[], Some(question))?;
        let prefix = prefix.truncate(self.cfg.max_seq_len)?;
        let g = self.generate(image, &prefix, prompts, max_new, force_seg)?;
        let s = image.shape();
        let masks = binarize_masks(&g.mask_logits, Some((s[1], s[2])))?;
        Ok((g, masks))
    }

    /// Low-resolution and upsampled feature maps for an image with an
    /// otherwise empty conversation.
    pub fn features(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let grid = self.grid_for(image)?;
        let seq = TokenSequence::conversation(&self.vocab, grid.0 * grid.1, &[], None)?;
        let mut tape = Tape::new();
        let bound = Bound::bind_frozen(&mut tape, &self.params);
        let out = self.forward(
            &mut tape,
            &bound,
            image,
            &seq,
            &[],
            &ForwardOptions { logits: LogitRows::None, features: true },
        )?;
        let f_l = tape.value(out.f_l.expect("features requested")).clone();
        let f_h = tape.value(out.f_h.expect("features requested")).clone();
        Ok((f_l, f_h))
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// First name whose presence or shape differs between two parameter sets.
pub fn check_compatible(expected: &ParamSet, actual: &ParamSet) -> Result<()> {
    for (name, t) in expected.iter() {
        match actual.get(name) {
            Ok(a) if a.shape() == t.shape() => {}
            Ok(a) => {
                return Err(Error::checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    t.shape()
                )))
            }
            Err(_) => return Err(Error::checkpoint(format!("parameter {name} is missing"))),
        }
    }
    if let Some(extra) = actual.names().find(|n| !expected.contains(n)) {
        return Err(Error::checkpoint(format!("unexpected parameter {extra}")));
    }
    Ok(())
}

/// Stacks masks into a `[K×H×W]` target tensor.
pub fn stack_masks(masks: &[BinaryMask], h: usize, w: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dims() != (h, w) {
            return Err(Error::data(format!("mask {:?} does not match image {h}x{w}", m.dims())));
        }
        data.extend(m.bits().iter().map(|&b| b as f32));
    }
    Tensor::new([masks.len(), h, w], data)
}

/// Upsampled mask logits to probabilities; used by tests and tools.
pub fn mask_probabilities(logits: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    Ok(ops::sigmoid(&ops::bilinear_resize(logits, h, w)?))
}
