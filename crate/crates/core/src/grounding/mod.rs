//! Visual prompt injection, feature upsampling and mask decoding.

use serde::{Deserialize, Serialize};

use crate::backbone::upsample_blocks;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::numerics::{ops, Bound, Tape, Tensor, Var};

/// Prompt `<VP_index>` with its region at patch resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualPrompt {
    pub index: usize,
    pub mask: BinaryMask,
}

impl VisualPrompt {
    pub fn new(index: usize, mask: BinaryMask) -> Self {
        Self { index, mask }
    }
}

/// Checks grid shape, index range and index uniqueness, and returns the
/// prompts sorted by index.
pub fn check_prompts<'a>(
    prompts: &'a [VisualPrompt],
    grid: (usize, usize),
    num_prompts: usize,
) -> Result<Vec<&'a VisualPrompt>> {
    let mut sorted: Vec<&VisualPrompt> = prompts.iter().collect();
    sorted.sort_by_key(|p| p.index);
    for (i, p) in sorted.iter().enumerate() {
        if p.index == 0 || p.index > num_prompts {
            return Err(Error::data(format!(
                "visual prompt index {} outside 1..={num_prompts}",
                p.index
            )));
        }
        if p.mask.dims() != grid {
            return Err(Error::data(format!(
                "visual prompt {} has grid {:?}, expected {grid:?}",
                p.index,
                p.mask.dims()
            )));
        }
        if i > 0 && sorted[i - 1].index == p.index {
            return Err(Error::data(format!("duplicate visual prompt index {}", p.index)));
        }
    }
    Ok(sorted)
}

/// Adds `vp_embeddings[i - 1]` to every vision token covered by prompt `i`.
///
/// `vision` is `[(h·w)×C]` in raster order and `vp_embeddings` is `[N×C]`.
/// With no prompts the input handle is returned unchanged.
pub fn inject_visual_prompts(
    tape: &mut Tape,
    vision: Var,
    vp_embeddings: Var,
    prompts: &[VisualPrompt],
    grid: (usize, usize),
) -> Result<Var> {
    let n = tape.value(vp_embeddings).shape()[0];
    let tokens = tape.value(vision).shape()[0];
    if tokens != grid.0 * grid.1 {
        return Err(Error::shape(
            "inject_visual_prompts",
            format!("{tokens} vision tokens for a {grid:?} grid"),
        ));
    }
    let sorted = check_prompts(prompts, grid, n)?;
    if sorted.is_empty() {
        return Ok(vision);
    }
    let rows: Vec<usize> = sorted.iter().map(|p| p.index - 1).collect();
    let groups: Vec<Vec<usize>> = sorted.iter().map(|p| p.mask.on_indices()).collect();
    let src = tape.gather_rows(vp_embeddings, &rows)?;
    tape.scatter_add_rows(vision, src, &groups)
}

/// Tape-free form of [`inject_visual_prompts`].
pub fn inject_visual_prompts_tensor(
    vision: &Tensor,
    vp_embeddings: &Tensor,
    prompts: &[VisualPrompt],
    grid: (usize, usize),
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(vision.clone());
    let e = tape.constant(vp_embeddings.clone());
    let out = inject_visual_prompts(&mut tape, v, e, prompts, grid)?;
    Ok(tape.value(out).clone())
}

/// `[(h·w)×C]` raster tokens to a `[C×h×w]` feature map.
pub fn reshape_vision_hidden(tape: &mut Tape, hidden: Var, grid: (usize, usize)) -> Result<Var> {
    let (t, c) = tape.value(hidden).rows_cols();
    if t != grid.0 * grid.1 {
        return Err(Error::shape(
            "reshape_vision_hidden",
            format!("{t} tokens cannot fill a {}x{} grid", grid.0, grid.1),
        ));
    }
    let ct = tape.transpose(hidden)?;
    tape.reshape(ct, &[c, grid.0, grid.1])
}

pub fn reshape_vision_hidden_tensor(hidden: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let f = reshape_vision_hidden(&mut tape, h, grid)?;
    Ok(tape.value(f).clone())
}

/// Inverse of [`reshape_vision_hidden`].
pub fn flatten_features(features: &Tensor) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("flatten_features", format!("expected CxHxW, got {s:?}")));
    }
    ops::transpose(&features.reshape([s[0], s[1] * s[2]])?)
}

/// Stride-`s` features `[C×h×w]` to stride-4 features `[C×(h·s/4)×(w·s/4)]`.
///
/// Each of the `log2(s/4)` blocks is a 2×2 stride-2 transposed convolution,
/// a 3×3 depthwise convolution, and GELU, with per-channel biases after
/// both convolutions.
pub fn upsample_module(tape: &mut Tape, bound: &Bound, f_l: Var, stride: usize) -> Result<Var> {
    let mut x = f_l;
    for b in 0..upsample_blocks(stride)? {
        let p = |n: &str| bound.var(&format!("up.{b}.{n}"));
        x = tape.conv_transpose2d(x, p("deconv")?, 2)?;
        x = tape.add_channel_bias(x, p("deconv_bias")?)?;
        x = tape.depthwise_conv2d(x, p("dw")?)?;
        x = tape.add_channel_bias(x, p("dw_bias")?)?;
        x = tape.gelu(x);
    }
    Ok(x)
}

/// Mask logits `[K×h×w]` with the sequence positions they came from.
#[derive(Clone, Debug)]
pub struct MaskLogits {
    pub logits: Tensor,
    pub seg_token_positions: Vec<usize>,
}

impl MaskLogits {
    pub fn count(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.logits.shape();
        (s[1], s[2])
    }
}

/// `logits[k, y, x] = Q[k] · F_h[:, y, x]`.
pub fn predict_masks(tape: &mut Tape, q: Var, f_h: Var) -> Result<Var> {
    let fs = tape.value(f_h).shape().to_vec();
    let (k, c) = tape.value(q).rows_cols();
    if fs.len() != 3 || fs[0] != c {
        return Err(Error::shape(
            "predict_masks",
            format!("queries [{k}x{c}] against features {fs:?}"),
        ));
    }
    let flat = tape.reshape(f_h, &[c, fs[1] * fs[2]])?;
    let m = tape.matmul(q, flat)?;
    tape.reshape(m, &[k, fs[1], fs[2]])
}

pub fn predict_masks_tensor(q: &Tensor, f_h: &Tensor, positions: Vec<usize>) -> Result<MaskLogits> {
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let fv = tape.constant(f_h.clone());
    let m = predict_masks(&mut tape, qv, fv)?;
    Ok(MaskLogits { logits: tape.value(m).clone(), seg_token_positions: positions })
}

/// Mean patch embedding under each prompt's mask, in the given order.
pub fn mask_pool(tape: &mut Tape, patches: Var, prompts: &[VisualPrompt]) -> Result<Var> {
    let groups = prompts
        .iter()
        .map(|p| {
            let g = p.mask.on_indices();
            if g.is_empty() {
                Err(Error::data(format!("visual prompt {} has an empty mask", p.index)))
            } else {
                Ok(g)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    tape.mask_mean(patches, &groups)
}

pub fn mask_pool_tensor(patches: &Tensor, prompts: &[VisualPrompt]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.constant(patches.clone());
    let o = mask_pool(&mut tape, p, prompts)?;
    Ok(tape.value(o).clone())
}

/// Thresholds logits at zero (ties are background), optionally after
/// bilinear resizing to `size`.
pub fn binarize_masks(logits: &MaskLogits, size: Option<(usize, usize)>) -> Result<Vec<BinaryMask>> {
    let (k, (h, w)) = (logits.count(), logits.grid());
    let resized;
    let (src, oh, ow) = match size {
        Some((oh, ow)) if (oh, ow) != (h, w) && k > 0 => {
            resized = ops::bilinear_resize(&logits.logits, oh, ow)?;
            (&resized, oh, ow)
        }
        Some((oh, ow)) if k == 0 => (&logits.logits, oh, ow),
        _ => (&logits.logits, h, w),
    };
    let plane = oh * ow;
    (0..k)
        .map(|i| {
            let bits = src.data()[i * plane..(i + 1) * plane]
                .iter()
                .map(|&v| (v > 0.0) as u8)
                .collect();
            BinaryMask::new(oh, ow, bits)
        })
        .collect()
}
