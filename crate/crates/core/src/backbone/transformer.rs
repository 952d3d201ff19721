use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{upsample_blocks, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamSet, Tape, Tensor, Var};

/// Fresh parameters for `cfg`, seeded by `cfg.init_seed`.
///
/// Position embeddings and every bias start at zero; norm gains start at one.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let c = cfg.channels;
    let hidden = c * cfg.mlp_ratio;
    let p = cfg.patch_size;
    let inv = |n: usize| 1.0 / (n as f32).sqrt();
    let depth = inv(2 * cfg.layers.max(1));
    let mut ps = ParamSet::new();
    ps.insert("tok_emb", Tensor::randn([cfg.vocab_size, c], 1.0, &mut rng));
    ps.insert("pos_emb", Tensor::zeros([cfg.max_seq_len, c]));
    ps.insert("patch_proj", Tensor::randn([3 * p * p, c], inv(3 * p * p), &mut rng));
    for l in 0..cfg.layers {
        ps.insert(format!("blocks.{l}.attn_norm"), Tensor::ones([c]));
        for w in ["wq", "wk", "wv"] {
            ps.insert(format!("blocks.{l}.{w}"), Tensor::randn([c, c], inv(c), &mut rng));
        }
        ps.insert(format!("blocks.{l}.wo"), Tensor::randn([c, c], inv(c) * depth, &mut rng));
        ps.insert(format!("blocks.{l}.mlp_norm"), Tensor::ones([c]));
        ps.insert(format!("blocks.{l}.w1"), Tensor::randn([c, hidden], inv(c), &mut rng));
        ps.insert(format!("blocks.{l}.w2"), Tensor::randn([hidden, c], inv(hidden) * depth, &mut rng));
    }
    ps.insert("final_norm", Tensor::ones([c]));
    ps.insert("lm_head", Tensor::randn([c, cfg.vocab_size], inv(c), &mut rng));
    ps.insert("lm_bias", Tensor::zeros([cfg.vocab_size]));
    for b in 0..upsample_blocks(cfg.patch_size)? {
        ps.insert(format!("up.{b}.deconv"), Tensor::randn([c, c, 2, 2], inv(c), &mut rng));
        ps.insert(format!("up.{b}.deconv_bias"), Tensor::zeros([c]));
        ps.insert(format!("up.{b}.dw"), Tensor::randn([c, 3, 3], 1.0 / 3.0, &mut rng));
        ps.insert(format!("up.{b}.dw_bias"), Tensor::zeros([c]));
    }
    ps.insert("distill.m2f", Tensor::randn([cfg.teacher_m2f_channels, c], inv(c), &mut rng));
    ps.insert("distill.sam2", Tensor::randn([cfg.teacher_sam2_channels, c], inv(c), &mut rng));
    Ok(ps)
}

/// Non-overlapping `p×p` patches in raster order, each flattened as
/// `(channel, dy, dx)`.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("patchify", format!("expected 3xHxW image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        let near = |n: usize| (n / p.max(1)).max(1) * p.max(1);
        return Err(Error::config(format!(
            "image {h}x{w} is not divisible by patch size {p}; nearest valid size is {}x{}",
            near(h),
            near(w)
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let d = image.data();
    let mut out = Vec::with_capacity(gh * gw * 3 * p * p);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..3 {
                for dy in 0..p {
                    let row = (c * h + gy * p + dy) * w + gx * p;
                    out.extend_from_slice(&d[row..row + p]);
                }
            }
        }
    }
    Tensor::new([gh * gw, 3 * p * p], out)
}

/// Vision tokens `patchify(image) · proj`.
pub fn patchify_project(tape: &mut Tape, image: &Tensor, proj: Var, p: usize) -> Result<Var> {
    let patches = tape.constant(patchify(image, p)?);
    tape.matmul(patches, proj)
}

/// Pre-norm blocks over `x`; `allowed` is the row-major attention mask.
pub fn transformer_stack(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, x: Var, allowed: &[bool]) -> Result<Var> {
    let mut x = x;
    for l in 0..cfg.layers {
        let p = |n: &str| bound.var(&format!("blocks.{l}.{n}"));
        let h = tape.rmsnorm(x, p("attn_norm")?)?;
        let q = tape.matmul(h, p("wq")?)?;
        let k = tape.matmul(h, p("wk")?)?;
        let v = tape.matmul(h, p("wv")?)?;
        let a = tape.attention(q, k, v, allowed, cfg.heads)?;
        let a = tape.matmul(a, p("wo")?)?;
        x = tape.add(x, a)?;
        let h = tape.rmsnorm(x, p("mlp_norm")?)?;
        let h = tape.matmul(h, p("w1")?)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, p("w2")?)?;
        x = tape.add(x, h)?;
    }
    Ok(x)
}

/// LM logits for the selected hidden rows.
pub fn lm_logits(tape: &mut Tape, bound: &Bound, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
    let h = match rows {
        Some(r) => tape.gather_rows(hidden, r)?,
        None => hidden,
    };
    let h = tape.rmsnorm(h, bound.var("final_norm")?)?;
    let z = tape.matmul(h, bound.var("lm_head")?)?;
    // bias broadcast over rows: transpose to channel-major, add, transpose back
    let zt = tape.transpose(z)?;
    let zt = tape.add_channel_bias(zt, bound.var("lm_bias")?)?;
    tape.transpose(zt)
}
