//! Forward kernels on plain tensors.
//!
//! Every kernel here is a pure function. Reductions accumulate in `f64` and
//! round once on output, which keeps finite-difference checks on `f32`
//! storage usable. The tape in [`super::tape`] records these kernels and
//! supplies their vector-Jacobian products.

use crate::error::{Error, Result};

use super::Tensor;

pub const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn expect_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions disagree: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0f32; m * n];
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (p, &aip) in ad[i * k..(i + 1) * k].iter().enumerate() {
            let a64 = aip as f64;
            for (o, &bv) in acc.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += a64 * bv as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    debug_assert_eq!(b.shape()[1], k);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &bd[j * k..(j + 1) * k];
            out[i * n + j] = dot(ar, br) as f32;
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(b.shape()[0], k);
    let (ad, bd) = (a.data(), b.data());
    let mut acc = vec![0f64; m * n];
    for p in 0..k {
        let br = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let a64 = ad[p * m + i] as f64;
            if a64 == 0.0 {
                continue;
            }
            for (o, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += a64 * bv as f64;
            }
        }
    }
    Tensor::from_parts(vec![m, n], acc.into_iter().map(|v| v as f32).collect())
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_rank("transpose", a, 2)?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|v| v * s).collect())
}

/// Adds `bias[C]` to every channel plane of `x[C×…]`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.shape().first().copied().unwrap_or(0);
    if bias.rank() != 1 || bias.numel() != c {
        return Err(Error::shape(
            "add_channel_bias",
            format!("bias {:?} does not match channels of {:?}", bias.shape(), x.shape()),
        ));
    }
    let plane = x.numel() / c.max(1);
    let mut out = x.data().to_vec();
    for (ch, b) in bias.data().iter().enumerate() {
        out[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    let x = x as f64;
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s as f32
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&v| sigmoid_scalar(v)).collect())
}

pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    let u = GELU_C * (x + GELU_A * x * x * x);
    (0.5 * x * (1.0 + u.tanh())) as f32
}

pub(crate) fn gelu_grad_scalar(x: f32) -> f64 {
    let x = x as f64;
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Tanh-approximated GELU.
pub fn gelu(a: &Tensor) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&v| gelu_scalar(v)).collect())
}

/// Softmax over the trailing axis, with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let (rows, cols) = x.rows_cols();
    let mut out = vec![0f32; x.numel()];
    for r in 0..rows {
        softmax_row(&x.data()[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut total = 0f64;
    let exps: Vec<f64> = row
        .iter()
        .map(|&v| {
            let e = (v as f64 - max).exp();
            total += e;
            e
        })
        .collect();
    for (o, e) in out.iter_mut().zip(exps) {
        *o = (e / total) as f32;
    }
}

/// RMS normalisation over the trailing axis, scaled by `gain`.
/// Also returns the per-row reciprocal RMS used by the backward pass.
pub fn rmsnorm(x: &Tensor, gain: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (rows, cols) = x.rows_cols();
    if gain.rank() != 1 || gain.numel() != cols {
        return Err(Error::shape(
            "rmsnorm",
            format!("gain {:?} does not match feature size of {:?}", gain.shape(), x.shape()),
        ));
    }
    let mut out = vec![0f32; x.numel()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / cols as f64;
        let ir = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(ir);
        for ((o, &v), &g) in out[r * cols..(r + 1) * cols].iter_mut().zip(row).zip(gain.data()) {
            *o = (v as f64 * ir * g as f64) as f32;
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), inv))
}

/// Row lookup: `out[t] = table[ids[t]]`.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    expect_rank("embedding", table, 2)?;
    let (v, c) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * c);
    for &id in ids {
        if id >= v {
            return Err(Error::shape(
                "embedding",
                format!("token id {id} outside table of {v} rows"),
            ));
        }
        out.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts(vec![ids.len(), c], out))
}

/// Non-overlapping transposed convolution with kernel size equal to the stride.
///
/// `x[C×h×w]`, `kernel[C×C'×k×k]` → `[C'×(h·k)×(w·k)]`.
pub fn conv_transpose2d(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    expect_rank("conv_transpose2d", x, 3)?;
    expect_rank("conv_transpose2d", kernel, 4)?;
    let ks = kernel.shape();
    let (c_in, c_out, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kh != kw || kh != stride || stride == 0 {
        return Err(Error::config(format!(
            "conv_transpose2d needs a square kernel equal to the stride, got {kh}x{kw} with stride {stride}"
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c != c_in {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input {:?} vs kernel {:?}", x.shape(), ks),
        ));
    }
    let s = stride;
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0f64; c_out * oh * ow];
    let (xd, kd) = (x.data(), kernel.data());
    for ci in 0..c_in {
        for y in 0..h {
            for xx in 0..w {
                let v = xd[(ci * h + y) * w + xx] as f64;
                if v == 0.0 {
                    continue;
                }
                for co in 0..c_out {
                    let kbase = (ci * c_out + co) * s * s;
                    for dy in 0..s {
                        let orow = (co * oh + y * s + dy) * ow + xx * s;
                        for dx in 0..s {
                            out[orow + dx] += v * kd[kbase + dy * s + dx] as f64;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![c_out, oh, ow],
        out.into_iter().map(|v| v as f32).collect(),
    ))
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    dout: &Tensor,
) -> (Tensor, Tensor) {
    let ks = kernel.shape();
    let (c_in, c_out) = (ks[0], ks[1]);
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let s = stride;
    let (oh, ow) = (h * s, w * s);
    let (xd, kd, gd) = (x.data(), kernel.data(), dout.data());
    let mut dx = vec![0f64; x.numel()];
    let mut dk = vec![0f64; kernel.numel()];
    for ci in 0..c_in {
        for y in 0..h {
            for xx in 0..w {
                let xi = (ci * h + y) * w + xx;
                let v = xd[xi] as f64;
                let mut acc = 0f64;
                for co in 0..c_out {
                    let kbase = (ci * c_out + co) * s * s;
                    for dy in 0..s {
                        let orow = (co * oh + y * s + dy) * ow + xx * s;
                        for ddx in 0..s {
                            let g = gd[orow + ddx] as f64;
                            acc += g * kd[kbase + dy * s + ddx] as f64;
                            dk[kbase + dy * s + ddx] += g * v;
                        }
                    }
                }
                dx[xi] = acc;
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx.into_iter().map(|v| v as f32).collect()),
        Tensor::from_parts(ks.to_vec(), dk.into_iter().map(|v| v as f32).collect()),
    )
}

/// Per-channel 2D cross-correlation with zero "same" padding.
///
/// `x[C×h×w]`, `kernel[C×k×k]` with odd `k`.
pub fn depthwise_conv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    expect_rank("depthwise_conv2d", x, 3)?;
    expect_rank("depthwise_conv2d", kernel, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kc, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if kh != kw || kh % 2 == 0 {
        return Err(Error::config(format!(
            "depthwise_conv2d needs an odd square kernel, got {kh}x{kw}"
        )));
    }
    if kc != c {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("input {:?} vs kernel {:?}", x.shape(), kernel.shape()),
        ));
    }
    let k = kh;
    let r = (k / 2) as isize;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0f32; x.numel()];
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        let kern = &kd[ch * k * k..(ch + 1) * k * k];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0f64;
                for i in 0..k {
                    let sy = y as isize + i as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let sx = xx as isize + j as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc += kern[i * k + j] as f64 * plane[sy as usize * w + sx as usize] as f64;
                    }
                }
                out[(ch * h + y) * w + xx] = acc as f32;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn depthwise_conv2d_backward(x: &Tensor, kernel: &Tensor, dout: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = kernel.shape()[1];
    let r = (k / 2) as isize;
    let (xd, kd, gd) = (x.data(), kernel.data(), dout.data());
    let mut dx = vec![0f64; x.numel()];
    let mut dk = vec![0f64; kernel.numel()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let g = gd[(ch * h + y) * w + xx] as f64;
                for i in 0..k {
                    let sy = y as isize + i as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let sx = xx as isize + j as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let xi = (ch * h + sy as usize) * w + sx as usize;
                        let ki = (ch * k + i) * k + j;
                        dx[xi] += g * kd[ki] as f64;
                        dk[ki] += g * xd[xi] as f64;
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx.into_iter().map(|v| v as f32).collect()),
        Tensor::from_parts(kernel.shape().to_vec(), dk.into_iter().map(|v| v as f32).collect()),
    )
}

/// One axis of a half-pixel bilinear resampling: for each output index,
/// the two source taps and the weight of the upper tap.
#[derive(Debug, Clone)]
pub(crate) struct Taps {
    pub(crate) lo: Vec<usize>,
    pub(crate) hi: Vec<usize>,
    pub(crate) frac: Vec<f64>,
}

pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Taps {
    let ratio = src as f64 / dst as f64;
    let mut taps = Taps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for o in 0..dst {
        let pos = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(pos - lo as f64);
    }
    taps
}

/// Bilinear resampling of each plane of `x[C×h×w]` to `out_h×out_w`
/// using half-pixel centres (corners not aligned) and edge clamping.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    expect_rank("bilinear_resize", x, 3)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", "output size must be positive"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear_resize", "input size must be positive"));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let d = x.data();
    let mut out = vec![0f32; c * out_h * out_w];
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = plane[y0 * w + x0] as f64 * (1.0 - fx) + plane[y0 * w + x1] as f64 * fx;
                let bot = plane[y1 * w + x0] as f64 * (1.0 - fx) + plane[y1 * w + x1] as f64 * fx;
                out[(ch * out_h + oy) * out_w + ox] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

pub(crate) fn bilinear_resize_backward(in_shape: &[usize], dout: &Tensor) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (out_h, out_w) = (dout.shape()[1], dout.shape()[2]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let g = dout.data();
    let mut dx = vec![0f64; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let v = g[(ch * out_h + oy) * out_w + ox] as f64;
                dx[base + y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dx[base + y0 * w + x1] += v * (1.0 - fy) * fx;
                dx[base + y1 * w + x0] += v * fy * (1.0 - fx);
                dx[base + y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx.into_iter().map(|v| v as f32).collect())
}

/// Multi-head scaled dot-product attention over `q,k,v[T×C]`.
///
/// `allowed[i*T + j]` says whether query `i` may attend to key `j`; every
/// row must allow at least one key. Returns the output and the attention
/// probabilities `[heads×T×T]` (zero where disallowed).
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    allowed: &[bool],
    heads: usize,
) -> Result<(Tensor, Vec<f32>)> {
    expect_rank("attention", q, 2)?;
    expect_same("attention", q, k)?;
    expect_same("attention", q, v)?;
    let (t, c) = (q.shape()[0], q.shape()[1]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(format!("{c} channels cannot split into {heads} heads")));
    }
    if allowed.len() != t * t {
        return Err(Error::shape(
            "attention",
            format!("mask has {} entries for {t} positions", allowed.len()),
        ));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut probs = vec![0f32; heads * t * t];
    let mut out = vec![0f32; t * c];
    let mut scores = vec![0f64; t];
    let mut acc = vec![0f64; dh];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let qi = &qd[i * c + off..i * c + off + dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..t {
                if allowed[i * t + j] {
                    let s = dot(qi, &kd[j * c + off..j * c + off + dh]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::shape("attention", format!("row {i} attends to nothing")));
            }
            let mut total = 0f64;
            for j in 0..t {
                if allowed[i * t + j] {
                    scores[j] = (scores[j] - max).exp();
                    total += scores[j];
                }
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            for j in 0..t {
                if allowed[i * t + j] {
                    let p = scores[j] / total;
                    prow[j] = p as f32;
                    for (a, &vv) in acc.iter_mut().zip(&vd[j * c + off..j * c + off + dh]) {
                        *a += p * vv as f64;
                    }
                }
            }
            for (o, a) in out[i * c + off..i * c + off + dh].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    Ok((Tensor::from_parts(vec![t, c], out), probs))
}

pub(crate) struct AttentionGrads {
    pub(crate) dq: Tensor,
    pub(crate) dk: Tensor,
    pub(crate) dv: Tensor,
}

pub(crate) fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f32],
    heads: usize,
    dout: &Tensor,
) -> AttentionGrads {
    let (t, c) = (q.shape()[0], q.shape()[1]);
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), dout.data());
    let mut dq = vec![0f64; t * c];
    let mut dk = vec![0f64; t * c];
    let mut dv = vec![0f64; t * c];
    let mut dp = vec![0f64; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let prow = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            let gi = &gd[i * c + off..i * c + off + dh];
            let mut weighted = 0f64;
            for j in 0..t {
                let p = prow[j] as f64;
                if p == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                dp[j] = dot(gi, &vd[j * c + off..j * c + off + dh]);
                weighted += p * dp[j];
                for (d, &g) in dv[j * c + off..j * c + off + dh].iter_mut().zip(gi) {
                    *d += p * g as f64;
                }
            }
            for j in 0..t {
                let p = prow[j] as f64;
                if p == 0.0 {
                    continue;
                }
                let ds = p * (dp[j] - weighted) * scale;
                for e in 0..dh {
                    dq[i * c + off + e] += ds * kd[j * c + off + e] as f64;
                    dk[j * c + off + e] += ds * qd[i * c + off + e] as f64;
                }
            }
        }
    }
    let wrap = |d: Vec<f64>| Tensor::from_parts(vec![t, c], d.into_iter().map(|x| x as f32).collect());
    AttentionGrads {
        dq: wrap(dq),
        dk: wrap(dk),
        dv: wrap(dv),
    }
}

/// Mean token cross-entropy of `logits[T×V]` against `targets` over the
/// positions where `mask` is set. Returns 0 when no position is selected.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f32> {
    Ok(cross_entropy_parts(logits, targets, mask)?.0 as f32)
}

/// Loss value plus the selected position count.
pub(crate) fn cross_entropy_parts(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<(f64, usize)> {
    expect_rank("cross_entropy", logits, 2)?;
    let (t, vocab) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != t || mask.len() != t {
        return Err(Error::shape(
            "cross_entropy",
            format!("{t} rows but {} targets and {} mask entries", targets.len(), mask.len()),
        ));
    }
    let mut total = 0f64;
    let mut count = 0usize;
    for r in 0..t {
        if !mask[r] {
            continue;
        }
        if targets[r] >= vocab {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {} outside vocabulary of {vocab}", targets[r]),
            ));
        }
        let row = logits.row(r);
        total += log_sum_exp(row) - row[targets[r]] as f64;
        count += 1;
    }
    if count == 0 {
        return Ok((0.0, 0));
    }
    Ok((total / count as f64, count))
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln()
}

/// Mean per-element binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<f32> {
    Ok(bce_wide(logits, target)? as f32)
}

pub(crate) fn bce_wide(logits: &Tensor, target: &Tensor) -> Result<f64> {
    expect_same("bce_with_logits", logits, target)?;
    if logits.numel() == 0 {
        return Ok(0.0);
    }
    let total: f64 = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &g)| {
            let z = z as f64;
            z.max(0.0) - z * g as f64 + (-z.abs()).exp().ln_1p()
        })
        .sum();
    Ok(total / logits.numel() as f64)
}

/// Smoothing constant of the dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

/// Dice loss `1 − (2Σpg + 1)/(Σp + Σg + 1)` on sigmoid probabilities,
/// computed per leading-axis mask and averaged over masks.
pub fn dice_loss(logits: &Tensor, target: &Tensor) -> Result<f32> {
    Ok(dice_wide(logits, target)? as f32)
}

pub(crate) fn dice_wide(logits: &Tensor, target: &Tensor) -> Result<f64> {
    expect_same("dice_loss", logits, target)?;
    let k = logits.shape().first().copied().unwrap_or(0);
    if k == 0 || logits.numel() == 0 {
        return Ok(0.0);
    }
    let plane = logits.numel() / k;
    let mut total = 0f64;
    for m in 0..k {
        let (inter, sp, sg) = dice_sums(
            &logits.data()[m * plane..(m + 1) * plane],
            &target.data()[m * plane..(m + 1) * plane],
        );
        total += 1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + sg + DICE_SMOOTH);
    }
    Ok(total / k as f64)
}

pub(crate) fn dice_sums(logits: &[f32], target: &[f32]) -> (f64, f64, f64) {
    let mut inter = 0f64;
    let mut sp = 0f64;
    let mut sg = 0f64;
    for (&z, &g) in logits.iter().zip(target) {
        let p = sigmoid_scalar(z) as f64;
        inter += p * g as f64;
        sp += p;
        sg += g as f64;
    }
    (inter, sp, sg)
}

/// Mean squared error.
pub fn mse(a: &Tensor, target: &Tensor) -> Result<f32> {
    Ok(mse_wide(a, target)? as f32)
}

pub(crate) fn mse_wide(a: &Tensor, target: &Tensor) -> Result<f64> {
    expect_same("mse", a, target)?;
    if a.numel() == 0 {
        return Ok(0.0);
    }
    let total: f64 = a
        .data()
        .iter()
        .zip(target.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(total / a.numel() as f64)
}
