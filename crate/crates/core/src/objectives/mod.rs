//! Loss terms, distillation alignment and synthetic teacher features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ops, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Distillation weight.
    pub alpha: f32,
    /// Mask cross-entropy weight.
    pub lambda: f32,
    /// Dice weight.
    pub beta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, lambda: 2.0, beta: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("lambda", self.lambda), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherSource {
    File,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TeacherKind {
    /// Pixel-decoder-like features, matched against the upsampled features.
    M2f,
    /// Encoder-like features, matched against the low-resolution features.
    Sam2,
}

impl TeacherKind {
    pub fn key(self) -> &'static str {
        match self {
            TeacherKind::M2f => "m2f",
            TeacherKind::Sam2 => "sam2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFeatures {
    /// `[C_t1×h₁×w₁]`, target for the upsampled features.
    pub m2f: Tensor,
    /// `[C_t2×h₂×w₂]`, target for the low-resolution features.
    pub sam2: Tensor,
    pub source: TeacherSource,
}

impl TeacherFeatures {
    pub fn validate(&self) -> Result<()> {
        for (k, t) in [("m2f", &self.m2f), ("sam2", &self.sam2)] {
            if t.rank() != 3 || t.shape().iter().any(|&d| d == 0) {
                return Err(Error::data(format!("teacher {k} must be a non-empty CxHxW tensor, got {:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Mean next-token cross-entropy over masked rows; zero when none are masked.
pub fn ntp_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    tape.cross_entropy(logits, targets, mask)
}

pub struct SegLoss {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
}

/// `λ·BCE + β·dice` on logits already at ground-truth resolution.
pub fn seg_loss(tape: &mut Tape, logits: Var, gt: &Tensor, w: &LossWeights) -> Result<SegLoss> {
    if tape.value(logits).shape() != gt.shape() {
        return Err(Error::shape(
            "seg_loss",
            format!("logits {:?} vs ground truth {:?}", tape.value(logits).shape(), gt.shape()),
        ));
    }
    let ce = tape.bce_with_logits(logits, gt)?;
    let dice = tape.dice_loss(logits, gt)?;
    let a = tape.scale(ce, w.lambda);
    let b = tape.scale(dice, w.beta);
    let total = tape.add(a, b)?;
    Ok(SegLoss { total, ce, dice })
}

/// MSE between `proj · student` and the teacher resized to the student grid.
///
/// `student` is `[C×h×w]`, `proj` is `[C_t×C]`.
pub fn distill_term(tape: &mut Tape, student: Var, proj: Var, teacher: &Tensor) -> Result<Var> {
    let s = tape.value(student).shape().to_vec();
    let ct = tape.value(proj).shape()[0];
    if s.len() != 3 || teacher.rank() != 3 || teacher.shape()[0] != ct {
        return Err(Error::shape(
            "distill_loss",
            format!("student {s:?}, projection to {ct} channels, teacher {:?}", teacher.shape()),
        ));
    }
    let target = ops::bilinear_resize(teacher, s[1], s[2])?.reshape([ct, s[1] * s[2]])?;
    let flat = tape.reshape(student, &[s[0], s[1] * s[2]])?;
    let projected = tape.matmul(proj, flat)?;
    tape.mse(projected, &target)
}

/// Sum of the two alignment terms; the weight is applied in [`total_loss`].
pub fn distill_loss(
    tape: &mut Tape,
    f_h: Var,
    f_l: Var,
    teachers: &TeacherFeatures,
    proj_m2f: Var,
    proj_sam2: Var,
) -> Result<Var> {
    let a = distill_term(tape, f_h, proj_m2f, &teachers.m2f)?;
    let b = distill_term(tape, f_l, proj_sam2, &teachers.sam2)?;
    tape.add(a, b)
}

/// `ntp + seg + α·distill`, where `seg` already folds in λ and β.
pub fn total_loss(tape: &mut Tape, ntp: Var, seg: Var, distill: Var, w: &LossWeights) -> Result<Var> {
    let d = tape.scale(distill, w.alpha);
    let s = tape.add(ntp, seg)?;
    tape.add(s, d)
}

/// Scalar form of the weighted objective from its four raw components.
pub fn total_loss_value(ntp: f64, ce: f64, dice: f64, distill: f64, w: &LossWeights) -> f64 {
    ntp + (w.lambda as f64 * ce + w.beta as f64 * dice) + w.alpha as f64 * distill
}

const FILTER_RADIUS: usize = 1;

/// Deterministic stand-in for an expert feature map.
///
/// Channels `0..channels-1` are a seeded bank of 3×3×3 filters followed by
/// `tanh`; the last channel is the gradient magnitude of the grey image.
/// Per-pixel responses are average-pooled onto the `grid`, which must divide
/// the image size.
pub fn synthesize_teacher(
    image: &Tensor,
    kind: TeacherKind,
    grid: (usize, usize),
    channels: usize,
    seed: u64,
) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("synthesize_teacher", format!("expected 3xHxW image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let (gh, gw) = grid;
    if channels == 0 || gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(Error::config(format!(
            "teacher grid {gh}x{gw} with {channels} channels does not fit a {h}x{w} image"
        )));
    }
    let stream = match kind {
        TeacherKind::M2f => 1,
        TeacherKind::Sam2 => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let k = 2 * FILTER_RADIUS + 1;
    let taps = 3 * k * k;
    let bank = Tensor::randn([channels - 1, taps + 1], 1.0 / (taps as f32).sqrt(), &mut rng);

    let px = |c: usize, y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        image.at3(c, yy, xx) as f64
    };
    let grey = |y: isize, x: isize| (px(0, y, x) + px(1, y, x) + px(2, y, x)) / 3.0;

    let (ch, cw) = (h / gh, w / gw);
    let norm = (ch * cw) as f64;
    let mut out = vec![0f64; channels * gh * gw];
    for y in 0..h {
        for x in 0..w {
            let cell = (y / ch) * gw + x / cw;
            let (yi, xi) = (y as isize, x as isize);
            let r = FILTER_RADIUS as isize;
            for f in 0..channels - 1 {
                let wts = bank.row(f);
                let mut acc = wts[taps] as f64;
                let mut t = 0;
                for c in 0..3 {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            acc += wts[t] as f64 * px(c, yi + dy, xi + dx);
                            t += 1;
                        }
                    }
                }
                out[f * gh * gw + cell] += acc.tanh() / norm;
            }
            let gx = (grey(yi, xi + 1) - grey(yi, xi - 1)) / 2.0;
            let gy = (grey(yi + 1, xi) - grey(yi - 1, xi)) / 2.0;
            out[(channels - 1) * gh * gw + cell] += (gx * gx + gy * gy).sqrt() / norm;
        }
    }
    Tensor::new([channels, gh, gw], out.into_iter().map(|v| v as f32).collect())
}

/// Both synthetic teachers for one image.
pub fn synthesize_teachers(
    image: &Tensor,
    m2f: ((usize, usize), usize),
    sam2: ((usize, usize), usize),
    seed: u64,
) -> Result<TeacherFeatures> {
    Ok(TeacherFeatures {
        m2f: synthesize_teacher(image, TeacherKind::M2f, m2f.0, m2f.1, seed)?,
        sam2: synthesize_teacher(image, TeacherKind::Sam2, sam2.0, sam2.1, seed)?,
        source: TeacherSource::Synthetic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_components_give_four() {
        assert_eq!(total_loss_value(1.0, 1.0, 1.0, 1.0, &LossWeights::default()), 4.0);
        assert_eq!(total_loss_value(0.0, 0.0, 0.0, 0.0, &LossWeights::default()), 0.0);
    }

    #[test]
    fn negative_weight_rejected() {
        assert!(LossWeights { alpha: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn constant_image_has_flat_edges() {
        let img = Tensor::full([3, 8, 8], 0.3);
        let t = synthesize_teacher(&img, TeacherKind::M2f, (4, 4), 5, 9).unwrap();
        assert_eq!(t.shape(), &[5, 4, 4]);
        assert!(t.data()[4 * 16..].iter().all(|&v| v == 0.0));
        let again = synthesize_teacher(&img, TeacherKind::M2f, (4, 4), 5, 9).unwrap();
        assert!(t.bit_eq(&again));
    }

    #[test]
    fn offset_teacher_gives_unit_mse() {
        let mut tape = Tape::new();
        let student = Tensor::from_fn([2, 3, 3], |i| i as f32 * 0.1);
        let teacher = Tensor::from_fn([2, 3, 3], |i| i as f32 * 0.1 + 1.0);
        let s = tape.leaf(student);
        let eye = tape.leaf(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = distill_term(&mut tape, s, eye, &teacher).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-6);
    }
}
