use pixelsail::model::PixelSail;
use pixelsail::numerics::{grad_check, Bound, ParamSet, Tape, Tensor};
use pixelsail::objectives::{
    distill_loss, distill_term, ntp_loss, seg_loss, synthesize_teacher, synthesize_teachers, total_loss,
    total_loss_value, LossWeights, TeacherKind,
};
use pixelsail::train::{load_records, RunConfig, Trainer};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scalar(t: &mut Tape, v: f32) -> pixelsail::numerics::Var {
    t.constant(Tensor::scalar(v))
}

fn binary(shape: &[usize], p: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| if r.random_bool(p) { 1.0 } else { 0.0 })
}

// ---- next-token loss ----

#[test]
fn ntp_examples() {
    let targets = [3usize, 1, 4];
    let logits = Tensor::from_fn([3, 8], |i| if i % 8 == targets[i / 8] { 60.0 } else { -60.0 });
    let mut t = Tape::new();
    let l = t.constant(logits);
    let v = ntp_loss(&mut t, l, &targets, &[true; 3]).unwrap();
    assert!(t.scalar_f64(v) < 1e-12);

    let mut t = Tape::new();
    let l = t.constant(Tensor::zeros([5, 512]));
    let v = ntp_loss(&mut t, l, &[0, 1, 2, 3, 4], &[true, false, true, false, true]).unwrap();
    assert!((t.scalar_f64(v) - 512f64.ln()).abs() < 1e-9);
    assert!((t.scalar_f64(v) - 6.238).abs() < 1e-3);

    let mut t = Tape::new();
    let l = t.constant(Tensor::zeros([2, 4]));
    let v = ntp_loss(&mut t, l, &[0, 1], &[false, false]).unwrap();
    assert_eq!(t.scalar_f64(v), 0.0);

    let mut r = rng(1);
    let logits = Tensor::randn([6, 10], 2.0, &mut r);
    let targets: Vec<usize> = (0..6).map(|_| r.random_range(0..10)).collect();
    let mask: Vec<bool> = (0..6).map(|i| i % 3 != 0).collect();
    let mut want = 0f64;
    let mut n = 0;
    for row in 0..6 {
        if !mask[row] {
            continue;
        }
        let z: Vec<f64> = logits.row(row).iter().map(|&v| v as f64).collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        want += lse - z[targets[row]];
        n += 1;
    }
    want /= n as f64;
    let mut t = Tape::new();
    let l = t.constant(logits);
    let v = ntp_loss(&mut t, l, &targets, &mask).unwrap();
    assert!((t.scalar_f64(v) - want).abs() < 1e-5);
}

// ---- segmentation loss ----

fn seg_oracle(logits: &Tensor, gt: &Tensor, w: &LossWeights) -> (f64, f64, f64) {
    let n = logits.numel() as f64;
    let bce = logits
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&z, &g)| {
            let p = 1.0 / (1.0 + (-(z as f64)).exp());
            -(g as f64 * p.ln() + (1.0 - g as f64) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n;
    let k = logits.shape()[0];
    let plane = logits.numel() / k;
    let mut dice = 0.0;
    for m in 0..k {
        let (mut i, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for j in m * plane..(m + 1) * plane {
            let p = 1.0 / (1.0 + (-(logits.data()[j] as f64)).exp());
            let g = gt.data()[j] as f64;
            i += p * g;
            sp += p;
            sg += g;
        }
        dice += 1.0 - (2.0 * i + 1.0) / (sp + sg + 1.0);
    }
    dice /= k as f64;
    (w.lambda as f64 * bce + w.beta as f64 * dice, bce, dice)
}

fn run_seg(logits: &Tensor, gt: &Tensor, w: &LossWeights) -> (f64, f64, f64) {
    let mut t = Tape::new();
    let l = t.constant(logits.clone());
    let s = seg_loss(&mut t, l, gt, w).unwrap();
    (t.scalar_f64(s.total), t.scalar_f64(s.ce), t.scalar_f64(s.dice))
}

#[test]
fn seg_loss_examples() {
    let w = LossWeights::default();
    let mut r = rng(2);
    let gt = binary(&[2, 8, 8], 0.5, &mut r);
    let sat = Tensor::from_fn([2, 8, 8], |i| if gt.data()[i] == 1.0 { 20.0 } else { -20.0 });
    let (total, _, _) = run_seg(&sat, &gt, &w);
    assert!(total < 1e-4, "{total}");

    // p = 0.5 everywhere, 32 of 64 pixels foreground
    let half = Tensor::from_fn([1, 8, 8], |i| if i < 32 { 1.0 } else { 0.0 });
    let (total, ce, dice) = run_seg(&Tensor::zeros([1, 8, 8]), &half, &w);
    let dice_closed = 1.0 - (2.0 * 16.0 + 1.0) / (32.0 + 32.0 + 1.0);
    assert!((ce - 2f64.ln()).abs() < 1e-9);
    assert!((dice - dice_closed).abs() < 1e-9);
    assert!((total - (2.0 * 2f64.ln() + 0.5 * dice_closed)).abs() < 1e-6);

    for s in 0..5 {
        let mut r = rng(20 + s);
        let logits = Tensor::randn([3, 6, 5], 2.0, &mut r);
        let gt = binary(&[3, 6, 5], 0.3, &mut r);
        let (got, want) = (run_seg(&logits, &gt, &w), seg_oracle(&logits, &gt, &w));
        assert!((got.0 - want.0).abs() < 1e-5 && (got.1 - want.1).abs() < 1e-5 && (got.2 - want.2).abs() < 1e-5);
    }

    let mut t = Tape::new();
    let l = t.constant(Tensor::zeros([1, 4, 4]));
    assert!(seg_loss(&mut t, l, &Tensor::zeros([1, 4, 5]), &w).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_in_unit_interval_and_bce_nonnegative(seed in any::<u64>(), scale in 0.1f32..30.0) {
        let mut r = rng(seed);
        let logits = Tensor::randn([2, 5, 5], scale, &mut r);
        let gt = binary(&[2, 5, 5], 0.5, &mut r);
        let (_, ce, dice) = run_seg(&logits, &gt, &LossWeights::default());
        prop_assert!(ce >= 0.0);
        prop_assert!((0.0..=1.0).contains(&dice));
    }
}

// ---- distillation ----

#[test]
fn distill_examples() {
    let mut r = rng(3);
    let student = Tensor::randn([4, 3, 3], 1.0, &mut r);
    let proj = Tensor::randn([2, 4], 1.0, &mut r);
    let flat = student.reshape([4, 9]).unwrap();
    let teacher = pixelsail::numerics::ops::matmul(&proj, &flat).unwrap().reshape([2, 3, 3]).unwrap();
    let mut t = Tape::new();
    let (s, p) = (t.constant(student.clone()), t.constant(proj));
    let v = distill_term(&mut t, s, p, &teacher).unwrap();
    assert!(t.scalar_f64(v) < 1e-12);

    let eye = Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let plus_one = Tensor::from_fn([4, 3, 3], |i| student.data()[i] + 1.0);
    let mut t = Tape::new();
    let (s, p) = (t.constant(student.clone()), t.constant(eye));
    let v = distill_term(&mut t, s, p, &plus_one).unwrap();
    assert!((t.scalar_f64(v) - 1.0).abs() < 1e-6);
}

fn bilinear64(src: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let coord = |o: usize, n: usize, on: usize| {
        let s = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (y0, y1, fy) = coord(y, h, oh);
                let (x0, x1, fx) = coord(x, w, ow);
                let v = |yy, xx| src.at3(ch, yy, xx) as f64;
                out.push((1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1)));
            }
        }
    }
    out
}

#[test]
fn distill_with_mismatched_grids_matches_oracle() {
    for s in 0..5 {
        let mut r = rng(30 + s);
        let student = Tensor::randn([3, 4, 4], 1.0, &mut r);
        let proj = Tensor::randn([5, 3], 1.0, &mut r);
        let teacher = Tensor::randn([5, 7, 3], 1.0, &mut r);
        let target = bilinear64(&teacher, 4, 4);
        let mut want = 0f64;
        for o in 0..5 {
            for p in 0..16 {
                let pr: f64 = (0..3).map(|c| proj.at2(o, c) as f64 * student.data()[c * 16 + p] as f64).sum();
                want += (pr - target[o * 16 + p]).powi(2);
            }
        }
        want /= 80.0;
        let mut t = Tape::new();
        let (sv, pv) = (t.constant(student), t.constant(proj));
        let v = distill_term(&mut t, sv, pv, &teacher).unwrap();
        assert!((t.scalar_f64(v) - want).abs() < 1e-5, "{} vs {want}", t.scalar_f64(v));
    }
}

// ---- total loss ----

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    assert_eq!(total_loss_value(1.0, 1.0, 1.0, 1.0, &w), 4.0);
    assert_eq!(total_loss_value(0.0, 0.0, 0.0, 0.0, &w), 0.0);
    let mut t = Tape::new();
    let (n, s, d) = (scalar(&mut t, 1.0), scalar(&mut t, 2.0 * 1.0 + 0.5 * 1.0), scalar(&mut t, 1.0));
    let v = total_loss(&mut t, n, s, d, &w).unwrap();
    assert_eq!(t.value(v).item(), 4.0);
}

#[test]
fn total_loss_is_affine_in_each_component() {
    let w = LossWeights { alpha: 0.3, lambda: 1.7, beta: 0.9 };
    let base = [0.4, 1.3, 0.2, 2.1];
    let slopes = [1.0, w.lambda as f64, w.beta as f64, w.alpha as f64];
    let f = |c: [f64; 4]| total_loss_value(c[0], c[1], c[2], c[3], &w);
    for k in 0..4 {
        let mut pts = Vec::new();
        for x in [0.5, 3.0] {
            let mut c = base;
            c[k] = x;
            pts.push(f(c));
        }
        let slope = (pts[1] - pts[0]) / 2.5;
        assert!((slope - slopes[k]).abs() < 1e-12, "component {k}");
        let mut c = base;
        c[k] = 0.0;
        let intercept = f(c);
        assert!((pts[0] - (intercept + 0.5 * slopes[k])).abs() < 1e-12);
    }
}

// ---- gradient checks on the composites ----

#[test]
fn loss_composites_pass_grad_check() {
    let w = LossWeights::default();
    for s in 0..10 {
        let mut r = rng(40 + s);
        let logits = Tensor::randn([4, 6, 6], 1.0, &mut r);
        let gt = binary(&[4, 6, 6], 0.4, &mut r);
        let e = grad_check(|t, x| Ok(seg_loss(t, x, &gt, &w)?.total), &logits).unwrap();
        assert!(e <= 1e-2, "seg seed {s}: {e}");

        let lg = Tensor::randn([5, 9], 1.0, &mut r);
        let targets: Vec<usize> = (0..5).map(|_| r.random_range(0..9)).collect();
        let e = grad_check(|t, x| ntp_loss(t, x, &targets, &[true, true, false, true, true]), &lg).unwrap();
        assert!(e <= 1e-2, "ntp seed {s}: {e}");

        let f_h = Tensor::randn([3, 4, 4], 1.0, &mut r);
        let f_l = Tensor::randn([3, 2, 2], 1.0, &mut r);
        let pm = Tensor::randn([2, 3], 1.0, &mut r);
        let ps = Tensor::randn([4, 3], 1.0, &mut r);
        let teachers = pixelsail::objectives::TeacherFeatures {
            m2f: Tensor::randn([2, 8, 8], 1.0, &mut r),
            sam2: Tensor::randn([4, 3, 3], 1.0, &mut r),
            source: pixelsail::objectives::TeacherSource::Synthetic,
        };
        let e = grad_check(
            |t, x| {
                let (fl, a, b) = (t.constant(f_l.clone()), t.constant(pm.clone()), t.constant(ps.clone()));
                distill_loss(t, x, fl, &teachers, a, b)
            },
            &f_h,
        )
        .unwrap();
        assert!(e <= 1e-2, "distill f_h seed {s}: {e}");
        let e = grad_check(
            |t, x| {
                let (fh, fl, b) = (t.constant(f_h.clone()), t.constant(f_l.clone()), t.constant(ps.clone()));
                distill_loss(t, fh, fl, &teachers, x, b)
            },
            &pm,
        )
        .unwrap();
        assert!(e <= 1e-2, "distill proj seed {s}: {e}");
    }
}

// ---- weight gating on the full model ----

fn model_grads(w: LossWeights) -> ParamSet {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic_n = 1;
    cfg.data.synthetic_kind = pixelsail::train::SyntheticKind::Toy;
    let (recs, base) = load_records(&cfg).unwrap();
    let tr = Trainer::new(cfg, &recs, base.as_deref()).unwrap();
    let ex = &tr.examples()[0];
    assert!(ex.teacher.is_some());
    let m: &PixelSail = tr.model();
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, m.params());
    let parts = m.loss(&mut tape, &b, ex, &w).unwrap();
    assert!(parts.distill.is_some());
    let g = tape.backward(parts.total).unwrap();
    let mut acc = m.params().zeros_like();
    b.accumulate(&g, &mut acc);
    acc
}

fn all_zero(ps: &ParamSet, prefix: &str) -> bool {
    ps.iter().filter(|(n, _)| n.starts_with(prefix)).all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
}

#[test]
fn zero_weights_zero_their_parameter_gradients() {
    let on = model_grads(LossWeights::default());
    assert!(!all_zero(&on, "distill."));
    assert!(!all_zero(&on, "up."));

    let no_distill = model_grads(LossWeights { alpha: 0.0, ..LossWeights::default() });
    assert!(all_zero(&no_distill, "distill."));

    let only_ntp = model_grads(LossWeights { alpha: 0.0, lambda: 0.0, beta: 0.0 });
    assert!(all_zero(&only_ntp, "distill."));
    assert!(all_zero(&only_ntp, "up."));
    assert!(!all_zero(&only_ntp, "lm_head"));
}

// ---- synthetic teachers ----

#[test]
fn synthetic_teacher_is_deterministic() {
    let img = Tensor::uniform([3, 32, 32], 0.0, 1.0, &mut rng(5));
    let a = synthesize_teachers(&img, ((8, 8), 6), ((2, 2), 5), 9).unwrap();
    let b = synthesize_teachers(&img, ((8, 8), 6), ((2, 2), 5), 9).unwrap();
    assert!(a.m2f.bit_eq(&b.m2f) && a.sam2.bit_eq(&b.sam2));
    assert_eq!(a.m2f.shape(), &[6, 8, 8]);
    assert_eq!(a.sam2.shape(), &[5, 2, 2]);
    let c = synthesize_teachers(&img, ((8, 8), 6), ((2, 2), 5), 10).unwrap();
    assert!(!a.m2f.bit_eq(&c.m2f));
}

#[test]
fn constant_image_has_a_zero_edge_channel() {
    let img = Tensor::full([3, 16, 16], 0.3);
    for kind in [TeacherKind::M2f, TeacherKind::Sam2] {
        let t = synthesize_teacher(&img, kind, (4, 4), 3, 1).unwrap();
        assert!(t.data()[2 * 16..].iter().all(|&v| v == 0.0));
    }
}
