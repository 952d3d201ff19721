mod common;

use pixelsail::numerics::ops;
use pixelsail::numerics::{
    adamw_step, cosine_lr, grad_check, AdamWConfig, AdamWState, ParamSet, Tape, Tensor,
};
use pixelsail::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OP_TOL: f64 = 1e-2;
const SEEDS: u64 = 10;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn every_op_passes_grad_check() {
    let mut cases = 0;
    common::op_grads::for_each_op(&mut |name, f| {
        for seed in 0..SEEDS {
            let err = f(seed);
            assert!(err <= OP_TOL, "{name}: seed {seed} rel err {err:.3e}");
        }
        cases += 1;
    });
    assert_eq!(cases, 39);
}

#[test]
fn grad_check_closed_form() {
    let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let sq = tape.mul(xv, xv).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(xv).unwrap().data(), &[2.0, 4.0]);
    let err = grad_check(|t, x| { let y = t.mul(x, x)?; Ok(t.sum(y)) }, &x).unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn grad_check_notices_a_wrong_gradient() {
    // Stop-gradient through a constant copy: the analytic gradient misses
    // one factor, so the check must report a large error.
    let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
    let err = grad_check(
        |t, x| {
            let frozen = t.constant(t.value(x).clone());
            let y = t.mul(x, frozen)?;
            Ok(t.sum(y))
        },
        &x,
    )
    .unwrap();
    assert!(err > 0.1, "{err}");
}

#[test]
fn leaf_gradients_accumulate_once_per_backward() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new([2], vec![1.0, 3.0]).unwrap());
    let y = tape.add(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let s = tape.sum(z);
    let g1 = tape.backward(s).unwrap();
    let g2 = tape.backward(s).unwrap();
    assert_eq!(g1.get(x).unwrap().data(), &[3.0, 3.0]);
    assert_eq!(g2.get(x).unwrap().data(), &[3.0, 3.0]);
}

// ---- forward oracles ----

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
            }
        }
    }
    out
}

fn assert_close(got: &[f32], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        assert!((g as f64 - w).abs() <= tol, "element {i}: {g} vs {w}");
    }
}

#[test]
fn matmul_cases() {
    let i2 = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(ops::matmul(&i2, &m).unwrap().data(), m.data());
    let sel = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
    let col = Tensor::new([2, 1], vec![5.0, 7.0]).unwrap();
    assert_eq!(ops::matmul(&sel, &col).unwrap().data(), &[5.0]);
    let mut r = rng(3);
    let a = Tensor::randn([3, 4], 1.0, &mut r);
    let b = Tensor::randn([4, 2], 1.0, &mut r);
    assert_close(ops::matmul(&a, &b).unwrap().data(), &matmul_oracle(&a, &b), 1e-6);
    let err = ops::matmul(&a, &a).unwrap_err().to_string();
    assert!(err.contains("[3, 4]"), "{err}");
}

#[test]
fn softmax_cases() {
    let x = Tensor::new([1, 2], vec![0.0, 0.0]).unwrap();
    assert_eq!(ops::softmax(&x).data(), &[0.5, 0.5]);
    let x = Tensor::new([1, 2], vec![1000.0, 0.0]).unwrap();
    assert_close(ops::softmax(&x).data(), &[1.0, 0.0], 1e-6);
    let x = Tensor::randn([1, 9], 2.0, &mut rng(8));
    let max = x.data().iter().fold(f64::MIN, |m, &v| m.max(v as f64));
    let e: Vec<f64> = x.data().iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let want: Vec<f64> = e.iter().map(|v| v / z).collect();
    assert_close(ops::softmax(&x).data(), &want, 1e-6);
}

#[test]
fn rmsnorm_cases() {
    let x = Tensor::new([1, 4], vec![2.0; 4]).unwrap();
    let g = Tensor::ones([4]);
    assert_close(ops::rmsnorm(&x, &g).unwrap().0.data(), &[1.0; 4], 1e-6);
    let z = Tensor::zeros([1, 4]);
    assert_eq!(ops::rmsnorm(&z, &g).unwrap().0.data(), &[0.0; 4]);
    let mut r = rng(4);
    let x = Tensor::randn([1, 8], 1.0, &mut r);
    let g = Tensor::randn([8], 1.0, &mut r);
    let ms: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 8.0;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    let want: Vec<f64> = x.data().iter().zip(g.data()).map(|(&v, &gv)| v as f64 * inv * gv as f64).collect();
    assert_close(ops::rmsnorm(&x, &g).unwrap().0.data(), &want, 1e-5);
}

fn conv_t_oracle(x: &Tensor, k: &Tensor, s: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = k.shape()[1];
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0f64; co * oh * ow];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x.at3(ci, y, xx) as f64;
                for o in 0..co {
                    for dy in 0..s {
                        for dx in 0..s {
                            let kv = k.data()[((ci * co + o) * s + dy) * s + dx] as f64;
                            out[(o * oh + y * s + dy) * ow + xx * s + dx] += v * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv_transpose_cases() {
    let x = Tensor::ones([1, 2, 2]);
    let k = Tensor::ones([1, 1, 2, 2]);
    let y = ops::conv_transpose2d(&x, &k, 2).unwrap();
    assert_eq!(y.shape(), &[1, 4, 4]);
    assert!(y.data().iter().all(|&v| v == 1.0));
    let y = ops::conv_transpose2d(&Tensor::zeros([1, 2, 2]), &k, 2).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let mut r = rng(5);
    let x = Tensor::randn([2, 3, 3], 1.0, &mut r);
    let k = Tensor::randn([2, 3, 2, 2], 1.0, &mut r);
    assert_close(ops::conv_transpose2d(&x, &k, 2).unwrap().data(), &conv_t_oracle(&x, &k, 2), 1e-6);
    assert!(matches!(ops::conv_transpose2d(&x, &k, 3), Err(Error::Config(_))));
}

fn depthwise_oracle(x: &Tensor, k: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ks = k.shape()[1];
    let r = (ks / 2) as isize;
    let mut out = vec![0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0f64;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = (y + dy, xx + dx);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let kv = k.data()[(ch * ks + (dy + r) as usize) * ks + (dx + r) as usize] as f64;
                        acc += kv * x.at3(ch, sy as usize, sx as usize) as f64;
                    }
                }
                out[(ch * h + y as usize) * w + xx as usize] = acc;
            }
        }
    }
    out
}

#[test]
fn depthwise_cases() {
    let mut r = rng(6);
    let x = Tensor::randn([2, 5, 4], 1.0, &mut r);
    let mut delta = Tensor::zeros([2, 3, 3]);
    delta.data_mut()[4] = 1.0;
    delta.data_mut()[13] = 1.0;
    assert!(ops::depthwise_conv2d(&x, &delta).unwrap().bit_eq(&x));
    let ones = Tensor::ones([2, 3, 3]);
    let y = ops::depthwise_conv2d(&x, &ones).unwrap();
    let window: f64 = (0..3).flat_map(|dy| (0..3).map(move |dx| (dy, dx))).map(|(dy, dx)| x.at3(1, 1 + dy, 1 + dx) as f64).sum();
    assert!((y.at3(1, 2, 2) as f64 - window).abs() < 1e-5);
    let k = Tensor::randn([2, 3, 3], 1.0, &mut r);
    assert_close(ops::depthwise_conv2d(&x, &k).unwrap().data(), &depthwise_oracle(&x, &k), 1e-6);
    let even = Tensor::ones([2, 2, 2]);
    assert!(matches!(ops::depthwise_conv2d(&x, &even), Err(Error::Config(_))));
}

#[test]
fn bilinear_cases() {
    let mut r = rng(7);
    let x = Tensor::randn([2, 3, 5], 1.0, &mut r);
    assert!(ops::bilinear_resize(&x, 3, 5).unwrap().bit_eq(&x));
    let c = Tensor::full([1, 3, 3], 0.25);
    assert!(ops::bilinear_resize(&c, 8, 5).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    // 2x upsampling with half-pixel centres: output (0,0) sits at source
    // (-0.25,-0.25), clamped to the corner pixel.
    let x = Tensor::new([1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = ops::bilinear_resize(&x, 4, 4).unwrap();
    assert_eq!(y.at3(0, 0, 0), 0.0);
    assert!((y.at3(0, 1, 1) - 0.75).abs() < 1e-6);
    assert!((y.at3(0, 3, 3) - 3.0).abs() < 1e-6);
}

#[test]
fn elementwise_cases() {
    let a = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
    let b = Tensor::new([3], vec![4.0, 0.5, -1.0]).unwrap();
    assert_eq!(ops::add(&a, &b).unwrap().data(), &[5.0, -1.5, -0.5]);
    assert_eq!(ops::mul(&a, &b).unwrap().data(), &[4.0, -1.0, -0.5]);
    let s = ops::sigmoid(&a);
    for (&v, &x) in s.data().iter().zip(a.data()) {
        assert!((v as f64 - 1.0 / (1.0 + (-(x as f64)).exp())).abs() < 1e-7);
    }
    let table = Tensor::from_fn([4, 2], |i| i as f32);
    assert_eq!(ops::embedding(&table, &[2, 0, 2]).unwrap().data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    let mut tape = Tape::new();
    let tv = tape.leaf(table);
    let e = tape.embedding(tv, &[2, 0, 2]).unwrap();
    let s = tape.sum(e);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(tv).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
}

#[test]
fn adamw_matches_direct_formula() {
    let mut r = rng(9);
    let mut p = ParamSet::new();
    p.insert("w", Tensor::randn([5], 1.0, &mut r));
    let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
    let mut st = AdamWState::new(&p);
    let mut w: Vec<f64> = p.get("w").unwrap().data().iter().map(|&v| v as f64).collect();
    let (mut m, mut v) = (vec![0f64; 5], vec![0f64; 5]);
    for t in 1..=4 {
        let g = Tensor::randn([5], 1.0, &mut r);
        let mut gs = ParamSet::new();
        gs.insert("w", g.clone());
        let lr = 0.05;
        adamw_step(&mut p, &gs, &mut st, &cfg, lr).unwrap();
        for i in 0..5 {
            let gi = g.data()[i] as f64;
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            w[i] -= lr * (mh / (vh.sqrt() + 1e-8) + 0.1 * w[i]);
        }
    }
    assert_close(p.get("w").unwrap().data(), &w, 1e-5);
}

#[test]
fn cosine_schedule_values() {
    // 100 steps, warm-up ceil(3) steps
    assert_eq!(cosine_lr(0, 100, 0.03, 4e-5), 0.0);
    assert!((cosine_lr(1, 100, 0.03, 4e-5) - 4e-5 / 3.0).abs() < 1e-18);
    assert!((cosine_lr(3, 100, 0.03, 4e-5) - 4e-5).abs() < 1e-18);
    let want = 4e-5 * 0.5 * (1.0 + (std::f64::consts::PI * 47.0 / 97.0).cos());
    assert!((cosine_lr(50, 100, 0.03, 4e-5) - want).abs() < 1e-18);
    for s in 3..99 {
        assert!(cosine_lr(s + 1, 100, 0.03, 4e-5) <= cosine_lr(s, 100, 0.03, 4e-5));
    }
}

// ---- properties ----

fn tensor_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-20.0f32..20.0, rows * cols).prop_map(move |d| Tensor::new([rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in tensor_strategy(3, 7)) {
        let y = ops::softmax(&x);
        for r in 0..3 {
            let s: f64 = y.row(r).iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn rmsnorm_output_rms_matches_gain(
        x in prop::collection::vec(-5.0f32..5.0, 8).prop_filter("nonzero", |v| v.iter().any(|&a| a.abs() > 0.1)),
        g in 0.1f32..3.0,
    ) {
        let x = Tensor::new([1, 8], x).unwrap();
        let gain = Tensor::full([8], g);
        let y = ops::rmsnorm(&x, &gain).unwrap().0;
        let rms = (y.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 8.0).sqrt();
        prop_assert!((rms - g as f64).abs() <= 1e-5, "{} vs {}", rms, g);
    }

    #[test]
    fn conv_transpose_constant_kernel_linearity(
        x in prop::collection::vec(-3.0f32..3.0, 12),
        kappa in -2.0f32..2.0,
        stride in 1usize..4,
        cout in 1usize..3,
    ) {
        let x = Tensor::new([1, 3, 4], x).unwrap();
        let k = Tensor::full([1, cout, stride, stride], kappa);
        let y = ops::conv_transpose2d(&x, &k, stride).unwrap();
        let ksum = kappa as f64 * (stride * stride) as f64;
        let (oh, ow) = (3 * stride, 4 * stride);
        for o in 0..cout {
            for py in 0..3 {
                for px in 0..4 {
                    let mut acc = 0f64;
                    for dy in 0..stride {
                        for dx in 0..stride {
                            acc += y.data()[(o * oh + py * stride + dy) * ow + px * stride + dx] as f64;
                        }
                    }
                    // stride-window average pool times window area
                    let want = x.at3(0, py, px) as f64 * ksum;
                    prop_assert!((acc - want).abs() <= 1e-4 * (1.0 + want.abs()));
                }
            }
        }
    }

    #[test]
    fn forward_ops_are_deterministic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::randn([6, 8], 1.0, &mut r);
        let b = Tensor::randn([8, 8], 1.0, &mut r);
        let g = Tensor::randn([8], 1.0, &mut r);
        let img = Tensor::randn([2, 4, 4], 1.0, &mut r);
        let k = Tensor::randn([2, 2, 2, 2], 1.0, &mut r);
        let allowed = common::op_grads::causal(6);
        let run = || {
            let m = ops::matmul(&a, &b).unwrap();
            let n = ops::rmsnorm(&m, &g).unwrap().0;
            let s = ops::softmax(&n);
            let at = ops::attention(&a, &n, &s, &allowed, 2).unwrap().0;
            let up = ops::conv_transpose2d(&img, &k, 2).unwrap();
            let bl = ops::bilinear_resize(&up, 5, 3).unwrap();
            (m, n, s, at, up, bl)
        };
        let (x, y) = (run(), run());
        prop_assert!(x.0.bit_eq(&y.0) && x.1.bit_eq(&y.1) && x.2.bit_eq(&y.2));
        prop_assert!(x.3.bit_eq(&y.3) && x.4.bit_eq(&y.4) && x.5.bit_eq(&y.5));
    }
}
