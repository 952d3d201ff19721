//! Gradient checks for every differentiable tape op. Each case maps a seed
//! to the worst relative error of the analytic gradient.

use pixelsail::numerics::{grad_check, Tape, Tensor, Var};
use pixelsail::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check<'a> = &'a mut dyn FnMut(&str, &dyn Fn(u64) -> f64);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces any output to a scalar through fixed random weights so every
/// output element contributes a distinct gradient.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, Error> {
    let shape = tape.value(out).shape().to_vec();
    let w = Tensor::randn(shape, 1.0, &mut rng(seed ^ 0x5eed));
    let wv = tape.constant(w);
    let m = tape.mul(out, wv)?;
    Ok(tape.sum(m))
}

/// Calls `check` once per op case.
pub fn for_each_op(check: Check) {
    grad_matmul(check);
    grad_transpose_and_reshape(check);
    grad_elementwise(check);
    grad_channel_bias(check);
    grad_softmax_rmsnorm(check);
    grad_row_ops(check);
    grad_attention(check);
    grad_convolutions(check);
    grad_losses(check);
}


fn grad_matmul(check: Check) {
    check("matmul lhs", &|s| {
        let mut r = rng(s);
        let b = Tensor::randn([4, 3], 1.0, &mut r);
        let a = Tensor::randn([2, 4], 1.0, &mut r);
        grad_check(|t, x| { let bv = t.constant(b.clone()); let y = t.matmul(x, bv)?; probe(t, y, s) }, &a).unwrap()
    });
    check("matmul rhs", &|s| {
        let mut r = rng(s);
        let a = Tensor::randn([2, 4], 1.0, &mut r);
        let b = Tensor::randn([4, 3], 1.0, &mut r);
        grad_check(|t, x| { let av = t.constant(a.clone()); let y = t.matmul(av, x)?; probe(t, y, s) }, &b).unwrap()
    });
}

fn grad_transpose_and_reshape(check: Check) {
    check("transpose", &|s| {
        let x = Tensor::randn([3, 5], 1.0, &mut rng(s));
        grad_check(|t, x| { let y = t.transpose(x)?; probe(t, y, s) }, &x).unwrap()
    });
    check("reshape", &|s| {
        let x = Tensor::randn([3, 4], 1.0, &mut rng(s));
        grad_check(|t, x| { let y = t.reshape(x, &[2, 6])?; probe(t, y, s) }, &x).unwrap()
    });
}

fn grad_elementwise(check: Check) {
    check("add", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([3, 4], 1.0, &mut r);
        let o = Tensor::randn([3, 4], 1.0, &mut r);
        grad_check(|t, x| { let ov = t.constant(o.clone()); let y = t.add(x, ov)?; probe(t, y, s) }, &x).unwrap()
    });
    check("add self", &|s| {
        let x = Tensor::randn([5], 1.0, &mut rng(s));
        grad_check(|t, x| { let y = t.add(x, x)?; probe(t, y, s) }, &x).unwrap()
    });
    check("mul", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([3, 4], 1.0, &mut r);
        let o = Tensor::randn([3, 4], 1.0, &mut r);
        grad_check(|t, x| { let ov = t.constant(o.clone()); let y = t.mul(x, ov)?; probe(t, y, s) }, &x).unwrap()
    });
    check("mul self", &|s| {
        let x = Tensor::randn([6], 1.0, &mut rng(s));
        grad_check(|t, x| { let y = t.mul(x, x)?; probe(t, y, s) }, &x).unwrap()
    });
    check("scale", &|s| {
        let x = Tensor::randn([6], 1.0, &mut rng(s));
        grad_check(|t, x| { let y = t.scale(x, -1.7); probe(t, y, s) }, &x).unwrap()
    });
    check("sigmoid", &|s| {
        let x = Tensor::randn([2, 5], 1.5, &mut rng(s));
        grad_check(|t, x| { let y = t.sigmoid(x); probe(t, y, s) }, &x).unwrap()
    });
    check("gelu", &|s| {
        let x = Tensor::randn([2, 5], 1.5, &mut rng(s));
        grad_check(|t, x| { let y = t.gelu(x); probe(t, y, s) }, &x).unwrap()
    });
    check("sum", &|s| {
        let x = Tensor::randn([7], 1.0, &mut rng(s));
        grad_check(|t, x| { let y = t.mul(x, x)?; Ok(t.sum(y)) }, &x).unwrap()
    });
}

fn grad_channel_bias(check: Check) {
    check("channel bias x", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([3, 2, 2], 1.0, &mut r);
        let b = Tensor::randn([3], 1.0, &mut r);
        grad_check(|t, x| { let bv = t.constant(b.clone()); let y = t.add_channel_bias(x, bv)?; probe(t, y, s) }, &x).unwrap()
    });
    check("channel bias b", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([3, 2, 2], 1.0, &mut r);
        let b = Tensor::randn([3], 1.0, &mut r);
        grad_check(|t, b| { let xv = t.constant(x.clone()); let y = t.add_channel_bias(xv, b)?; probe(t, y, s) }, &b).unwrap()
    });
}

fn grad_softmax_rmsnorm(check: Check) {
    check("softmax", &|s| {
        let x = Tensor::randn([3, 5], 1.0, &mut rng(s));
        grad_check(|t, x| { let y = t.softmax(x); probe(t, y, s) }, &x).unwrap()
    });
    check("rmsnorm x", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([3, 6], 1.0, &mut r);
        let g = Tensor::randn([6], 1.0, &mut r);
        grad_check(|t, x| { let gv = t.constant(g.clone()); let y = t.rmsnorm(x, gv)?; probe(t, y, s) }, &x).unwrap()
    });
    check("rmsnorm gain", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([3, 6], 1.0, &mut r);
        let g = Tensor::randn([6], 1.0, &mut r);
        grad_check(|t, g| { let xv = t.constant(x.clone()); let y = t.rmsnorm(xv, g)?; probe(t, y, s) }, &g).unwrap()
    });
}

fn grad_row_ops(check: Check) {
    check("embedding", &|s| {
        let table = Tensor::randn([6, 4], 1.0, &mut rng(s));
        grad_check(|t, x| { let y = t.embedding(x, &[1, 4, 1, 0, 5])?; probe(t, y, s) }, &table).unwrap()
    });
    check("concat_rows", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([2, 3], 1.0, &mut r);
        let o = Tensor::randn([4, 3], 1.0, &mut r);
        grad_check(|t, x| { let ov = t.constant(o.clone()); let y = t.concat_rows(&[ov, x, x])?; probe(t, y, s) }, &x).unwrap()
    });
    check("slice_rows", &|s| {
        let x = Tensor::randn([6, 3], 1.0, &mut rng(s));
        grad_check(|t, x| { let y = t.slice_rows(x, 1, 4)?; probe(t, y, s) }, &x).unwrap()
    });
    check("gather_rows", &|s| {
        let x = Tensor::randn([5, 3], 1.0, &mut rng(s));
        grad_check(|t, x| { let y = t.gather_rows(x, &[4, 0, 4, 2])?; probe(t, y, s) }, &x).unwrap()
    });
    check("overwrite_rows base", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([5, 3], 1.0, &mut r);
        let o = Tensor::randn([2, 3], 1.0, &mut r);
        grad_check(|t, x| { let ov = t.constant(o.clone()); let y = t.overwrite_rows(x, ov, &[3, 1])?; probe(t, y, s) }, &x).unwrap()
    });
    check("overwrite_rows src", &|s| {
        let mut r = rng(s);
        let b = Tensor::randn([5, 3], 1.0, &mut r);
        let x = Tensor::randn([2, 3], 1.0, &mut r);
        grad_check(|t, x| { let bv = t.constant(b.clone()); let y = t.overwrite_rows(bv, x, &[3, 1])?; probe(t, y, s) }, &x).unwrap()
    });
    let groups = vec![vec![0, 2, 3], vec![3, 4]];
    check("scatter_add_rows base", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([5, 3], 1.0, &mut r);
        let o = Tensor::randn([2, 3], 1.0, &mut r);
        grad_check(|t, x| { let ov = t.constant(o.clone()); let y = t.scatter_add_rows(x, ov, &groups)?; probe(t, y, s) }, &x).unwrap()
    });
    check("scatter_add_rows src", &|s| {
        let mut r = rng(s);
        let b = Tensor::randn([5, 3], 1.0, &mut r);
        let x = Tensor::randn([2, 3], 1.0, &mut r);
        grad_check(|t, x| { let bv = t.constant(b.clone()); let y = t.scatter_add_rows(bv, x, &groups)?; probe(t, y, s) }, &x).unwrap()
    });
    check("mask_mean", &|s| {
        let x = Tensor::randn([5, 3], 1.0, &mut rng(s));
        grad_check(|t, x| { let y = t.mask_mean(x, &groups)?; probe(t, y, s) }, &x).unwrap()
    });
}

pub fn causal(t: usize) -> Vec<bool> {
    (0..t * t).map(|k| k % t <= k / t).collect()
}

fn grad_attention(check: Check) {
    let allowed = causal(5);
    for which in 0..3 {
        check("attention", &|s| {
            let mut r = rng(s);
            // std 0.5 keeps the smallest key gradients above the f32 noise
            // floor of a 1e-2 central difference
            let qkv: Vec<Tensor> = (0..3).map(|_| Tensor::randn([5, 4], 0.5, &mut r)).collect();
            grad_check(
                |t, x| {
                    let mut vs: Vec<Var> = qkv.iter().map(|m| t.constant(m.clone())).collect();
                    vs[which] = x;
                    let y = t.attention(vs[0], vs[1], vs[2], &allowed, 2)?;
                    probe(t, y, s)
                },
                &qkv[which],
            )
            .unwrap()
        });
    }
}

fn grad_convolutions(check: Check) {
    check("conv_transpose2d x", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([2, 2, 3], 1.0, &mut r);
        let k = Tensor::randn([2, 3, 2, 2], 1.0, &mut r);
        grad_check(|t, x| { let kv = t.constant(k.clone()); let y = t.conv_transpose2d(x, kv, 2)?; probe(t, y, s) }, &x).unwrap()
    });
    check("conv_transpose2d kernel", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([2, 2, 3], 1.0, &mut r);
        let k = Tensor::randn([2, 3, 2, 2], 1.0, &mut r);
        grad_check(|t, k| { let xv = t.constant(x.clone()); let y = t.conv_transpose2d(xv, k, 2)?; probe(t, y, s) }, &k).unwrap()
    });
    check("depthwise x", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([2, 4, 3], 1.0, &mut r);
        let k = Tensor::randn([2, 3, 3], 1.0, &mut r);
        grad_check(|t, x| { let kv = t.constant(k.clone()); let y = t.depthwise_conv2d(x, kv)?; probe(t, y, s) }, &x).unwrap()
    });
    check("depthwise kernel", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([2, 4, 3], 1.0, &mut r);
        let k = Tensor::randn([2, 3, 3], 1.0, &mut r);
        grad_check(|t, k| { let xv = t.constant(x.clone()); let y = t.depthwise_conv2d(xv, k)?; probe(t, y, s) }, &k).unwrap()
    });
    check("bilinear up", &|s| {
        let x = Tensor::randn([2, 3, 4], 1.0, &mut rng(s));
        grad_check(|t, x| { let y = t.bilinear_resize(x, 7, 9)?; probe(t, y, s) }, &x).unwrap()
    });
    check("bilinear down", &|s| {
        let x = Tensor::randn([1, 8, 6], 1.0, &mut rng(s));
        grad_check(|t, x| { let y = t.bilinear_resize(x, 3, 2)?; probe(t, y, s) }, &x).unwrap()
    });
}

fn grad_losses(check: Check) {
    check("cross_entropy", &|s| {
        let x = Tensor::randn([4, 6], 1.0, &mut rng(s));
        grad_check(|t, x| t.cross_entropy(x, &[1, 5, 0, 2], &[true, false, true, true]), &x).unwrap()
    });
    check("bce", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([2, 3, 3], 1.5, &mut r);
        let g = Tensor::from_fn([2, 3, 3], |_| if r.random_bool(0.4) { 1.0 } else { 0.0 });
        grad_check(|t, x| t.bce_with_logits(x, &g), &x).unwrap()
    });
    check("dice", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([2, 4, 4], 1.5, &mut r);
        let g = Tensor::from_fn([2, 4, 4], |_| if r.random_bool(0.4) { 1.0 } else { 0.0 });
        grad_check(|t, x| t.dice_loss(x, &g), &x).unwrap()
    });
    check("mse", &|s| {
        let mut r = rng(s);
        let x = Tensor::randn([3, 4], 1.0, &mut r);
        let g = Tensor::randn([3, 4], 1.0, &mut r);
        grad_check(|t, x| t.mse(x, &g), &x).unwrap()
    });
}
