use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::{ParamSet, Tensor};

/// Learning rate at `step` (0-based) of a `total`-step run: linear warm-up
/// from zero over `ceil(total · warmup_ratio)` steps, then half-cosine decay
/// to zero.
pub fn cosine_lr(step: usize, total: usize, warmup_ratio: f64, base: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = (total as f64 * warmup_ratio).ceil() as usize;
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamWState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p ← p − lr · (m̂ / (√v̂ + ε) + wd · p)`.
///
/// Both terms are scaled by `lr`, so `lr = 0` leaves parameters untouched.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("gradient {:?} vs parameter {:?} for {name}", g.shape(), p.shape()),
            ));
        }
        let m = state.m.get_mut(name)?;
        update_moments(m, g, cfg.beta1, false);
        let v = state.v.get_mut(name)?;
        update_moments(v, g, cfg.beta2, true);
        let (m, v) = (state.m.get(name)?, state.v.get(name)?);
        for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let mhat = mv as f64 / bc1;
            let vhat = vv as f64 / bc2;
            let step = mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *pv as f64;
            *pv = (*pv as f64 - lr * step) as f32;
        }
    }
    Ok(())
}

fn update_moments(acc: &mut Tensor, g: &Tensor, beta: f64, square: bool) {
    for (a, &gv) in acc.data_mut().iter_mut().zip(g.data()) {
        let x = if square { gv as f64 * gv as f64 } else { gv as f64 };
        *a = (beta * *a as f64 + (1.0 - beta) * x) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let base = 4e-5;
        assert_eq!(cosine_lr(0, 100, 0.03, base), 0.0);
        assert!((cosine_lr(3, 100, 0.03, base) - base).abs() < 1e-15);
        assert!(cosine_lr(1, 100, 0.03, base) < cosine_lr(2, 100, 0.03, base));
        let mid = cosine_lr(3 + 97 / 2, 100, 0.03, base);
        assert!((mid - base / 2.0).abs() < base * 0.02);
        assert!(cosine_lr(99, 100, 0.03, base) < 1e-7);
        assert!(cosine_lr(100, 100, 0.03, base).abs() < 1e-20);
    }

    #[test]
    fn first_adamw_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([2], vec![1.0, -1.0]).unwrap());
        let mut g = ParamSet::new();
        g.insert("w", Tensor::new([2], vec![0.5, -3.0]).unwrap());
        let mut st = AdamWState::new(&p);
        adamw_step(&mut p, &g, &mut st, &AdamWConfig::default(), 0.1).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([1], vec![2.0]).unwrap());
        let g = p.zeros_like();
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        adamw_step(&mut p, &g, &mut st, &cfg, 0.5).unwrap();
        // zero gradient: only the decay term acts, 2 - 0.5 * 0.1 * 2
        assert!((p.get("w").unwrap().data()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([3], vec![0.3, -0.0, 7.0]).unwrap());
        let before = p.clone();
        let mut g = p.zeros_like();
        g.get_mut("w").unwrap().data_mut().copy_from_slice(&[1.0, 2.0, -3.0]);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.05,
            ..Default::default()
        };
        for _ in 0..10 {
            adamw_step(&mut p, &g, &mut st, &cfg, 0.0).unwrap();
        }
        assert!(p.bit_eq(&before));
    }
}
