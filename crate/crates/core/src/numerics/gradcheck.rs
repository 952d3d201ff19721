//! Central finite-difference gradient checking.

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Finite-difference step. Inputs are expected to be scaled to O(1).
pub const FD_STEP: f32 = 1e-2;

/// `|a − b| / (|a| + |b| + 1e-6)`.
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-6)
}

/// Maximum relative error between analytic and numeric gradients.
pub fn max_relative_error(ad: &[f32], fd: &[f64]) -> f64 {
    ad.iter()
        .zip(fd)
        .map(|(&a, &f)| relative_error(a as f64, f))
        .fold(0.0, f64::max)
}

/// Central difference `(f(x+h) − f(x−h)) / 2h` of a scalar function of one
/// coordinate offset.
pub fn central_difference(mut eval: impl FnMut(f32) -> Result<f64>) -> Result<f64> {
    let plus = eval(FD_STEP)?;
    let minus = eval(-FD_STEP)?;
    Ok((plus - minus) / (2.0 * FD_STEP as f64))
}

/// Compares the reverse-mode gradient of the scalar `f` at `x` with central
/// differences over every element. Returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_indices(f, x, &all)
}

/// As [`grad_check`], restricted to the listed element indices.
pub fn grad_check_indices<F>(f: F, x: &Tensor, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let zero = Tensor::zeros(x.shape().to_vec());
    let g = grads.get(xv).unwrap_or(&zero);
    let ad: Vec<f32> = indices.iter().map(|&i| g.data()[i]).collect();

    let mut fd = Vec::with_capacity(indices.len());
    for &i in indices {
        fd.push(central_difference(|h| {
            let mut shifted = x.clone();
            shifted.data_mut()[i] += h;
            let mut t = Tape::new();
            let v = t.constant(shifted);
            let out = f(&mut t, v)?;
            Ok(t.scalar_f64(out))
        })?);
    }
    Ok(max_relative_error(&ad, &fd))
}
