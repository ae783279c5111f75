//! Layernorm and the i-GELU activation.

use crate::error::{Error, Result};
use crate::numerics::quantize;
use crate::tensor::Matrix;

/// i-GELU polynomial constants (integer-only BERT).
pub const IGELU_A: f64 = -0.2888;
pub const IGELU_B: f64 = -1.769;

/// Row-wise `(x - mean) / sqrt(var + eps) * gamma + beta`. Statistics are
/// kept in FP32 (FP64 for FP64 inputs); the output is rounded to `x`'s format.
pub fn layernorm(x: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Matrix> {
    let n = x.cols();
    if gamma.len() != n || beta.len() != n {
        return Err(Error::Shape(format!(
            "layernorm over {n} columns with gamma {} / beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::config("eps", "must be positive"));
    }
    let stats = x.fmt().statistics_format();
    let q = |v: f64| quantize(v, stats);
    let mut out = Matrix::zeros(x.rows(), n, x.fmt());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = q(row.iter().fold(0.0, |s, v| q(s + v)) / n as f64);
        let var = q(row
            .iter()
            .fold(0.0, |s, v| q(s + q((v - mean) * (v - mean))))
            / n as f64);
        let inv = q(1.0 / q(q(var + eps).sqrt()));
        for j in 0..n {
            out.set(i, j, q(q(q(row[j] - mean) * inv) * gamma[j]) + beta[j]);
        }
    }
    Ok(out)
}

/// i-GELU with explicit constants.
pub fn i_gelu_with(x: f64, a: f64, b: f64) -> f64 {
    let t = x / std::f64::consts::SQRT_2;
    let clipped = t.abs().min(-b) + b;
    let l = t.signum() * (a * clipped * clipped + 1.0);
    x * 0.5 * (1.0 + l)
}

pub fn i_gelu(x: f64) -> f64 {
    i_gelu_with(x, IGELU_A, IGELU_B)
}

/// Reference GELU via the error function.
pub fn gelu_exact(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Maximum |i_gelu - gelu| over `samples` evenly spaced points of `[lo, hi]`.
pub fn i_gelu_max_error(lo: f64, hi: f64, samples: usize, a: f64, b: f64) -> (f64, f64) {
    let mut worst = (0.0, lo);
    for s in 0..samples {
        let x = lo + (hi - lo) * s as f64 / (samples - 1).max(1) as f64;
        let e = (i_gelu_with(x, a, b) - gelu_exact(x)).abs();
        if e > worst.0 {
            worst = (e, x);
        }
    }
    worst
}

/// Element-wise i-GELU evaluated in the statistics format, rounded back.
pub fn i_gelu_matrix(x: &Matrix) -> Matrix {
    let stats = x.fmt().statistics_format();
    Matrix::from_fn(x.rows(), x.cols(), x.fmt(), |i, j| {
        quantize(i_gelu(quantize(x.get(i, j), stats)), stats)
    })
}
