//! Small numerical helpers shared across modules.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

pub const LN_2PI: f64 = 1.8378770664093453;

/// log(sum(exp(x))) without overflow. Returns -inf for an empty or all -inf slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes a row of log-weights in place into probabilities and returns
/// the row's log normalizer.
pub fn softmax_in_place(row: &mut [f64]) -> f64 {
    let lse = logsumexp(row);
    if lse.is_finite() {
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    lse
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided p-value of a standard normal statistic.
pub fn two_sided_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

pub fn to_dmatrix(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Maximum absolute column sum.
pub fn norm_1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Index of the largest entry, ties resolved toward the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = k;
        }
    }
    best
}
