//! Deterministic dense-matrix primitives shared by every kernel module:
//! activations, gradient orthogonalization, weight normalization and the
//! finite-difference oracle used to check all analytic gradients.

mod mat;
mod rng;

pub use mat::Mat;
pub use rng::Rng;

use crate::error::{Error, Result};

/// Quintic matrix-sign coefficients for the Newton–Schulz iteration,
/// `p(x) = (15x - 10x³ + 3x⁵)/8`. The map is monotone on [0, 1], fixes 1,
/// and converges cubically, so pre-scaled singular values are driven to 1
/// without overshoot.
const NS_COEFFS: (f64, f64, f64) = (15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0);

/// Iteration count for [`ns_orthogonalize`]. Twelve steps bring singular
/// values as small as `1e-3` of the Frobenius norm to within 1e-12 of 1.
const NS_ITERS: usize = 12;

/// Guard added to the Frobenius norm before pre-scaling.
const NS_NORM_EPS: f64 = 1e-7;

/// Inputs below this Frobenius norm are reported as [`Error::ZeroGradient`].
const NS_ZERO_NORM: f64 = 1e-30;

/// Row norms below this are left untouched by [`row_l2_normalize`].
const ROW_NORM_EPS: f64 = 1e-12;

/// Default central-difference step for [`fd_grad`].
pub const FD_DEFAULT_H: f64 = 1e-5;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `silu(x) = x · σ(x)`.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Derivative of `silu`: `σ(x) · (1 + x · (1 − σ(x)))`.
pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Approximate the orthogonal polar factor `U·Vᵀ` of `g` by Frobenius
/// pre-scaling followed by [`NS_ITERS`] Newton–Schulz iterations
/// `M ← aM + bM(MᵀM) + c M(MᵀM)²`.
///
/// For `rows > cols` the iteration runs on the transpose and transposes
/// back. The iteration is an odd polynomial in `M`, so
/// `ns_orthogonalize(-g) == -ns_orthogonalize(g)` holds bit-exactly.
pub fn ns_orthogonalize(g: &Mat) -> Result<Mat> {
    let norm = g.frobenius_norm();
    if norm <= NS_ZERO_NORM {
        return Err(Error::ZeroGradient);
    }
    let transpose_back = g.rows() > g.cols();
    let mut m = if transpose_back { g.transpose() } else { g.clone() };
    m = m.scale(1.0 / (norm + NS_NORM_EPS));

    let (a, b, c) = NS_COEFFS;
    for _ in 0..NS_ITERS {
        let gram = m.matmul_at_b(&m); // MᵀM, cols×cols
        let gram2 = gram.matmul(&gram);
        let mb = m.matmul(&gram);
        let mc = m.matmul(&gram2);
        m = Mat::from_fn(m.rows(), m.cols(), |r, ccol| {
            a * m.entry(r, ccol) + b * mb.entry(r, ccol) + c * mc.entry(r, ccol)
        });
    }
    Ok(if transpose_back { m.transpose() } else { m })
}

/// Divide every row of `w` by `max(‖row‖₂, 1e-12)`; zero rows pass through.
pub fn row_l2_normalize(w: &Mat) -> Mat {
    let mut out = w.clone();
    for r in 0..w.rows() {
        let norm = w.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        let inv = 1.0 / norm.max(ROW_NORM_EPS);
        for c in 0..w.cols() {
            out.set_entry(r, c, w.entry(r, c) * inv);
        }
    }
    out
}

/// Central-difference gradient of a scalar function of a matrix:
/// entry `(r,c)` is `(f(X + h·E_rc) − f(X − h·E_rc)) / (2h)`.
pub fn fd_grad(f: impl Fn(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
    assert!(h > 0.0, "fd_grad step must be positive");
    Mat::from_fn(x.rows(), x.cols(), |r, c| {
        let mut plus = x.clone();
        plus.set_entry(r, c, x.entry(r, c) + h);
        let mut minus = x.clone();
        minus.set_entry(r, c, x.entry(r, c) - h);
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}

/// Relative error metric used by the gradient suites:
/// `|a − b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Largest entrywise relative error between two equally shaped matrices.
pub fn max_relative_error(a: &Mat, b: &Mat) -> f64 {
    assert!(a.same_shape(b), "max_relative_error shape");
    let mut worst = 0.0_f64;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            worst = worst.max(relative_error(a.entry(r, c), b.entry(r, c)));
        }
    }
    worst
}
