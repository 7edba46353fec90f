//! Dense Cholesky factorisation and triangular solves on [`Tensor`]s.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_JITTER: f64 = 1e-6;
/// Largest diagonal jitter tried before giving up on a factorisation.
pub const MAX_JITTER: f64 = 1e-2;
/// First jitter tried when the caller asked for none and the plain factorisation failed.
const MIN_ESCALATED_JITTER: f64 = 1e-10;
const SINGULAR_THRESHOLD: f64 = 1e-300;

/// Unjittered lower Cholesky factor, `None` if a pivot is not strictly positive.
fn try_cholesky(a: &Tensor, jitter: f64) -> Option<Tensor> {
    let n = a.rows();
    let mut l = Tensor::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j) + jitter;
        for k in 0..j {
            let v = l.get(j, k);
            d -= v * v;
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Some(l)
}

fn check_symmetric(a: &Tensor) -> Result<()> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {:?}",
            a.dims()
        )));
    }
    let n = a.rows();
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (a.get(i, j), a.get(j, i));
            let scale = x.abs().max(y.abs()).max(1.0);
            if (x - y).abs() > 1e-10 * scale {
                return Err(Error::NotSymmetric { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Cholesky factor of `a + jitter * I` with jitter escalation.
///
/// Starts at `jitter` and multiplies by ten until [`MAX_JITTER`] is exceeded.
/// Returns the factor together with the jitter that succeeded.
pub fn cholesky_with_jitter(a: &Tensor, jitter: f64) -> Result<(Tensor, f64)> {
    check_symmetric(a)?;
    if jitter < 0.0 || !jitter.is_finite() {
        return Err(Error::InvalidArgument(format!("jitter must be >= 0, got {jitter}")));
    }
    let mut current = jitter;
    loop {
        if let Some(l) = try_cholesky(a, current) {
            return Ok((l, current));
        }
        current = if current == 0.0 {
            MIN_ESCALATED_JITTER
        } else {
            current * 10.0
        };
        if current > MAX_JITTER * (1.0 + 1e-9) {
            return Err(Error::NotPositiveDefinite { jitter: current / 10.0 });
        }
    }
}

/// Lower-triangular `L` with `L Lᵀ = A + jitter I`.
pub fn cholesky_factor(a: &Tensor, jitter: f64) -> Result<Tensor> {
    cholesky_with_jitter(a, jitter).map(|(l, _)| l)
}

fn check_factor(l: &Tensor) -> Result<()> {
    if !l.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "triangular factor must be square, got {:?}",
            l.dims()
        )));
    }
    for i in 0..l.rows() {
        let d = l.get(i, i);
        if !(d.abs() >= SINGULAR_THRESHOLD) {
            return Err(Error::SingularMatrix { index: i });
        }
    }
    Ok(())
}

/// Solves `L X = B`, or `Lᵀ X = B` when `transpose` is set.
pub fn solve_triangular(l: &Tensor, b: &Tensor, transpose: bool) -> Result<Tensor> {
    check_factor(l)?;
    let n = l.rows();
    if b.rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "right-hand side has {} rows, factor has order {}",
            b.rows(),
            n
        )));
    }
    Ok(solve_unchecked(l, b, transpose))
}

pub(crate) fn solve_unchecked(l: &Tensor, b: &Tensor, transpose: bool) -> Tensor {
    let n = l.rows();
    let m = b.cols();
    let mut x = b.clone();
    if !transpose {
        for i in 0..n {
            let lii = l.get(i, i);
            for k in 0..i {
                let lik = l.get(i, k);
                if lik != 0.0 {
                    for c in 0..m {
                        let v = x.get(i, c) - lik * x.get(k, c);
                        x.set(i, c, v);
                    }
                }
            }
            for c in 0..m {
                let v = x.get(i, c) / lii;
                x.set(i, c, v);
            }
        }
    } else {
        for i in (0..n).rev() {
            let lii = l.get(i, i);
            for k in (i + 1)..n {
                let lki = l.get(k, i);
                if lki != 0.0 {
                    for c in 0..m {
                        let v = x.get(i, c) - lki * x.get(k, c);
                        x.set(i, c, v);
                    }
                }
            }
            for c in 0..m {
                let v = x.get(i, c) / lii;
                x.set(i, c, v);
            }
        }
    }
    x
}

/// `A⁻¹ B` from the Cholesky factor of `A`.
pub fn cholesky_solve(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = solve_triangular(l, b, false)?;
    solve_triangular(l, &y, true)
}

/// `log |L Lᵀ| = 2 Σ log L_ii`.
pub fn logdet_from_factor(l: &Tensor) -> Result<f64> {
    if !l.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "factor must be square, got {:?}",
            l.dims()
        )));
    }
    let mut acc = 0.0;
    for i in 0..l.rows() {
        let d = l.get(i, i);
        if !(d > 0.0) {
            return Err(Error::SingularMatrix { index: i });
        }
        acc += d.ln();
    }
    Ok(2.0 * acc)
}
