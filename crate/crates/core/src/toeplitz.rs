//! Lower-triangular Toeplitz (convolution) matrices and the shifted-sum
//! contractions that give `E{G^T G}` for a random generator `g`.
//!
//! The contraction `S_{ij} = sum_{t >= max(i,j)} P_{t-i, t-j}` (0-based) is
//! the closed form of `R (I ⊗ P) R^T`; the selector `R` is never built here.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A sampled signal. Every vector quantity of the model (impulse responses,
/// inputs, measurements) is a `Signal`.
pub type Signal = DVector<f64>;

/// `rows x cols` lower-triangular Toeplitz matrix whose first column is `v`
/// (zero-padded or truncated).
pub fn toeplitz(v: &Signal, rows: usize, cols: usize) -> DMatrix<f64> {
    let m = v.len();
    DMatrix::from_fn(rows, cols, |i, j| {
        if i >= j && i - j < m {
            v[i - j]
        } else {
            0.0
        }
    })
}

/// Truncated convolution `T(w) g`: the first `N` samples of `w * g`.
///
/// `T(w) g` and `T(g) w` sum the same products in reverse order, so the two
/// agree to rounding.
pub fn commute(w: &Signal, g: &Signal) -> Result<Signal> {
    if w.len() != g.len() {
        return Err(Error::Dimension(format!(
            "convolution of signals with lengths {} and {}",
            w.len(),
            g.len()
        )));
    }
    Ok(convolve(w, g))
}

/// First `len(w)` samples of the convolution of `w` with `g` (any length of `g`).
pub fn convolve(w: &Signal, g: &Signal) -> Signal {
    let n = w.len();
    let mut out = DVector::zeros(n);
    for t in 0..n {
        let kmax = t.min(g.len().saturating_sub(1));
        let mut acc = 0.0;
        for k in 0..=kmax {
            acc += w[t - k] * g[k];
        }
        out[t] = acc;
    }
    out
}

/// `T(x)^T y` computed without forming the Toeplitz matrix.
pub fn toeplitz_tr_mul(x: &Signal, y: &Signal) -> Signal {
    let n = y.len();
    let mut out = DVector::zeros(n);
    for j in 0..n {
        let mut acc = 0.0;
        for t in j..n {
            acc += x[t - j] * y[t];
        }
        out[j] = acc;
    }
    out
}

/// Shifted-sum contraction `S_{ij} = sum_{t >= max(i,j)} P_{t-i, t-j}`.
///
/// Evaluated along diagonals with `S_{ij} = S_{i+1,j+1} + P_{N-1-i, N-1-j}`,
/// `O(N^2)`.
pub fn shifted_sum(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(Error::Dimension(format!(
            "shifted sum needs a square matrix, got {}x{}",
            n,
            p.ncols()
        )));
    }
    let mut s = DMatrix::zeros(n, n);
    if n == 0 {
        return Ok(s);
    }
    for d in 0..n {
        // upper diagonal: j = i + d
        let mut acc = 0.0;
        for i in (0..n - d).rev() {
            let j = i + d;
            acc += p[(n - 1 - i, n - 1 - j)];
            s[(i, j)] = acc;
        }
        if d > 0 {
            let mut acc = 0.0;
            for j in (0..n - d).rev() {
                let i = j + d;
                acc += p[(n - 1 - i, n - 1 - j)];
                s[(i, j)] = acc;
            }
        }
    }
    Ok(s)
}

/// `T(x)^T T(x)`, i.e. the shifted sum of the rank-one matrix `x x^T`.
pub fn toeplitz_gram(x: &Signal) -> DMatrix<f64> {
    let n = x.len();
    let mut s = DMatrix::zeros(n, n);
    for d in 0..n {
        let mut acc = 0.0;
        for i in (0..n - d).rev() {
            let j = i + d;
            acc += x[n - 1 - j] * x[n - 1 - i];
            s[(i, j)] = acc;
            s[(j, i)] = acc;
        }
    }
    s
}

/// Returns `(S, T)` with `S` the shifted sum of the covariance `P` and
/// `T = S + T(m)^T T(m)`, which equals `E{M^T M}` for `M` the Toeplitz matrix
/// of a random vector with mean `m` and covariance `P`.
pub fn shifted_sum_contraction(
    p: &DMatrix<f64>,
    m: &Signal,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = p.nrows();
    if p.ncols() != n || m.len() != n {
        return Err(Error::Dimension(format!(
            "contraction of {}x{} covariance with mean of length {}",
            n,
            p.ncols(),
            m.len()
        )));
    }
    let scale = p.amax().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (p[(i, j)] - p[(j, i)]).abs() > 1e-9 * scale {
                return Err(Error::InvalidInput(format!(
                    "covariance is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let s = shifted_sum(p)?;
    let t = &s + toeplitz_gram(m);
    Ok((s, t))
}
