//! Dense helpers: Cholesky with jitter escalation and a few symmetric-matrix
//! utilities shared by the inference code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// First jitter tried after a plain factorization fails, relative to `trace / N`.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter tried, relative to `trace / N`.
pub const JITTER_MAX: f64 = 1e-4;

/// A Cholesky factorization of `K + jitter * I`.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

/// Factorizes `k`, adding `jitter * I` with jitter escalating from
/// `1e-10 * trace / N` by factors of ten up to `1e-4 * trace / N` on failure.
pub fn cholesky_jittered(k: &DMatrix<f64>) -> Result<JitteredCholesky> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::Dimension(format!(
            "cholesky of a {}x{} matrix",
            n,
            k.ncols()
        )));
    }
    if let Some(chol) = Cholesky::new(k.clone()) {
        if chol_is_finite(&chol) {
            return Ok(JitteredCholesky { chol, jitter: 0.0 });
        }
    }
    let scale = if n == 0 { 0.0 } else { k.trace() / n as f64 };
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::NotPositiveDefinite { jitter: 0.0 });
    }
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(kj) {
            if chol_is_finite(&chol) {
                return Ok(JitteredCholesky { chol, jitter });
            }
        }
        rel *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        jitter: JITTER_MAX * scale,
    })
}

fn chol_is_finite(chol: &Cholesky<f64, Dyn>) -> bool {
    let l = chol.l_dirty();
    (0..l.nrows()).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0)
}

/// `(A + A^T) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let eig = symmetrize(a).symmetric_eigenvalues();
    eig.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Largest absolute asymmetry `max |A_ij - A_ji|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).amax()
}

/// Inverse of a lower-triangular matrix with a nonzero diagonal, by recursive
/// 2x2 blocking so that most of the work is matrix products.
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= 32 {
        let mut x = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            x[(j, j)] = 1.0 / l[(j, j)];
            for i in j + 1..n {
                let mut acc = 0.0;
                for k in j..i {
                    acc -= l[(i, k)] * x[(k, j)];
                }
                x[(i, j)] = acc / l[(i, i)];
            }
        }
        return x;
    }
    let h = n / 2;
    let ai = lower_triangular_inverse(&l.view((0, 0), (h, h)).into_owned());
    let di = lower_triangular_inverse(&l.view((h, h), (n - h, n - h)).into_owned());
    let c = l.view((h, 0), (n - h, h));
    let off = -(&di * c * &ai);
    let mut x = DMatrix::zeros(n, n);
    x.view_mut((0, 0), (h, h)).copy_from(&ai);
    x.view_mut((h, h), (n - h, n - h)).copy_from(&di);
    x.view_mut((h, 0), (n - h, h)).copy_from(&off);
    x
}

/// Inverse of a symmetric positive-definite matrix from its Cholesky factor.
pub fn spd_inverse(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let li = lower_triangular_inverse(&chol.l());
    symmetrize(&li.tr_mul(&li))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocked_triangular_inverse() {
        for n in [1, 5, 33, 70, 129] {
            let l = DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    1.0 + (i % 3) as f64
                } else if i > j {
                    ((i * 7 + j * 3) % 5) as f64 / 10.0 - 0.2
                } else {
                    0.0
                }
            });
            let x = lower_triangular_inverse(&l);
            assert!((&l * &x - DMatrix::identity(n, n)).amax() < 1e-10, "n {n}");
            assert!((0..n).all(|i| (i + 1..n).all(|j| x[(i, j)] == 0.0)));
        }
    }

    #[test]
    fn plain_factorization_has_no_jitter() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let c = cholesky_jittered(&k).unwrap();
        assert_eq!(c.jitter, 0.0);
        assert!((c.log_det() - 3.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        let k = DMatrix::from_element(3, 3, 1.0);
        let c = cholesky_jittered(&k).unwrap();
        assert!(c.jitter > 0.0);
        assert!(c.jitter <= JITTER_MAX);
    }

    #[test]
    fn zero_matrix_fails() {
        assert!(matches!(
            cholesky_jittered(&DMatrix::zeros(3, 3)),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn indefinite_matrix_fails() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky_jittered(&k).is_err());
    }
}
