//! Square-root covariance factors `K = S S^T` and Gaussian posteriors computed
//! in whitened coordinates.
//!
//! A prior `x ~ N(mu, S S^T)` is written `x = mu + S xi` with `xi ~ N(0, I)`.
//! Given a quadratic data term `-x^T A x / 2 + b^T x`, the posterior of `xi` is
//! `N(B^{-1} S^T (b - A mu), B^{-1})` with `B = I + S^T A S`. This is the
//! precision form `P = (A + K^{-1})^{-1}`, `m = P (b + K^{-1} mu)` rewritten so
//! that `K^{-1}` is never formed; stable-spline kernels at realistic horizons
//! have eigenvalues far below machine precision.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, symmetrize};
use crate::toeplitz::{convolve, shifted_sum, toeplitz, toeplitz_gram, toeplitz_tr_mul, Signal};

/// A square root `S` of a prior covariance, `K = S S^T`.
#[derive(Clone, Debug)]
pub enum SqrtFactor {
    /// `K = 0` (degenerate prior, point mass at the mean).
    Zero { n: usize },
    /// First-order stable spline `K_ij = c λ^{max(i,j)}` (1-based), factored exactly as
    /// `V D V^T` with `V` the upper-triangular matrix of ones; `S = V D^{1/2}`.
    StableSpline { log_d: Vec<f64>, sqrt_d: Vec<f64> },
    /// Lower Cholesky factor of a dense kernel (with jitter when needed).
    Dense {
        l: DMatrix<f64>,
        jitter: f64,
        log_det: f64,
    },
    /// `K = U K_base U^T` with `U = T(u)`; `S = U S_base`.
    Lifted {
        u: Signal,
        u_gram: DMatrix<f64>,
        base: Box<SqrtFactor>,
    },
}

/// `S_a^{-1} S_b` between two factors of the same dimension.
#[derive(Clone, Debug)]
pub enum Transfer {
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl Transfer {
    pub fn apply(&self, a: &DVector<f64>) -> DVector<f64> {
        match self {
            Transfer::Diagonal(d) => d.component_mul(a),
            Transfer::Dense(m) => m * a,
        }
    }

    /// `tr(J C J^T)` for symmetric `C`.
    pub fn trace_congruence(&self, c: &DMatrix<f64>) -> f64 {
        match self {
            Transfer::Diagonal(d) => (0..d.len()).map(|i| d[i] * d[i] * c[(i, i)]).sum(),
            Transfer::Dense(m) => {
                let mc = m * c;
                mc.component_mul(m).sum()
            }
        }
    }
}

impl SqrtFactor {
    /// Exact factor of the stable-spline kernel `c λ^{max(i,j)}`; `c = 0` gives [`SqrtFactor::Zero`].
    pub fn stable_spline(scale: f64, decay: f64, n: usize) -> Result<SqrtFactor> {
        crate::priors::check_stable_spline(scale, decay)?;
        if scale == 0.0 {
            return Ok(SqrtFactor::Zero { n });
        }
        let lc = scale.ln();
        let ll = decay.ln();
        let l1 = (-decay).ln_1p();
        let log_d: Vec<f64> = (1..=n)
            .map(|k| {
                if k < n {
                    lc + k as f64 * ll + l1
                } else {
                    lc + k as f64 * ll
                }
            })
            .collect();
        let sqrt_d = log_d.iter().map(|l| (0.5 * l).exp()).collect();
        Ok(SqrtFactor::StableSpline { log_d, sqrt_d })
    }

    /// Cholesky factor of an explicit kernel matrix (jittered if singular).
    /// An identically zero matrix gives [`SqrtFactor::Zero`].
    pub fn dense(k: &DMatrix<f64>) -> Result<SqrtFactor> {
        if k.nrows() != k.ncols() {
            return Err(Error::Dimension(format!(
                "kernel matrix is {}x{}",
                k.nrows(),
                k.ncols()
            )));
        }
        if k.iter().all(|x| *x == 0.0) {
            return Ok(SqrtFactor::Zero { n: k.nrows() });
        }
        let c = cholesky_jittered(k)?;
        let log_det = c.log_det();
        Ok(SqrtFactor::Dense {
            l: c.l(),
            jitter: c.jitter,
            log_det,
        })
    }

    /// Factor of `U K_base U^T` for `U = T(u)`.
    pub fn lifted(u: &Signal, base: SqrtFactor) -> Result<SqrtFactor> {
        if u.len() != base.dim() {
            return Err(Error::Dimension(format!(
                "lift input has length {} but kernel dimension is {}",
                u.len(),
                base.dim()
            )));
        }
        if base.is_zero() {
            return Ok(SqrtFactor::Zero { n: u.len() });
        }
        Ok(SqrtFactor::Lifted {
            u: u.clone(),
            u_gram: toeplitz_gram(u),
            base: Box::new(base),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            SqrtFactor::Zero { n } => *n,
            SqrtFactor::StableSpline { log_d, .. } => log_d.len(),
            SqrtFactor::Dense { l, .. } => l.nrows(),
            SqrtFactor::Lifted { u, .. } => u.len(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, SqrtFactor::Zero { .. })
    }

    /// Jitter added to the diagonal of the kernel before factoring.
    pub fn jitter(&self) -> f64 {
        match self {
            SqrtFactor::Dense { jitter, .. } => *jitter,
            SqrtFactor::Lifted { base, .. } => base.jitter(),
            _ => 0.0,
        }
    }

    /// `S a`.
    pub fn mul(&self, a: &DVector<f64>) -> DVector<f64> {
        match self {
            SqrtFactor::Zero { n } => DVector::zeros(*n),
            SqrtFactor::StableSpline { sqrt_d, .. } => {
                let n = sqrt_d.len();
                let mut out = DVector::zeros(n);
                let mut acc = 0.0;
                for k in (0..n).rev() {
                    acc += sqrt_d[k] * a[k];
                    out[k] = acc;
                }
                out
            }
            SqrtFactor::Dense { l, .. } => l * a,
            SqrtFactor::Lifted { u, base, .. } => convolve(u, &base.mul(a)),
        }
    }

    /// `S_base a` for lifted factors (the pre-lift latent signal), `S a` otherwise.
    pub fn latent_mul(&self, a: &DVector<f64>) -> DVector<f64> {
        match self {
            SqrtFactor::Lifted { base, .. } => base.mul(a),
            other => other.mul(a),
        }
    }

    /// `S^T x`.
    pub fn tr_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            SqrtFactor::Zero { n } => DVector::zeros(*n),
            SqrtFactor::StableSpline { sqrt_d, .. } => {
                let n = sqrt_d.len();
                let mut out = DVector::zeros(n);
                let mut acc = 0.0;
                for k in 0..n {
                    acc += x[k];
                    out[k] = sqrt_d[k] * acc;
                }
                out
            }
            SqrtFactor::Dense { l, .. } => l.tr_mul(x),
            SqrtFactor::Lifted { u, base, .. } => base.tr_mul(&toeplitz_tr_mul(u, x)),
        }
    }

    /// `S M`, column by column.
    pub fn mul_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SqrtFactor::Dense { l, .. } => l * m,
            SqrtFactor::Lifted { u, base, .. } => {
                let n = u.len();
                toeplitz(u, n, n) * base.mul_mat(m)
            }
            _ => {
                let mut out = DMatrix::zeros(self.dim(), m.ncols());
                for j in 0..m.ncols() {
                    out.set_column(j, &self.mul(&m.column(j).into_owned()));
                }
                out
            }
        }
    }

    /// `S` as a dense matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SqrtFactor::Dense { l, .. } => l.clone(),
            _ => self.mul_mat(&DMatrix::identity(self.dim(), self.dim())),
        }
    }

    /// The (jittered) kernel `S S^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let s = self.to_dense();
        symmetrize(&(&s * s.transpose()))
    }

    /// `S^T A S` for a dense symmetric `A`.
    pub fn congruence(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SqrtFactor::Zero { n } => DMatrix::zeros(*n, *n),
            SqrtFactor::StableSpline { sqrt_d, .. } => {
                let n = sqrt_d.len();
                // 2-D prefix sums: C_kl = sum_{i<=k, j<=l} A_ij
                let mut c = a.clone();
                for j in 0..n {
                    for i in 1..n {
                        c[(i, j)] += c[(i - 1, j)];
                    }
                }
                for j in 1..n {
                    for i in 0..n {
                        c[(i, j)] += c[(i, j - 1)];
                    }
                }
                for j in 0..n {
                    for i in 0..n {
                        c[(i, j)] *= sqrt_d[i] * sqrt_d[j];
                    }
                }
                symmetrize(&c)
            }
            SqrtFactor::Dense { l, .. } => {
                let al = a * l;
                symmetrize(&l.tr_mul(&al))
            }
            SqrtFactor::Lifted { u, base, .. } => {
                let n = u.len();
                let ut = toeplitz(u, n, n);
                let m = ut.tr_mul(&(a * &ut));
                base.congruence(&m)
            }
        }
    }

    /// `S^T A S` for a structured data precision.
    pub fn congruence_conv(&self, prec: &ConvPrecision<'_>) -> Result<DMatrix<f64>> {
        match self {
            SqrtFactor::Lifted { u, u_gram, base } => {
                let n = u.len();
                let mut m = match prec.moment {
                    ConvMoment::RankOne(x) => toeplitz_gram(&convolve(u, x)),
                    ConvMoment::Full(q) => {
                        let ut = toeplitz(u, n, n);
                        let uqu = &ut * q * ut.transpose();
                        shifted_sum(&uqu)?
                    }
                    ConvMoment::None => DMatrix::zeros(n, n),
                } * prec.inv_sy2;
                if let Some(p) = prec.input {
                    let first = p[0];
                    if p.iter().all(|x| *x == first) {
                        m += u_gram * first;
                    } else {
                        let ut = toeplitz(u, n, n);
                        let mut du = ut.clone();
                        for i in 0..n {
                            du.row_mut(i).scale_mut(p[i]);
                        }
                        m += ut.tr_mul(&du);
                    }
                }
                Ok(base.congruence(&m))
            }
            _ => Ok(self.congruence(&prec.dense()?)),
        }
    }

    /// `S^{-1} x`.
    pub fn solve(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            SqrtFactor::Zero { .. } => Err(Error::InvalidInput(
                "degenerate prior has no inverse".into(),
            )),
            SqrtFactor::StableSpline { log_d, .. } => {
                let n = log_d.len();
                Ok(DVector::from_fn(n, |k, _| {
                    let next = if k + 1 < n { x[k + 1] } else { 0.0 };
                    (x[k] - next) * (-0.5 * log_d[k]).exp()
                }))
            }
            SqrtFactor::Dense { l, .. } => l
                .solve_lower_triangular(x)
                .ok_or(Error::NotPositiveDefinite { jitter: 0.0 }),
            SqrtFactor::Lifted { u, base, .. } => {
                let n = u.len();
                if u[0] == 0.0 {
                    return Err(Error::InvalidInput(
                        "lift input starts with zero; Toeplitz factor is singular".into(),
                    ));
                }
                let mut z = DVector::zeros(n);
                for t in 0..n {
                    let mut acc = x[t];
                    for k in 1..=t {
                        acc -= u[k] * z[t - k];
                    }
                    z[t] = acc / u[0];
                }
                base.solve(&z)
            }
        }
    }

    /// `log det K` (`-inf` for a degenerate prior).
    pub fn log_det(&self) -> f64 {
        match self {
            SqrtFactor::Zero { .. } => f64::NEG_INFINITY,
            SqrtFactor::StableSpline { log_d, .. } => log_d.iter().sum(),
            SqrtFactor::Dense { log_det, .. } => *log_det,
            SqrtFactor::Lifted { u, base, .. } => {
                2.0 * u.len() as f64 * u[0].abs().ln() + base.log_det()
            }
        }
    }

    /// `self^{-1} other`, used to re-express whitened moments computed under
    /// `other` in the whitened coordinates of `self`.
    pub fn transfer_from(&self, other: &SqrtFactor) -> Result<Transfer> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!(
                "transfer between factors of dimension {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        match (self, other) {
            (_, SqrtFactor::Zero { n }) => Ok(Transfer::Diagonal(DVector::zeros(*n))),
            (
                SqrtFactor::StableSpline { log_d: a, .. },
                SqrtFactor::StableSpline { log_d: b, .. },
            ) => Ok(Transfer::Diagonal(DVector::from_fn(a.len(), |i, _| {
                (0.5 * (b[i] - a[i])).exp()
            }))),
            (
                SqrtFactor::Lifted { u: ua, base: ba, .. },
                SqrtFactor::Lifted { u: ub, base: bb, .. },
            ) if ua == ub => ba.transfer_from(bb),
            (SqrtFactor::Dense { l: la, .. }, SqrtFactor::Dense { l: lb, .. }) => la
                .solve_lower_triangular(lb)
                .map(Transfer::Dense)
                .ok_or(Error::NotPositiveDefinite { jitter: 0.0 }),
            _ => {
                let sb = other.to_dense();
                let mut out = DMatrix::zeros(sb.nrows(), sb.ncols());
                for j in 0..sb.ncols() {
                    out.set_column(j, &self.solve(&sb.column(j).into_owned())?);
                }
                Ok(Transfer::Dense(out))
            }
        }
    }
}

/// Second moment `E{x x^T}` of the signal whose Toeplitz matrix multiplies the unknown.
#[derive(Clone, Copy, Debug)]
pub enum ConvMoment<'a> {
    RankOne(&'a Signal),
    Full(&'a DMatrix<f64>),
    None,
}

/// Data precision `A = shifted_sum(Q) / σy² + diag(p)`, with `Q` the second
/// moment of the convolving signal and `p` the per-sample input precision.
#[derive(Clone, Copy, Debug)]
pub struct ConvPrecision<'a> {
    pub moment: ConvMoment<'a>,
    pub inv_sy2: f64,
    pub input: Option<&'a DVector<f64>>,
}

impl ConvPrecision<'_> {
    pub fn dense(&self) -> Result<DMatrix<f64>> {
        let mut a = match self.moment {
            ConvMoment::RankOne(x) => toeplitz_gram(x),
            ConvMoment::Full(q) => shifted_sum(q)?,
            ConvMoment::None => {
                let n = self.input.map(|p| p.len()).ok_or_else(|| {
                    Error::InvalidInput("empty data precision".into())
                })?;
                DMatrix::zeros(n, n)
            }
        } * self.inv_sy2;
        if let Some(p) = self.input {
            for i in 0..p.len() {
                a[(i, i)] += p[i];
            }
        }
        Ok(a)
    }
}

/// Gaussian prior `N(mean, S S^T)`.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    pub mean: Signal,
    pub factor: SqrtFactor,
}

impl GaussianPrior {
    pub fn new(mean: Signal, factor: SqrtFactor) -> Result<GaussianPrior> {
        if mean.len() != factor.dim() {
            return Err(Error::Dimension(format!(
                "prior mean has length {} but kernel dimension is {}",
                mean.len(),
                factor.dim()
            )));
        }
        Ok(GaussianPrior { mean, factor })
    }

    /// Prior from an explicit kernel matrix.
    pub fn from_matrix(mean: Signal, k: &DMatrix<f64>) -> Result<GaussianPrior> {
        GaussianPrior::new(mean, SqrtFactor::dense(k)?)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Posterior under the data term `-x^T A x / 2 + info^T x`.
    pub fn posterior(
        &self,
        prec: &ConvPrecision<'_>,
        info: &DVector<f64>,
    ) -> Result<WhitenedPosterior> {
        let n = self.dim();
        if info.len() != n {
            return Err(Error::Dimension(format!(
                "information vector has length {} but prior dimension is {}",
                info.len(),
                n
            )));
        }
        let mut b = self.factor.congruence_conv(prec)?;
        for i in 0..n {
            b[(i, i)] += 1.0;
        }
        let rhs_phys = if self.mean.iter().all(|m| *m == 0.0) {
            info.clone()
        } else {
            info - prec.dense()? * &self.mean
        };
        let rhs = self.factor.tr_mul(&rhs_phys);
        WhitenedPosterior::from_precision(b, &rhs)
    }

    /// The prior itself as a whitened belief (`xi ~ N(0, I)`).
    pub fn as_whitened(&self) -> WhitenedPosterior {
        let n = self.dim();
        WhitenedPosterior::from_precision(DMatrix::identity(n, n), &DVector::zeros(n))
            .expect("identity is positive definite")
    }
}

/// Gaussian belief over whitened coordinates, `xi ~ N(mean, B^{-1})`.
#[derive(Clone, Debug)]
pub struct WhitenedPosterior {
    pub mean: DVector<f64>,
    precision: Cholesky<f64, Dyn>,
}

impl WhitenedPosterior {
    pub fn from_precision(b: DMatrix<f64>, rhs: &DVector<f64>) -> Result<WhitenedPosterior> {
        let chol = cholesky_jittered(&b)?;
        let mean = chol.solve(rhs);
        Ok(WhitenedPosterior {
            mean,
            precision: chol.chol,
        })
    }

    /// Whitened covariance `B^{-1}`.
    pub fn cov(&self) -> DMatrix<f64> {
        crate::linalg::spd_inverse(&self.precision)
    }

    /// `log det B^{-1}`.
    pub fn log_det_cov(&self) -> f64 {
        let l = self.precision.l_dirty();
        -(0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum::<f64>()
    }

    pub fn phys_mean(&self, prior: &GaussianPrior) -> Signal {
        &prior.mean + prior.factor.mul(&self.mean)
    }

    /// `S B^{-1} S^T`, formed as `X^T X` with `X = L_B^{-1} S^T`.
    pub fn phys_cov(&self, prior: &GaussianPrior) -> DMatrix<f64> {
        let li = crate::linalg::lower_triangular_inverse(&self.precision.l());
        let x = li * prior.factor.to_dense().transpose();
        symmetrize(&x.tr_mul(&x))
    }

    /// Draws `xi = mean + L_B^{-T} z`; returns the whitened draw.
    pub fn sample_whitened<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.mean.len();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let l = self.precision.l_dirty();
        let mut x = z;
        // back substitution with L^T, reading only the lower triangle
        for i in (0..n).rev() {
            let mut acc = x[i];
            for k in i + 1..n {
                acc -= l[(k, i)] * x[k];
            }
            x[i] = acc / l[(i, i)];
        }
        x + &self.mean
    }
}

/// `S C S^T`.
pub fn phys_cov(factor: &SqrtFactor, c: &DMatrix<f64>) -> DMatrix<f64> {
    let sc = factor.mul_mat(c);
    let scs = factor.mul_mat(&sc.transpose());
    symmetrize(&scs)
}
