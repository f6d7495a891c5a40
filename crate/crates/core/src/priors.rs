//! Mean and kernel specifications for the Gaussian-process priors on `g` and `w`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factor::{GaussianPrior, SqrtFactor};
use crate::linalg::symmetrize;
use crate::toeplitz::{toeplitz, Signal};

/// Constraint on a single hyperparameter, and the map to an unconstrained
/// coordinate used by the inner optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Positive,
    UnitInterval,
    Real,
}

impl Domain {
    pub fn to_free(self, x: f64) -> f64 {
        match self {
            Domain::Positive => x.ln(),
            Domain::UnitInterval => (x / (1.0 - x)).ln(),
            Domain::Real => x,
        }
    }

    pub fn from_free(self, z: f64) -> f64 {
        match self {
            Domain::Positive => z.exp(),
            Domain::UnitInterval => {
                // clamp keeps the result strictly inside (0, 1)
                let x = 1.0 / (1.0 + (-z).exp());
                x.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
            }
            Domain::Real => z,
        }
    }

    pub fn contains(self, x: f64) -> bool {
        match self {
            Domain::Positive => x > 0.0 && x.is_finite(),
            Domain::UnitInterval => x > 0.0 && x < 1.0,
            Domain::Real => x.is_finite(),
        }
    }
}

pub(crate) fn check_stable_spline(scale: f64, decay: f64) -> Result<()> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Hyperparameter(format!(
            "stable-spline scale must be >= 0, got {scale}"
        )));
    }
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::Hyperparameter(format!(
            "stable-spline decay must lie in (0, 1), got {decay}"
        )));
    }
    Ok(())
}

fn check_rbf(scale: f64, width: f64) -> Result<()> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Hyperparameter(format!(
            "rbf scale must be >= 0, got {scale}"
        )));
    }
    if !(width > 0.0) || !width.is_finite() {
        return Err(Error::Hyperparameter(format!(
            "rbf width must be > 0, got {width}"
        )));
    }
    Ok(())
}

/// First-order stable-spline kernel `K_ij = c λ^{max(i,j)}` with 1-based indices.
pub fn stable_spline_matrix(c: f64, lambda: f64, n: usize) -> Result<DMatrix<f64>> {
    check_stable_spline(c, lambda)?;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        c * lambda.powi((i.max(j) + 1) as i32)
    }))
}

/// Gaussian RBF kernel `K_ij = θ1 exp(-(u_i - u_j)^2 / θ2)`.
pub fn rbf_matrix(theta1: f64, theta2: f64, u: &Signal) -> Result<DMatrix<f64>> {
    check_rbf(theta1, theta2)?;
    let n = u.len();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let d = u[i] - u[j];
        theta1 * (-d * d / theta2).exp()
    }))
}

/// RBF cross-covariance between abscissae `a` (rows) and `b` (columns).
pub fn rbf_cross(theta1: f64, theta2: f64, a: &[f64], b: &[f64]) -> Result<DMatrix<f64>> {
    check_rbf(theta1, theta2)?;
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let d = a[i] - b[j];
        theta1 * (-d * d / theta2).exp()
    }))
}

/// `U K1 U^T` with `U` the square Toeplitz matrix of `u`.
pub fn cascade_kernel(k1: &DMatrix<f64>, u: &Signal) -> Result<DMatrix<f64>> {
    let n = u.len();
    if k1.nrows() != n || k1.ncols() != n {
        return Err(Error::Dimension(format!(
            "inner kernel is {}x{} but input has length {}",
            k1.nrows(),
            k1.ncols(),
            n
        )));
    }
    let ut = toeplitz(u, n, n);
    Ok(symmetrize(&(&ut * k1 * ut.transpose())))
}

/// Legendre polynomials of degrees `0..p` evaluated at `u`, one column per degree.
pub fn legendre_basis(u: &Signal, p: usize) -> Result<DMatrix<f64>> {
    if p == 0 {
        return Err(Error::InvalidInput("legendre basis needs p >= 1".into()));
    }
    if let Some(x) = u.iter().find(|x| !(x.abs() <= 1.0)) {
        return Err(Error::InvalidInput(format!(
            "legendre abscissa {x} outside [-1, 1]"
        )));
    }
    let n = u.len();
    let mut phi = DMatrix::zeros(n, p);
    for i in 0..n {
        let x = u[i];
        phi[(i, 0)] = 1.0;
        if p > 1 {
            phi[(i, 1)] = x;
        }
        for j in 1..p.saturating_sub(1) {
            let jf = j as f64;
            phi[(i, j + 1)] =
                ((2.0 * jf + 1.0) * x * phi[(i, j)] - jf * phi[(i, j - 1)]) / (jf + 1.0);
        }
    }
    Ok(phi)
}

/// Covariance family of one unknown.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    /// `c λ^{max(i,j)}`; hyperparameters `(c, λ)`.
    StableSpline { scale: f64, decay: f64 },
    /// Gaussian RBF over the abscissae `input`; hyperparameters `(θ1, θ2)`.
    Rbf { scale: f64, width: f64, input: Signal },
    /// `U K_inner U^T` with `U = T(input)`; hyperparameters those of `inner`.
    CascadeWrapped { inner: Box<KernelSpec>, input: Signal },
    /// The zero matrix.
    Degenerate,
}

impl KernelSpec {
    pub fn hyper(&self) -> Vec<f64> {
        match self {
            KernelSpec::StableSpline { scale, decay } => vec![*scale, *decay],
            KernelSpec::Rbf { scale, width, .. } => vec![*scale, *width],
            KernelSpec::CascadeWrapped { inner, .. } => inner.hyper(),
            KernelSpec::Degenerate => vec![],
        }
    }

    pub fn domains(&self) -> Vec<Domain> {
        match self {
            KernelSpec::StableSpline { .. } => vec![Domain::Positive, Domain::UnitInterval],
            KernelSpec::Rbf { .. } => vec![Domain::Positive, Domain::Positive],
            KernelSpec::CascadeWrapped { inner, .. } => inner.domains(),
            KernelSpec::Degenerate => vec![],
        }
    }

    pub fn with_hyper(&self, h: &[f64]) -> Result<KernelSpec> {
        let expected = self.hyper().len();
        if h.len() != expected {
            return Err(Error::Hyperparameter(format!(
                "kernel takes {expected} hyperparameters, got {}",
                h.len()
            )));
        }
        let out = match self {
            KernelSpec::StableSpline { .. } => {
                check_stable_spline(h[0], h[1])?;
                KernelSpec::StableSpline {
                    scale: h[0],
                    decay: h[1],
                }
            }
            KernelSpec::Rbf { input, .. } => {
                check_rbf(h[0], h[1])?;
                KernelSpec::Rbf {
                    scale: h[0],
                    width: h[1],
                    input: input.clone(),
                }
            }
            KernelSpec::CascadeWrapped { inner, input } => KernelSpec::CascadeWrapped {
                inner: Box::new(inner.with_hyper(h)?),
                input: input.clone(),
            },
            KernelSpec::Degenerate => KernelSpec::Degenerate,
        };
        Ok(out)
    }

    pub fn is_degenerate(&self) -> bool {
        match self {
            KernelSpec::Degenerate => true,
            KernelSpec::StableSpline { scale, .. } | KernelSpec::Rbf { scale, .. } => *scale == 0.0,
            KernelSpec::CascadeWrapped { inner, .. } => inner.is_degenerate(),
        }
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        match self {
            KernelSpec::Rbf { input, .. } | KernelSpec::CascadeWrapped { input, .. }
                if input.len() != n =>
            {
                Err(Error::Dimension(format!(
                    "kernel input has length {} but N = {n}",
                    input.len()
                )))
            }
            KernelSpec::CascadeWrapped { inner, .. } => inner.check_dim(n),
            _ => Ok(()),
        }
    }

    /// Dense kernel matrix.
    pub fn matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        self.check_dim(n)?;
        match self {
            KernelSpec::StableSpline { scale, decay } => stable_spline_matrix(*scale, *decay, n),
            KernelSpec::Rbf {
                scale,
                width,
                input,
            } => rbf_matrix(*scale, *width, input),
            KernelSpec::CascadeWrapped { inner, input } => {
                cascade_kernel(&inner.matrix(n)?, input)
            }
            KernelSpec::Degenerate => Ok(DMatrix::zeros(n, n)),
        }
    }

    /// Square-root factor of the kernel matrix.
    pub fn factor(&self, n: usize) -> Result<SqrtFactor> {
        self.check_dim(n)?;
        match self {
            KernelSpec::StableSpline { scale, decay } => {
                SqrtFactor::stable_spline(*scale, *decay, n)
            }
            KernelSpec::Rbf { .. } => SqrtFactor::dense(&self.matrix(n)?),
            KernelSpec::CascadeWrapped { inner, input } => {
                SqrtFactor::lifted(input, inner.factor(n)?)
            }
            KernelSpec::Degenerate => Ok(SqrtFactor::Zero { n }),
        }
    }
}

/// Mean function of one unknown.
#[derive(Clone, Debug, PartialEq)]
pub enum MeanSpec {
    Zero,
    /// A known signal, e.g. the measured input of a known-input problem.
    Fixed(Signal),
    /// `Φ θ`; the coefficients are hyperparameters.
    Basis { phi: DMatrix<f64>, coeff: DVector<f64> },
}

impl MeanSpec {
    pub fn basis(phi: DMatrix<f64>, coeff: DVector<f64>) -> Result<MeanSpec> {
        if phi.ncols() != coeff.len() {
            return Err(Error::Dimension(format!(
                "basis has {} columns but {} coefficients",
                phi.ncols(),
                coeff.len()
            )));
        }
        Ok(MeanSpec::Basis { phi, coeff })
    }

    pub fn coeffs(&self) -> Vec<f64> {
        match self {
            MeanSpec::Basis { coeff, .. } => coeff.iter().copied().collect(),
            _ => vec![],
        }
    }

    pub fn with_coeffs(&self, c: &[f64]) -> Result<MeanSpec> {
        match self {
            MeanSpec::Basis { phi, .. } => {
                MeanSpec::basis(phi.clone(), DVector::from_column_slice(c))
            }
            other if c.is_empty() => Ok(other.clone()),
            _ => Err(Error::Hyperparameter(format!(
                "mean takes no coefficients, got {}",
                c.len()
            ))),
        }
    }

    pub fn evaluate(&self, n: usize) -> Result<Signal> {
        match self {
            MeanSpec::Zero => Ok(DVector::zeros(n)),
            MeanSpec::Fixed(s) if s.len() == n => Ok(s.clone()),
            MeanSpec::Basis { phi, coeff } if phi.nrows() == n => Ok(phi * coeff),
            MeanSpec::Fixed(s) => Err(Error::Dimension(format!(
                "fixed mean has length {} but N = {n}",
                s.len()
            ))),
            MeanSpec::Basis { phi, .. } => Err(Error::Dimension(format!(
                "basis has {} rows but N = {n}",
                phi.nrows()
            ))),
        }
    }
}

/// Mean and kernel of one unknown. The hyperparameter vector is the kernel
/// hyperparameters followed by the mean coefficients; `pinned` entries are
/// held fixed by the M-steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    pub mean: MeanSpec,
    pub kernel: KernelSpec,
    pub pinned: Vec<bool>,
}

impl PriorSpec {
    pub fn new(mean: MeanSpec, kernel: KernelSpec) -> PriorSpec {
        let n = kernel.hyper().len() + mean.coeffs().len();
        PriorSpec {
            mean,
            kernel,
            pinned: vec![false; n],
        }
    }

    /// Pins hyperparameter `i` at its current value.
    pub fn pin(mut self, i: usize) -> PriorSpec {
        if i < self.pinned.len() {
            self.pinned[i] = true;
        }
        self
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.kernel.hyper();
        p.extend(self.mean.coeffs());
        p
    }

    pub fn n_kernel_params(&self) -> usize {
        self.kernel.hyper().len()
    }

    pub fn domains(&self) -> Vec<Domain> {
        let mut d = self.kernel.domains();
        d.extend(std::iter::repeat(Domain::Real).take(self.mean.coeffs().len()));
        d
    }

    pub fn with_params(&self, p: &[f64]) -> Result<PriorSpec> {
        let nk = self.n_kernel_params();
        if p.len() != self.pinned.len() {
            return Err(Error::Hyperparameter(format!(
                "prior takes {} hyperparameters, got {}",
                self.pinned.len(),
                p.len()
            )));
        }
        Ok(PriorSpec {
            mean: self.mean.with_coeffs(&p[nk..])?,
            kernel: self.kernel.with_hyper(&p[..nk])?,
            pinned: self.pinned.clone(),
        })
    }

    /// Dense mean and kernel at dimension `n`.
    pub fn evaluate(&self, n: usize) -> Result<(Signal, DMatrix<f64>)> {
        evaluate_prior(self, n)
    }

    /// Mean and square-root factor at dimension `n`.
    pub fn gaussian(&self, n: usize) -> Result<GaussianPrior> {
        GaussianPrior::new(self.mean.evaluate(n)?, self.kernel.factor(n)?)
    }

    /// The basis `Φ` when the mean is linear in its coefficients.
    pub fn linear_basis(&self) -> Option<&DMatrix<f64>> {
        match &self.mean {
            MeanSpec::Basis { phi, .. } => Some(phi),
            _ => None,
        }
    }
}

/// Mean vector and kernel matrix of a prior at dimension `n`.
pub fn evaluate_prior(spec: &PriorSpec, n: usize) -> Result<(Signal, DMatrix<f64>)> {
    Ok((spec.mean.evaluate(n)?, spec.kernel.matrix(n)?))
}
