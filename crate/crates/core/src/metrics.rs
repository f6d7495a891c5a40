//! Goodness-of-fit scores and the known-input kernel baselines.

use nalgebra::{DMatrix, DVector};

use crate::em::{run_em, Backend, EmOptions, EmResult};
use crate::error::{Error, Result};
use crate::factor::SqrtFactor;
use crate::model::{Hyperparameters, UIModel};
use crate::moments::LatentMoments;
use crate::priors::{rbf_cross, KernelSpec, MeanSpec, PriorSpec};
use crate::toeplitz::{convolve, toeplitz, Signal};

/// Number of abscissae of the nonlinearity grid.
pub const GRID_POINTS: usize = 300;

/// `1 - ||truth - estimate|| / ||truth - mean(truth)||`; `None` when the truth
/// is constant.
pub fn fit_metric(truth: &Signal, estimate: &Signal) -> Result<Option<f64>> {
    if truth.len() != estimate.len() {
        return Err(Error::Dimension(format!(
            "truth has length {} but estimate has {}",
            truth.len(),
            estimate.len()
        )));
    }
    if truth.is_empty() {
        return Ok(None);
    }
    let centered = truth.add_scalar(-truth.mean());
    let denom = centered.norm();
    if denom <= 1e-14 * truth.norm() || denom == 0.0 {
        return Ok(None);
    }
    Ok(Some(1.0 - (truth - estimate).norm() / denom))
}

/// `GRID_POINTS` equispaced points on `[-1, 1]`.
pub fn nonlinearity_grid() -> Signal {
    let step = 2.0 / (GRID_POINTS - 1) as f64;
    DVector::from_fn(GRID_POINTS, |i, _| (-1.0 + i as f64 * step).min(1.0))
}

/// Fit of a nonlinearity estimate, both curves evaluated on the same grid.
pub fn nonlinearity_fit(f_true: &Signal, f_est: &Signal) -> Result<Option<f64>> {
    fit_metric(f_true, f_est)
}

/// Posterior mean of an RBF-modeled nonlinearity at `grid`, from the whitened
/// posterior moments of its values at the abscissae `u`:
/// `K(grid, u) S^-T â` with `S` the factor used by the E-step.
pub fn rbf_readout(latent: &LatentMoments, theta: &[f64], u: &Signal, grid: &Signal) -> Result<Signal> {
    let l = match &latent.factor {
        SqrtFactor::Dense { l, .. } => l,
        _ => {
            return Err(Error::InvalidInput(
                "the read-out needs a dense kernel factor".into(),
            ))
        }
    };
    if theta.len() != 2 {
        return Err(Error::Hyperparameter(format!(
            "RBF kernel takes 2 hyperparameters, got {}",
            theta.len()
        )));
    }
    if l.nrows() != u.len() {
        return Err(Error::Dimension("factor and abscissae disagree".into()));
    }
    let coef = l
        .tr_solve_lower_triangular(&latent.mean)
        .ok_or(Error::NotPositiveDefinite { jitter: latent.factor.jitter() })?;
    let kx = rbf_cross(theta[0], theta[1], grid.as_slice(), u.as_slice())?;
    let prior_at_u = latent.prior_mean.mean();
    // only zero or constant prior means are meaningful off the abscissae
    Ok(kx * coef + DVector::from_element(grid.len(), prior_at_u))
}

/// Impulse-response estimate from a known input.
#[derive(Clone, Debug)]
pub struct KnownInputFit {
    pub g: Signal,
    pub tau: Hyperparameters,
    pub em: EmResult,
}

/// Stable-spline empirical-Bayes estimate of `g` from `y = T(u) g + e`, by the
/// semiparametric EM with the input pinned to `u`.
pub fn known_input_eb(
    u: &Signal,
    y: &Signal,
    sigma_y2: f64,
    init_rho: &[f64],
    opts: &EmOptions,
) -> Result<KnownInputFit> {
    if u.len() != y.len() {
        return Err(Error::Dimension(format!(
            "input has length {} but output has {}",
            u.len(),
            y.len()
        )));
    }
    let prior_g = PriorSpec::new(
        MeanSpec::Zero,
        KernelSpec::StableSpline {
            scale: init_rho[0],
            decay: init_rho[1],
        },
    );
    let prior_w = PriorSpec::new(MeanSpec::Fixed(u.clone()), KernelSpec::Degenerate);
    let model = UIModel::new(y.clone(), None, prior_g, prior_w)?;
    let tau0 = Hyperparameters {
        rho: init_rho.to_vec(),
        theta: vec![],
        sigma_y2,
        sigma_v2: f64::INFINITY,
    };
    let em = run_em(&model, Backend::Semiparam, &tau0, opts)?;
    Ok(KnownInputFit {
        g: em.g_hat.clone(),
        tau: em.tau.clone(),
        em,
    })
}

/// FIR least squares of `output` on the first `taps` lags of `input`; returns
/// the coefficients and the residual variance `RSS / (N - taps)`.
pub fn fir_least_squares(input: &Signal, output: &Signal, taps: usize) -> Result<(Signal, f64)> {
    let n = input.len();
    if output.len() != n {
        return Err(Error::Dimension("input and output lengths differ".into()));
    }
    if taps == 0 || taps >= n {
        return Err(Error::InvalidInput(format!("{taps} taps for {n} samples")));
    }
    let x = toeplitz(input, n, taps);
    let coef = lstsq(&x, output)?;
    let rss = (output - &x * &coef).norm_squared();
    Ok((coef, rss / (n - taps) as f64))
}

pub(crate) fn lstsq(x: &DMatrix<f64>, y: &Signal) -> Result<Signal> {
    let svd = x.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    svd.solve(y, tol).map_err(|e| Error::InvalidInput(e.to_string()))
}

/// FIR length used to initialize noise variances of the cascade estimators.
pub const INIT_FIR_TAPS: usize = 50;

pub(crate) fn init_noise(input: &Signal, output: &Signal) -> Result<f64> {
    let taps = INIT_FIR_TAPS.min(input.len() / 2).max(1);
    let (_, s2) = fir_least_squares(input, output, taps)?;
    Ok(s2.max(1e-12 * output.norm_squared() / output.len() as f64).max(f64::MIN_POSITIVE))
}

/// Root mean square of `x`, or one for an all-zero signal.
pub fn rms(x: &Signal) -> f64 {
    let r = (x.norm_squared() / x.len().max(1) as f64).sqrt();
    if r > 0.0 && r.is_finite() {
        r
    } else {
        1.0
    }
}

/// [`known_input_eb`] on unit-RMS copies of `u` and `y`, with `g` mapped back
/// to the original units (`tau` and `em` stay standardized). Makes the fixed
/// initial hyperparameters scale-free.
pub fn known_input_eb_scaled(u: &Signal, y: &Signal, init_rho: &[f64], opts: &EmOptions) -> Result<KnownInputFit> {
    let (su, sy) = (rms(u), rms(y));
    let (u1, y1) = (u / su, y / sy);
    let mut fit = known_input_eb(&u1, &y1, init_noise(&u1, &y1)?, init_rho, opts)?;
    fit.g *= sy / su;
    Ok(fit)
}

/// Impulse-response pair of a cascade estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadePair {
    pub g1: Signal,
    pub g2: Signal,
}

/// A baseline estimate with the known-input fits of its two stages.
#[derive(Clone, Debug)]
pub struct BaselineFit {
    pub pair: CascadePair,
    pub stages: [KnownInputFit; 2],
}

impl BaselineFit {
    fn new(first: KnownInputFit, second: KnownInputFit) -> BaselineFit {
        BaselineFit {
            pair: CascadePair {
                g1: first.g.clone(),
                g2: second.g.clone(),
            },
            stages: [first, second],
        }
    }
}

/// First system from `(u, v)`; the intermediate signal is simulated from the
/// estimate and used as the input of the second.
pub fn two_stage_cascade(
    u: &Signal,
    v: &Signal,
    y: &Signal,
    init_rho: &[f64],
    opts: &EmOptions,
) -> Result<BaselineFit> {
    let first = known_input_eb_scaled(u, v, init_rho, opts)?;
    let w = convolve(u, &first.g);
    let second = known_input_eb_scaled(&w, y, init_rho, opts)?;
    Ok(BaselineFit::new(first, second))
}

/// First system from `(u, v)`, second from `(v, y)` as if `v` were noiseless.
pub fn naive_cascade(
    u: &Signal,
    v: &Signal,
    y: &Signal,
    init_rho: &[f64],
    opts: &EmOptions,
) -> Result<BaselineFit> {
    let first = known_input_eb_scaled(u, v, init_rho, opts)?;
    let second = known_input_eb_scaled(v, y, init_rho, opts)?;
    Ok(BaselineFit::new(first, second))
}
