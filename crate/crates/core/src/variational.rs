//! Mean-field variational approximation `q(g) q(w)` of the joint posterior.

use nalgebra::DMatrix;

use crate::conditionals::{info_w, GaussianBelief};
use crate::error::{Error, Result};
use crate::factor::{ConvMoment, ConvPrecision, WhitenedPosterior};
use crate::gibbs::check_nondegenerate;
use crate::model::{Hyperparameters, PreparedModel, UIModel};
use crate::moments::{LatentMoments, MomentSet};
use crate::toeplitz::{convolve, shifted_sum, toeplitz_gram, toeplitz_tr_mul};

/// Default relative tolerance on the factor means.
pub const VB_TOL: f64 = 1e-6;
/// Default iteration cap.
pub const VB_MAX_ITER: usize = 500;

/// Current factors, in physical form and (once updated) in the whitened
/// coordinates of the priors they were computed under.
#[derive(Clone, Debug)]
pub struct VBState {
    pub q_g: GaussianBelief,
    pub q_w: GaussianBelief,
    pub iteration: usize,
    pub converged: bool,
    pub(crate) white_g: Option<WhitenedPosterior>,
    pub(crate) white_w: Option<WhitenedPosterior>,
}

impl VBState {
    /// Initial factors: `q_w` at the measured input (or pilot, or prior mean),
    /// `q_g` at the prior mean when nonzero, else at the posterior mean of `g`
    /// given that input; covariances at the priors.
    pub fn initial(model: &UIModel, tau: &Hyperparameters) -> Result<VBState> {
        let prep = model.prepare(tau)?;
        initial_state(model, &prep)
    }
}

pub(crate) fn initial_state(model: &UIModel, prep: &PreparedModel) -> Result<VBState> {
    check_nondegenerate(prep, "vbem")?;
    let w0 = model.initial_w(&prep.prior_w.mean);
    let sy2 = prep.noise.sigma_y2;
    let white_g = if prep.prior_g.mean.iter().any(|x| *x != 0.0) {
        prep.prior_g.as_whitened()
    } else {
        let prec = ConvPrecision {
            moment: ConvMoment::RankOne(&w0),
            inv_sy2: 1.0 / sy2,
            input: None,
        };
        let post = prep
            .prior_g
            .posterior(&prec, &(toeplitz_tr_mul(&w0, &model.y) / sy2))?;
        WhitenedPosterior::from_precision(
            DMatrix::identity(model.n(), model.n()),
            &post.mean,
        )?
    };
    let kg = prep.prior_g.factor.covariance();
    let kw = prep.prior_w.factor.covariance();
    Ok(VBState {
        q_g: GaussianBelief {
            mean: white_g.phys_mean(&prep.prior_g),
            cov: kg,
        },
        q_w: GaussianBelief { mean: w0, cov: kw },
        iteration: 0,
        converged: false,
        white_g: Some(white_g),
        white_w: None,
    })
}

/// One sweep: update `q_w` from the current `q_g`, then `q_g` from the new `q_w`.
pub fn vb_step(state: &VBState, model: &UIModel, tau: &Hyperparameters) -> Result<VBState> {
    let prep = model.prepare(tau)?;
    vb_step_prepared(state, model, &prep)
}

pub(crate) fn vb_step_prepared(
    state: &VBState,
    model: &UIModel,
    prep: &PreparedModel,
) -> Result<VBState> {
    check_nondegenerate(prep, "vbem")?;
    let (q_w, white_w) = update_w(&state.q_g, model, prep)?;
    let (q_g, white_g) = update_g(&q_w, model, prep)?;
    Ok(VBState {
        q_g,
        q_w,
        iteration: state.iteration + 1,
        converged: false,
        white_g: Some(white_g),
        white_w: Some(white_w),
    })
}

/// Optimal `q_w` for a given `q_g`.
fn update_w(
    q_g: &GaussianBelief,
    model: &UIModel,
    prep: &PreparedModel,
) -> Result<(GaussianBelief, WhitenedPosterior)> {
    let sy2 = prep.noise.sigma_y2;
    let v = if prep.input_prec.is_some() {
        model.v.as_ref()
    } else {
        None
    };
    let qg2 = &q_g.cov + &q_g.mean * q_g.mean.transpose();
    let prec_w = ConvPrecision {
        moment: ConvMoment::Full(&qg2),
        inv_sy2: 1.0 / sy2,
        input: prep.input_prec.as_ref(),
    };
    let info = info_w(&q_g.mean, &model.y, v, prep.input_prec.as_ref(), sy2);
    let white_w = prep.prior_w.posterior(&prec_w, &info)?;
    let q_w = GaussianBelief {
        mean: white_w.phys_mean(&prep.prior_w),
        cov: white_w.phys_cov(&prep.prior_w),
    };
    Ok((q_w, white_w))
}

/// Optimal `q_g` for a given `q_w`.
fn update_g(
    q_w: &GaussianBelief,
    model: &UIModel,
    prep: &PreparedModel,
) -> Result<(GaussianBelief, WhitenedPosterior)> {
    let sy2 = prep.noise.sigma_y2;
    let qw2 = &q_w.cov + &q_w.mean * q_w.mean.transpose();
    let prec_g = ConvPrecision {
        moment: ConvMoment::Full(&qw2),
        inv_sy2: 1.0 / sy2,
        input: None,
    };
    let white_g = prep
        .prior_g
        .posterior(&prec_g, &(toeplitz_tr_mul(&q_w.mean, &model.y) / sy2))?;
    let q_g = GaussianBelief {
        mean: white_g.phys_mean(&prep.prior_g),
        cov: white_g.phys_cov(&prep.prior_g),
    };
    Ok((q_g, white_g))
}

fn rel_change(a: &nalgebra::DVector<f64>, b: &nalgebra::DVector<f64>) -> f64 {
    (a - b).norm() / (a.norm() + 1e-12)
}

/// Iterates [`vb_step`] from the default initialization until the relative
/// change of the `q_g` mean over one sweep is below `tol` or `max_iter` sweeps
/// are done.
pub fn vb_solve(
    model: &UIModel,
    tau: &Hyperparameters,
    tol: f64,
    max_iter: usize,
) -> Result<VBState> {
    let prep = model.prepare(tau)?;
    let init = initial_state(model, &prep)?;
    vb_solve_from(init, model, &prep, tol, max_iter)
}

/// As [`vb_solve`], starting from a given state.
///
/// Sweeps are accelerated by squared extrapolation of the `q_g` mean: from
/// two sweeps `x1 = F(x0)`, `x2 = F(x1)` the mean jumps to
/// `x0 - 2a r + a^2 d` with `r = x1 - x0`, `d = x2 - 2 x1 + x0` and
/// `a = -|r| / |d|`, followed by one stabilizing sweep. The jump is kept only
/// if the ELBO is at least that of `x2`, so the bound never decreases over the
/// states visited and the fixed points are those of [`vb_step`].
pub fn vb_solve_from(
    state: VBState,
    model: &UIModel,
    prep: &PreparedModel,
    tol: f64,
    max_iter: usize,
) -> Result<VBState> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    check_nondegenerate(prep, "vbem")?;
    // a state carried over from other hyperparameters gets one plain sweep
    let mut x = Sweep::from(&state.q_g, model, prep)?;
    let mut sweeps = 1;
    let mut step_max = 4.0;
    let done = |a: &Sweep, b: &Sweep| rel_change(&a.q_g.mean, &b.q_g.mean) < tol;
    let mut converged = false;
    while sweeps < max_iter {
        let x1 = Sweep::from(&x.q_g, model, prep)?;
        sweeps += 1;
        if done(&x, &x1) {
            (x, converged) = (x1, true);
            break;
        }
        if sweeps >= max_iter {
            x = x1;
            break;
        }
        let x2 = Sweep::from(&x1.q_g, model, prep)?;
        sweeps += 1;
        if done(&x1, &x2) {
            (x, converged) = (x2, true);
            break;
        }
        let r = &x1.white_g.mean - &x.white_g.mean;
        let d = &x2.white_g.mean - &x1.white_g.mean * 2.0 + &x.white_g.mean;
        let a = -(r.norm() / d.norm()).min(step_max);
        let mut next = None;
        if a < -1.0 && a.is_finite() && sweeps < max_iter {
            let mut white = x2.white_g.clone();
            white.mean = &x.white_g.mean - &r * (2.0 * a) + &d * (a * a);
            let jumped = GaussianBelief {
                mean: white.phys_mean(&prep.prior_g),
                cov: x2.q_g.cov.clone(),
            };
            if let Ok(x3) = Sweep::from(&jumped, model, prep) {
                sweeps += 1;
                if x3.bound(model, prep)? >= x2.bound(model, prep)? {
                    next = Some(x3);
                }
            }
        }
        x = match next {
            Some(x3) => {
                if -a >= step_max {
                    step_max *= 4.0;
                }
                x3
            }
            None => {
                step_max = (step_max / 4.0).max(4.0);
                x2
            }
        };
    }
    if !converged && sweeps < max_iter.max(1) {
        x = Sweep::from(&x.q_g, model, prep)?;
        sweeps += 1;
    }
    Ok(VBState {
        q_g: x.q_g,
        q_w: x.q_w,
        iteration: sweeps,
        converged,
        white_g: Some(x.white_g),
        white_w: Some(x.white_w),
    })
}

/// Result of one plain sweep from a given `q_g`.
struct Sweep {
    q_g: GaussianBelief,
    q_w: GaussianBelief,
    white_g: WhitenedPosterior,
    white_w: WhitenedPosterior,
}

impl Sweep {
    fn from(q_g: &GaussianBelief, model: &UIModel, prep: &PreparedModel) -> Result<Sweep> {
        let (q_w, white_w) = update_w(q_g, model, prep)?;
        let (q_g, white_g) = update_g(&q_w, model, prep)?;
        Ok(Sweep {
            q_g,
            q_w,
            white_g,
            white_w,
        })
    }

    fn bound(&self, model: &UIModel, prep: &PreparedModel) -> Result<f64> {
        bound_of(&self.q_g, &self.white_g, &self.q_w, &self.white_w, model, prep)
    }
}

fn bound_of(
    q_g: &GaussianBelief,
    white_g: &WhitenedPosterior,
    q_w: &GaussianBelief,
    white_w: &WhitenedPosterior,
    model: &UIModel,
    prep: &PreparedModel,
) -> Result<f64> {
    let state = VBState {
        q_g: q_g.clone(),
        q_w: q_w.clone(),
        iteration: 0,
        converged: false,
        white_g: Some(white_g.clone()),
        white_w: Some(white_w.clone()),
    };
    elbo_prepared(&state, model, prep)
}

/// Moments consumed by the variational Q function and M-step.
pub(crate) fn vb_moments(
    state: &VBState,
    model: &UIModel,
    prep: &PreparedModel,
) -> Result<MomentSet> {
    let (white_g, white_w) = match (&state.white_g, &state.white_w) {
        (Some(g), Some(w)) => (g, w),
        _ => {
            return Err(Error::InvalidInput(
                "variational state has not been updated yet".into(),
            ))
        }
    };
    let ghat = &state.q_g.mean;
    let what = &state.q_w.mean;
    let r_y = (&model.y - convolve(what, ghat)).norm_squared();
    let r_v = match (&model.v, prep.input_prec.is_some()) {
        (Some(v), true) => prep.noise.input_residual(v, what),
        _ => 0.0,
    };
    let s_w = shifted_sum(&state.q_w.cov)?;
    let t_w = &s_w + toeplitz_gram(what);
    Ok(MomentSet {
        g_hat: ghat.clone(),
        w_hat: what.clone(),
        p_g: state.q_g.cov.clone(),
        p_w: state.q_w.cov.clone(),
        r_y,
        r_v,
        s_g: None,
        s_w: Some(s_w),
        t_w: Some(t_w),
        latent_g: Some(LatentMoments {
            factor: prep.prior_g.factor.clone(),
            prior_mean: prep.prior_g.mean.clone(),
            mean: white_g.mean.clone(),
            cov: white_g.cov(),
        }),
        latent_w: Some(LatentMoments {
            factor: prep.prior_w.factor.clone(),
            prior_mean: prep.prior_w.mean.clone(),
            mean: white_w.mean.clone(),
            cov: white_w.cov(),
        }),
    })
}

/// Evidence lower bound (constants dropped consistently with the Q functions):
/// the variational Q function plus the entropies of both factors.
pub fn elbo(state: &VBState, model: &UIModel, tau: &Hyperparameters) -> Result<f64> {
    elbo_prepared(state, model, &model.prepare(tau)?)
}

pub(crate) fn elbo_prepared(state: &VBState, model: &UIModel, prep: &PreparedModel) -> Result<f64> {
    let ms = vb_moments(state, model, prep)?;
    let q = crate::em::q_vb_prepared(model, prep, &ms)?;
    let ent = |w: &Option<WhitenedPosterior>, p: &crate::factor::GaussianPrior| {
        w.as_ref()
            .map_or(0.0, |w| 0.5 * (p.factor.log_det() + w.log_det_cov()))
    };
    Ok(q + ent(&state.white_g, &prep.prior_g) + ent(&state.white_w, &prep.prior_w))
}
