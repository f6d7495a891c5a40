//! Q functions of the three E-steps, the kernel objective shared by the
//! M-steps, and the exact marginal likelihood of the semiparametric model.
//!
//! All log densities drop the `2π` normalizers except
//! [`semiparam_log_likelihood`], which is a proper log density.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::factor::{ConvMoment, ConvPrecision, GaussianPrior};
use crate::conditionals::NoiseModel;
use crate::model::{Hyperparameters, PreparedModel, UIModel};
use crate::moments::{LatentMoments, MomentSet};
use crate::toeplitz::{convolve, shifted_sum, toeplitz_tr_mul, Signal};

/// `||m - μ||^2_{K^{-1}} + tr(K^{-1} P) + log det K` evaluated from moments
/// held in whitened coordinates of another prior of the same family.
pub fn kernel_objective(prior: &GaussianPrior, m: &LatentMoments) -> Result<f64> {
    if prior.factor.is_zero() {
        return Err(Error::Hyperparameter("kernel objective of a degenerate prior".into()));
    }
    let t = prior.factor.transfer_from(&m.factor)?;
    let (mut r, tr) = m.moved(&t);
    if m.prior_mean != prior.mean {
        r += prior.factor.solve(&(&m.prior_mean - &prior.mean))?;
    }
    Ok(r.norm_squared() + tr + prior.factor.log_det())
}

/// The same objective from physical moments `(m, P)`.
pub fn kernel_objective_physical(
    prior: &GaussianPrior,
    mean: &Signal,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    if prior.factor.is_zero() {
        return Err(Error::Hyperparameter("kernel objective of a degenerate prior".into()));
    }
    let r = prior.factor.solve(&(mean - &prior.mean))?;
    let n = prior.dim();
    let mut y = DMatrix::zeros(n, n);
    for j in 0..n {
        y.set_column(j, &prior.factor.solve(&cov.column(j).into_owned())?);
    }
    let mut tr = 0.0;
    for i in 0..n {
        let zi = prior.factor.solve(&y.row(i).transpose())?;
        tr += zi[i];
    }
    Ok(r.norm_squared() + tr + prior.factor.log_det())
}

fn kernel_term(
    prior: &GaussianPrior,
    latent: Option<&LatentMoments>,
    mean: &Signal,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    match latent {
        Some(l) => kernel_objective(prior, l),
        None => kernel_objective_physical(prior, mean, cov),
    }
}

struct NoiseTerms {
    n: f64,
    nv: f64,
    sy2: f64,
    sv2: f64,
}

impl NoiseTerms {
    fn new(model: &UIModel, tau: &Hyperparameters) -> NoiseTerms {
        NoiseTerms::of(model, &model.noise(tau))
    }

    fn of(model: &UIModel, noise: &NoiseModel) -> NoiseTerms {
        NoiseTerms {
            n: model.n() as f64,
            nv: noise.active_inputs(model.n()) as f64,
            sy2: noise.sigma_y2,
            sv2: noise.sigma_v2,
        }
    }

    fn value(&self, ry: f64, rv: f64) -> f64 {
        let mut q = -ry / (2.0 * self.sy2) - 0.5 * self.n * self.sy2.ln();
        if self.nv > 0.0 {
            q += -rv / (2.0 * self.sv2) - 0.5 * self.nv * self.sv2.ln();
        }
        q
    }
}

/// Complete-data log density `log p(y, v, g, w; τ)` without `2π` terms. A
/// degenerate `w` prior contributes nothing (its density is a point mass).
pub fn log_joint(model: &UIModel, tau: &Hyperparameters, g: &Signal, w: &Signal) -> Result<f64> {
    let prep = model.prepare(tau)?;
    let noise = NoiseTerms::new(model, tau);
    let ry = (&model.y - convolve(w, g)).norm_squared();
    let rv = match &model.v {
        Some(v) => prep.noise.input_residual(v, w),
        None => 0.0,
    };
    let mut q = noise.value(ry, rv);
    let n = model.n();
    let zero = DMatrix::zeros(n, n);
    q -= 0.5 * kernel_objective_physical(&prep.prior_g, g, &zero)?;
    if !prep.prior_w.factor.is_zero() {
        q -= 0.5 * kernel_objective_physical(&prep.prior_w, w, &zero)?;
    }
    Ok(q)
}

/// Q function of the semiparametric E-step, with `(ĝ, P̂_g)` from the
/// posterior of `g` at the previous hyperparameters.
pub fn q_semiparam(model: &UIModel, tau: &Hyperparameters, m: &MomentSet) -> Result<f64> {
    let prep = model.prepare(tau)?;
    let mu_w = &prep.prior_w.mean;
    let ry = (&model.y - convolve(mu_w, &m.g_hat)).norm_squared();
    let s_g = match &m.s_g {
        Some(s) => s.clone(),
        None => shifted_sum(&m.p_g)?,
    };
    let quad = mu_w.dot(&(&s_g * mu_w));
    let rv = match &model.v {
        Some(v) => prep.noise.input_residual(v, mu_w),
        None => 0.0,
    };
    let noise = NoiseTerms::new(model, tau);
    let kg = kernel_term(&prep.prior_g, m.latent_g.as_ref(), &m.g_hat, &m.p_g)?;
    Ok(noise.value(ry + quad, rv) - 0.5 * kg)
}

/// Q function of the Monte-Carlo E-step (particle averages).
pub fn q_mc(model: &UIModel, tau: &Hyperparameters, m: &MomentSet) -> Result<f64> {
    let prep = model.prepare(tau)?;
    let noise = NoiseTerms::new(model, tau);
    let kg = kernel_term(&prep.prior_g, m.latent_g.as_ref(), &m.g_hat, &m.p_g)?;
    let kw = kernel_term(&prep.prior_w, m.latent_w.as_ref(), &m.w_hat, &m.p_w)?;
    Ok(noise.value(m.r_y, m.r_v) - 0.5 * kg - 0.5 * kw)
}

/// Output residual of the variational E-step,
/// `E{||y - W g||^2} = R_y + ĝ^T S_w ĝ + tr(T_w P_g)`.
pub(crate) fn vb_output_residual(m: &MomentSet) -> Result<f64> {
    let (s_w, t_w) = vb_contractions(m)?;
    Ok(m.r_y + m.g_hat.dot(&(&s_w * &m.g_hat)) + t_w.component_mul(&m.p_g).sum())
}

fn vb_contractions(m: &MomentSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match (&m.s_w, &m.t_w) {
        (Some(s), Some(t)) => Ok((s.clone(), t.clone())),
        _ => {
            let s = shifted_sum(&m.p_w)?;
            let t = &s + crate::toeplitz::toeplitz_gram(&m.w_hat);
            Ok((s, t))
        }
    }
}

/// Input residual of the variational E-step, `||v - ŵ||^2 + tr P_w` over
/// available samples.
pub(crate) fn vb_input_residual(model: &UIModel, noise: &NoiseModel, m: &MomentSet) -> f64 {
    if noise.active_inputs(model.n()) == 0 {
        return 0.0;
    }
    let mask = model.v_mask.as_ref();
    let tr: f64 = (0..model.n())
        .filter(|&i| mask.map_or(true, |mk| mk[i]))
        .map(|i| m.p_w[(i, i)])
        .sum();
    m.r_v + tr
}

/// Q function of the variational E-step (expectation under `q_g q_w`).
pub fn q_vb(model: &UIModel, tau: &Hyperparameters, m: &MomentSet) -> Result<f64> {
    q_vb_prepared(model, &model.prepare(tau)?, m)
}

pub(crate) fn q_vb_prepared(model: &UIModel, prep: &PreparedModel, m: &MomentSet) -> Result<f64> {
    let noise = NoiseTerms::of(model, &prep.noise);
    let ry = vb_output_residual(m)?;
    let rv = vb_input_residual(model, &prep.noise, m);
    let kg = kernel_term(&prep.prior_g, m.latent_g.as_ref(), &m.g_hat, &m.p_g)?;
    let kw = kernel_term(&prep.prior_w, m.latent_w.as_ref(), &m.w_hat, &m.p_w)?;
    Ok(noise.value(ry, rv) - 0.5 * kg - 0.5 * kw)
}

/// Exact `log p(y, v; τ)` of the semiparametric model, where
/// `y ~ N(M_w μ_g, M_w K_g M_w^T + σy² I)` and `v ~ N(μ_w, σv² I)` on the
/// available samples.
pub fn semiparam_log_likelihood(model: &UIModel, tau: &Hyperparameters) -> Result<f64> {
    let prep = model.prepare(tau)?;
    let n = model.n() as f64;
    let sy2 = tau.sigma_y2;
    let mu_w = &prep.prior_w.mean;
    let r = &model.y - convolve(mu_w, &prep.prior_g.mean);
    let prec = ConvPrecision {
        moment: ConvMoment::RankOne(mu_w),
        inv_sy2: 1.0 / sy2,
        input: None,
    };
    let post = prep
        .prior_g
        .posterior(&prec, &(toeplitz_tr_mul(mu_w, &model.y) / sy2))?;
    let z = prep.prior_g.factor.tr_mul(&(toeplitz_tr_mul(mu_w, &r) / sy2));
    let log_det_c = n * sy2.ln() - post.log_det_cov();
    let quad = r.norm_squared() / sy2 - z.dot(&post.mean);
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut ll = -0.5 * (n * ln2pi + log_det_c + quad);
    let nv = model.active_inputs(tau) as f64;
    if nv > 0.0 {
        let v = model.v.as_ref().expect("active inputs imply a measurement");
        let rv = prep.noise.input_residual(v, mu_w);
        ll += -0.5 * (nv * (ln2pi + tau.sigma_v2.ln()) + rv / tau.sigma_v2);
    }
    Ok(ll)
}
