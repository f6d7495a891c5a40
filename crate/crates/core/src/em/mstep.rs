//! M-steps: kernel hyperparameters by inner optimization, input-mean
//! coefficients of the semiparametric model, and closed-form noise variances.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg::cholesky_jittered;
use crate::model::{Hyperparameters, UIModel};
use crate::moments::{LatentMoments, MomentSet};
use crate::priors::PriorSpec;
use crate::toeplitz::{convolve, shifted_sum, toeplitz, Signal};

use super::optimize::{inner_optimize, Minimum};
use super::q::{
    kernel_objective, kernel_objective_physical, vb_input_residual, vb_output_residual,
};

/// Knobs of the M-steps.
#[derive(Clone, Debug, PartialEq)]
pub struct MStepOptions {
    pub max_evals: usize,
    /// Solve the semiparametric input-mean update in closed form when the mean
    /// is linear in its coefficients.
    pub linear_shortcut: bool,
}

impl Default for MStepOptions {
    fn default() -> Self {
        MStepOptions {
            max_evals: super::optimize::INNER_MAX_EVALS,
            linear_shortcut: true,
        }
    }
}

fn free_mask(spec: &PriorSpec) -> Vec<bool> {
    spec.pinned.iter().map(|p| !p).collect()
}

/// Minimizes the kernel objective of `spec` over its free hyperparameters.
pub fn update_kernel(
    spec: &PriorSpec,
    start: &[f64],
    n: usize,
    latent: Option<&LatentMoments>,
    mean: &Signal,
    cov: &DMatrix<f64>,
    max_evals: usize,
) -> Minimum {
    let objective = |p: &[f64]| -> f64 {
        let prior = match spec.with_params(p).and_then(|s| s.gaussian(n)) {
            Ok(prior) => prior,
            Err(_) => return f64::INFINITY,
        };
        let v = match latent {
            Some(l) => kernel_objective(&prior, l),
            None => kernel_objective_physical(&prior, mean, cov),
        };
        v.unwrap_or(f64::INFINITY)
    };
    inner_optimize(objective, start, &spec.domains(), &free_mask(spec), max_evals)
}

fn floor(x: f64) -> f64 {
    x.max(f64::MIN_POSITIVE)
}

/// Objective of the semiparametric input-mean update at frozen noise variances:
/// `[||y - M_w ĝ||^2 + μ_w^T Ŝ_g μ_w] / σy² + ||v - μ_w||^2 / σv²`.
pub fn semiparam_theta_objective(
    model: &UIModel,
    m: &MomentSet,
    s_g: &DMatrix<f64>,
    tau: &Hyperparameters,
    theta: &[f64],
) -> Result<f64> {
    let n = model.n();
    let mu_w = model.prior_w.with_params(theta)?.mean.evaluate(n)?;
    let ry = (&model.y - convolve(&mu_w, &m.g_hat)).norm_squared();
    let quad = mu_w.dot(&(s_g * &mu_w));
    let mut h = (ry + quad) / tau.sigma_y2;
    let noise = model.noise(tau);
    if noise.active_inputs(n) > 0 {
        let v = model.v.as_ref().expect("active inputs imply a measurement");
        h += noise.input_residual(v, &mu_w) / tau.sigma_v2;
    }
    Ok(h)
}

fn semiparam_theta_linear(
    model: &UIModel,
    m: &MomentSet,
    s_g: &DMatrix<f64>,
    tau: &Hyperparameters,
    phi: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let n = model.n();
    let gt = toeplitz(&m.g_hat, n, n);
    let a = (gt.tr_mul(&gt) + s_g) / tau.sigma_y2;
    let mut gram = phi.tr_mul(&(&a * phi));
    let mut rhs = phi.tr_mul(&gt.tr_mul(&model.y)) / tau.sigma_y2;
    if let Some(p) = model.noise(tau).input_precision(n) {
        let v = model.v.as_ref().expect("input precision implies a measurement");
        let dphi = DMatrix::from_fn(n, phi.ncols(), |i, j| p[i] * phi[(i, j)]);
        gram += phi.tr_mul(&dphi);
        rhs += phi.tr_mul(&p.component_mul(v));
    }
    let gram = crate::linalg::symmetrize(&gram);
    let sol: DVector<f64> = match cholesky_jittered(&gram) {
        Ok(c) if c.jitter == 0.0 => c.solve(&rhs),
        _ => gram
            .clone()
            .svd(true, true)
            .solve(&rhs, 1e-12 * gram.amax())
            .map_err(|e| crate::Error::InvalidInput(e.to_string()))?,
    };
    Ok(sol.iter().copied().collect())
}

/// Semiparametric M-step: `ρ` by inner optimization, `θ` with the noise
/// variances frozen, then the closed-form variances at the new `θ`.
pub fn m_step_semiparam(
    model: &UIModel,
    m: &MomentSet,
    tau: &Hyperparameters,
    opts: &MStepOptions,
) -> Result<Hyperparameters> {
    let n = model.n();
    let rho = update_kernel(
        &model.prior_g,
        &tau.rho,
        n,
        m.latent_g.as_ref(),
        &m.g_hat,
        &m.p_g,
        opts.max_evals,
    )
    .x;

    let s_g = match &m.s_g {
        Some(s) => s.clone(),
        None => shifted_sum(&m.p_g)?,
    };
    let spec = &model.prior_w;
    let nk = spec.n_kernel_params();
    let coeff_free = spec.pinned[nk..].iter().all(|p| !p);
    let theta = if tau.theta.is_empty() || spec.pinned.iter().all(|p| *p) {
        tau.theta.clone()
    } else if let (Some(phi), true, true, true) = (
        spec.linear_basis(),
        opts.linear_shortcut,
        coeff_free,
        nk == 0,
    ) {
        semiparam_theta_linear(model, m, &s_g, tau, phi)?
    } else {
        let obj = |th: &[f64]| {
            semiparam_theta_objective(model, m, &s_g, tau, th).unwrap_or(f64::INFINITY)
        };
        inner_optimize(
            obj,
            &tau.theta,
            &spec.domains(),
            &free_mask(spec),
            opts.max_evals,
        )
        .x
    };

    let mu_w = spec.with_params(&theta)?.mean.evaluate(n)?;
    let ry = (&model.y - convolve(&mu_w, &m.g_hat)).norm_squared() + mu_w.dot(&(&s_g * &mu_w));
    let sigma_y2 = floor(ry / n as f64);
    let noise = model.noise(tau);
    let nv = noise.active_inputs(n);
    let sigma_v2 = if nv > 0 {
        let v = model.v.as_ref().expect("active inputs imply a measurement");
        floor(noise.input_residual(v, &mu_w) / nv as f64)
    } else {
        tau.sigma_v2
    };
    Ok(Hyperparameters {
        rho,
        theta,
        sigma_y2,
        sigma_v2,
    })
}

fn kernel_updates(
    model: &UIModel,
    m: &MomentSet,
    tau: &Hyperparameters,
    opts: &MStepOptions,
) -> (Vec<f64>, Vec<f64>) {
    let n = model.n();
    let rho = update_kernel(
        &model.prior_g,
        &tau.rho,
        n,
        m.latent_g.as_ref(),
        &m.g_hat,
        &m.p_g,
        opts.max_evals,
    )
    .x;
    let theta = update_kernel(
        &model.prior_w,
        &tau.theta,
        n,
        m.latent_w.as_ref(),
        &m.w_hat,
        &m.p_w,
        opts.max_evals,
    )
    .x;
    (rho, theta)
}

/// Monte-Carlo M-step: decoupled kernel updates, `σy² = R_y / N`,
/// `σv² = R_v / N_v`.
pub fn m_step_mc(
    model: &UIModel,
    m: &MomentSet,
    tau: &Hyperparameters,
    opts: &MStepOptions,
) -> Result<Hyperparameters> {
    let (rho, theta) = kernel_updates(model, m, tau, opts);
    let n = model.n();
    let nv = model.active_inputs(tau);
    Ok(Hyperparameters {
        rho,
        theta,
        sigma_y2: floor(m.r_y / n as f64),
        sigma_v2: if nv > 0 {
            floor(m.r_v / nv as f64)
        } else {
            tau.sigma_v2
        },
    })
}

/// Variational M-step: decoupled kernel updates,
/// `σy² = [R_y + ĝ^T S_w ĝ + tr(T_w P_g)] / N`, `σv² = [R_v + tr P_w] / N_v`.
pub fn m_step_vb(
    model: &UIModel,
    m: &MomentSet,
    tau: &Hyperparameters,
    opts: &MStepOptions,
) -> Result<Hyperparameters> {
    let (rho, theta) = kernel_updates(model, m, tau, opts);
    let n = model.n();
    let nv = model.active_inputs(tau);
    Ok(Hyperparameters {
        rho,
        theta,
        sigma_y2: floor(vb_output_residual(m)? / n as f64),
        sigma_v2: if nv > 0 {
            floor(vb_input_residual(model, &model.noise(tau), m) / nv as f64)
        } else {
            tau.sigma_v2
        },
    })
}
