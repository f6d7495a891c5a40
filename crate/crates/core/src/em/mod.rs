//! Empirical-Bayes EM over `τ = (ρ, θ, σy², σv²)` with three E-steps.

mod mstep;
mod optimize;
mod q;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::factor::{ConvMoment, ConvPrecision};
use crate::gibbs::{chain_moments, run_chain_prepared, ChainConfig};
use crate::model::{Hyperparameters, PreparedModel, UIModel};
use crate::moments::{LatentMoments, MomentSet};
use crate::toeplitz::{convolve, shifted_sum, toeplitz_tr_mul, Signal};
use crate::variational::{initial_state, vb_moments, vb_solve_from, VBState, VB_MAX_ITER, VB_TOL};

pub use mstep::{
    m_step_mc, m_step_semiparam, m_step_vb, semiparam_theta_objective, update_kernel,
    MStepOptions,
};
pub(crate) use q::q_vb_prepared;
pub use optimize::{inner_optimize, nelder_mead, Minimum, INNER_MAX_EVALS};
pub use q::{
    kernel_objective, kernel_objective_physical, log_joint, q_mc, q_semiparam, q_vb,
    semiparam_log_likelihood,
};

/// Which approximation of the E-step integral to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backend {
    /// Exact posterior of `g`; requires a degenerate prior on `w`.
    Semiparam,
    /// Gibbs-sampler particles.
    Mcem,
    /// Mean-field variational factors.
    Vbem,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Semiparam => "semiparam",
            Backend::Mcem => "mcem",
            Backend::Vbem => "vbem",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Backend> {
        match s {
            "semiparam" => Ok(Backend::Semiparam),
            "mcem" => Ok(Backend::Mcem),
            "vbem" => Ok(Backend::Vbem),
            _ => Err(Error::Config(format!("unknown backend {s:?}"))),
        }
    }
}

/// Gibbs settings of the Monte-Carlo E-step.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSettings {
    pub burn_in: usize,
    pub retained: usize,
    pub seed: u64,
}

/// Stopping rule and inner settings of one EM run.
#[derive(Clone, Debug, PartialEq)]
pub struct EmOptions {
    pub rel_tol: f64,
    pub max_outer: usize,
    pub mstep: MStepOptions,
    pub chain: ChainSettings,
    pub vb_tol: f64,
    pub vb_max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            rel_tol: 1e-2,
            max_outer: 100,
            mstep: MStepOptions::default(),
            chain: ChainSettings {
                burn_in: 400,
                retained: 2000,
                seed: 0,
            },
            vb_tol: VB_TOL,
            vb_max_iter: VB_MAX_ITER,
        }
    }
}

/// One outer iteration: the hyperparameters the E-step ran at, the Q value
/// there and at the M-step output, and the exact log-likelihood when available.
#[derive(Clone, Debug, PartialEq)]
pub struct EmTraceRow {
    pub iteration: usize,
    pub tau: Hyperparameters,
    pub q: f64,
    pub q_next: f64,
    pub log_likelihood: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmTrace {
    pub rows: Vec<EmTraceRow>,
}

impl EmTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let (nr, nt) = self
            .rows
            .first()
            .map_or((0, 0), |r| (r.tau.rho.len(), r.tau.theta.len()));
        let mut header = vec!["iteration".to_string()];
        header.extend((0..nr).map(|i| format!("rho_{i}")));
        header.extend((0..nt).map(|i| format!("theta_{i}")));
        header.extend(
            ["sigma_y2", "sigma_v2", "q", "q_next", "log_likelihood", "wall_time_s"]
                .iter()
                .map(|s| s.to_string()),
        );
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.iteration.to_string()];
            rec.extend(r.tau.components().iter().map(|x| format!("{x:e}")));
            rec.push(format!("{:e}", r.q));
            rec.push(format!("{:e}", r.q_next));
            rec.push(r.log_likelihood.map_or(String::new(), |l| format!("{l:e}")));
            rec.push(format!("{:.6}", r.wall_time));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Output of [`run_em`].
#[derive(Clone, Debug)]
pub struct EmResult {
    pub tau: Hyperparameters,
    pub trace: EmTrace,
    /// Moments of the final E-step at `tau`.
    pub moments: MomentSet,
    pub g_hat: Signal,
    pub w_hat: Signal,
    pub converged: bool,
    pub iterations: usize,
    /// Exact log-likelihood at `tau` (semiparametric backend).
    pub final_log_likelihood: Option<f64>,
}

impl EmResult {
    /// Whitened moments of `w` from the final E-step.
    pub fn latent_w(&self) -> Option<&LatentMoments> {
        self.moments.latent_w.as_ref()
    }

    /// Posterior mean of the pre-lift signal when the `w` prior is lifted
    /// (the first system of a cascade), else `ŵ`.
    pub fn w_latent(&self) -> Signal {
        self.latent_w()
            .map_or_else(|| self.w_hat.clone(), |l| l.latent_mean())
    }
}

fn check_backend(model: &UIModel, prep: &PreparedModel, backend: Backend) -> Result<()> {
    let mismatch = |reason: &str| Error::BackendMismatch {
        backend: backend.to_string(),
        reason: reason.into(),
    };
    if prep.prior_g.factor.is_zero() {
        return Err(mismatch("the prior on g is degenerate"));
    }
    match backend {
        Backend::Semiparam if !model.prior_w.kernel.is_degenerate() => {
            Err(mismatch("the prior on w must be degenerate"))
        }
        Backend::Mcem | Backend::Vbem if prep.prior_w.factor.is_zero() => {
            Err(mismatch("the prior on w is degenerate"))
        }
        _ => Ok(()),
    }
}

/// Posterior of `g` given `w = μ_w(θ)` and the moments derived from it.
pub(crate) fn semiparam_moments(model: &UIModel, prep: &PreparedModel) -> Result<MomentSet> {
    let sy2 = prep.noise.sigma_y2;
    let mu_w = &prep.prior_w.mean;
    let prec = ConvPrecision {
        moment: ConvMoment::RankOne(mu_w),
        inv_sy2: 1.0 / sy2,
        input: None,
    };
    let post = prep
        .prior_g
        .posterior(&prec, &(toeplitz_tr_mul(mu_w, &model.y) / sy2))?;
    let g_hat = post.phys_mean(&prep.prior_g);
    let p_g = post.phys_cov(&prep.prior_g);
    let s_g = shifted_sum(&p_g)?;
    let n = model.n();
    let r_y = (&model.y - convolve(mu_w, &g_hat)).norm_squared();
    let r_v = match (&model.v, prep.input_prec.is_some()) {
        (Some(v), true) => prep.noise.input_residual(v, mu_w),
        _ => 0.0,
    };
    Ok(MomentSet {
        g_hat,
        w_hat: mu_w.clone(),
        p_g,
        p_w: nalgebra::DMatrix::zeros(n, n),
        r_y,
        r_v,
        s_g: Some(s_g),
        s_w: None,
        t_w: None,
        latent_g: Some(LatentMoments {
            factor: prep.prior_g.factor.clone(),
            prior_mean: prep.prior_g.mean.clone(),
            mean: post.mean.clone(),
            cov: post.cov(),
        }),
        latent_w: None,
    })
}

/// Mutable E-step context carried across iterations.
struct EStep<'a> {
    model: &'a UIModel,
    backend: Backend,
    opts: &'a EmOptions,
    vb: Option<VBState>,
    last_w: Option<Signal>,
}

impl EStep<'_> {
    fn run(&mut self, tau: &Hyperparameters, stream: u64) -> Result<MomentSet> {
        let prep = self.model.prepare(tau)?;
        check_backend(self.model, &prep, self.backend)?;
        match self.backend {
            Backend::Semiparam => semiparam_moments(self.model, &prep),
            Backend::Mcem => {
                let cfg = ChainConfig {
                    burn_in: self.opts.chain.burn_in,
                    retained: self.opts.chain.retained,
                    seed: self.opts.chain.seed,
                    init_w: self.last_w.clone(),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(self.opts.chain.seed);
                rng.set_stream(stream);
                let chain = run_chain_prepared(self.model, &prep, &cfg, &mut rng)?;
                let ms = chain_moments(&chain, self.model, &prep)?;
                self.last_w = Some(ms.w_hat.clone());
                Ok(ms)
            }
            Backend::Vbem => {
                let start = match self.vb.take() {
                    Some(s) => s,
                    None => initial_state(self.model, &prep)?,
                };
                let state = vb_solve_from(
                    start,
                    self.model,
                    &prep,
                    self.opts.vb_tol,
                    self.opts.vb_max_iter,
                )?;
                let ms = vb_moments(&state, self.model, &prep)?;
                self.vb = Some(state);
                Ok(ms)
            }
        }
    }
}

fn q_value(backend: Backend, model: &UIModel, tau: &Hyperparameters, m: &MomentSet) -> Result<f64> {
    match backend {
        Backend::Semiparam => q_semiparam(model, tau, m),
        Backend::Mcem => q_mc(model, tau, m),
        Backend::Vbem => q_vb(model, tau, m),
    }
}

fn m_step(
    backend: Backend,
    model: &UIModel,
    m: &MomentSet,
    tau: &Hyperparameters,
    opts: &MStepOptions,
) -> Result<Hyperparameters> {
    match backend {
        Backend::Semiparam => m_step_semiparam(model, m, tau, opts),
        Backend::Mcem => m_step_mc(model, m, tau, opts),
        Backend::Vbem => m_step_vb(model, m, tau, opts),
    }
}

/// Alternates E- and M-steps from `tau0` until the largest relative change of
/// a finite hyperparameter falls below `rel_tol` or `max_outer` iterations
/// have run, then runs a final E-step at the estimate.
pub fn run_em(
    model: &UIModel,
    backend: Backend,
    tau0: &Hyperparameters,
    opts: &EmOptions,
) -> Result<EmResult> {
    tau0.validate()?;
    if model.v.is_none() && tau0.sigma_v2.is_finite() {
        return Err(Error::Hyperparameter(
            "finite input noise variance without an input measurement".into(),
        ));
    }
    let mut estep = EStep {
        model,
        backend,
        opts,
        vb: None,
        last_w: None,
    };
    let start = Instant::now();
    let mut tau = tau0.clone();
    let mut trace = EmTrace::default();
    let mut converged = false;
    let mut iterations = 0;
    for k in 0..opts.max_outer {
        let step = |estep: &mut EStep, tau: &Hyperparameters| -> Result<(Hyperparameters, EmTraceRow)> {
            let ms = estep.run(tau, k as u64)?;
            let q = q_value(backend, model, tau, &ms)?;
            let next = m_step(backend, model, &ms, tau, &opts.mstep)?;
            let q_next = q_value(backend, model, &next, &ms)?;
            let log_likelihood = match backend {
                Backend::Semiparam => Some(semiparam_log_likelihood(model, tau)?),
                _ => None,
            };
            Ok((
                next,
                EmTraceRow {
                    iteration: k,
                    tau: tau.clone(),
                    q,
                    q_next,
                    log_likelihood,
                    wall_time: start.elapsed().as_secs_f64(),
                },
            ))
        };
        let (next, row) = step(&mut estep, &tau).map_err(|e| e.at_iteration(k))?;
        trace.rows.push(row);
        iterations = k + 1;
        let change = tau.rel_change(&next);
        tau = next;
        if change < opts.rel_tol {
            converged = true;
            break;
        }
    }
    let moments = estep
        .run(&tau, u64::MAX)
        .map_err(|e| e.at_iteration(iterations))?;
    let final_log_likelihood = match backend {
        Backend::Semiparam => Some(semiparam_log_likelihood(model, &tau)?),
        _ => None,
    };
    Ok(EmResult {
        g_hat: moments.g_hat.clone(),
        w_hat: moments.w_hat.clone(),
        tau,
        trace,
        moments,
        converged,
        iterations,
        final_log_likelihood,
    })
}
