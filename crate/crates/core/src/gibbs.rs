//! Gibbs sampling of `(g, w)` from their joint posterior and sample moments.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditionals::{info_w, GaussianBelief, NoiseModel};
use crate::error::{Error, Result};
use crate::factor::{ConvMoment, ConvPrecision};
use crate::linalg::{cholesky_jittered, symmetrize};
use crate::model::{Hyperparameters, PreparedModel, UIModel};
use crate::moments::{LatentMoments, MomentSet};
use crate::toeplitz::{convolve, toeplitz_tr_mul, Signal};

/// Burn-in, retained sample count and seed of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub retained: usize,
    pub seed: u64,
    /// Overrides the default starting input (measurement, pilot or prior mean).
    pub init_w: Option<Signal>,
}

impl ChainConfig {
    pub fn new(burn_in: usize, retained: usize, seed: u64) -> ChainConfig {
        ChainConfig {
            burn_in,
            retained,
            seed,
            init_w: None,
        }
    }
}

/// Retained samples, both physical and in the whitened coordinates of the priors.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub g: Vec<Signal>,
    pub w: Vec<Signal>,
    pub xi_g: Vec<DVector<f64>>,
    pub xi_w: Vec<DVector<f64>>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    /// Writes `iteration, g_0.., w_0..` rows.
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let n = self.g.first().map_or(0, |g| g.len());
        let mut header = vec!["iteration".to_string()];
        header.extend((0..n).map(|i| format!("g_{i}")));
        header.extend((0..n).map(|i| format!("w_{i}")));
        writeln!(f, "{}", header.join(","))?;
        for (j, (g, w)) in self.g.iter().zip(&self.w).enumerate() {
            let row: Vec<String> = g.iter().chain(w.iter()).map(|x| format!("{x:e}")).collect();
            writeln!(f, "{j},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `mean + L z` with `L` the (jittered) lower Cholesky factor of the covariance.
pub fn draw_gaussian<R: Rng + ?Sized>(belief: &GaussianBelief, rng: &mut R) -> Result<Signal> {
    if belief.cov.iter().all(|x| *x == 0.0) {
        return Ok(belief.mean.clone());
    }
    let l = cholesky_jittered(&belief.cov)?.l();
    let z = DVector::from_fn(belief.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(&belief.mean + l * z)
}

/// Runs `burn_in + retained` sweeps, each drawing `g | w` then `w | g`, and
/// keeps the last `retained` pairs.
pub fn run_chain(model: &UIModel, tau: &Hyperparameters, cfg: &ChainConfig) -> Result<Chain> {
    let prep = model.prepare(tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run_chain_prepared(model, &prep, cfg, &mut rng)
}

pub(crate) fn check_nondegenerate(prep: &PreparedModel, backend: &str) -> Result<()> {
    for (name, p) in [("g", &prep.prior_g), ("w", &prep.prior_w)] {
        if p.factor.is_zero() {
            return Err(Error::BackendMismatch {
                backend: backend.into(),
                reason: format!("the prior on {name} is degenerate"),
            });
        }
    }
    Ok(())
}

pub(crate) fn run_chain_prepared<R: Rng + ?Sized>(
    model: &UIModel,
    prep: &PreparedModel,
    cfg: &ChainConfig,
    rng: &mut R,
) -> Result<Chain> {
    check_nondegenerate(prep, "mcem")?;
    if cfg.retained == 0 {
        return Err(Error::InvalidInput("chain must retain at least one sample".into()));
    }
    let y = &model.y;
    let sy2 = prep.noise.sigma_y2;
    let mut w = match &cfg.init_w {
        Some(w) if w.len() == model.n() => w.clone(),
        Some(w) => {
            return Err(Error::Dimension(format!(
                "chain start has length {} but N = {}",
                w.len(),
                model.n()
            )))
        }
        None => model.initial_w(&prep.prior_w.mean),
    };
    let v = if prep.input_prec.is_some() {
        model.v.as_ref()
    } else {
        None
    };
    let mut chain = Chain {
        g: Vec::with_capacity(cfg.retained),
        w: Vec::with_capacity(cfg.retained),
        xi_g: Vec::with_capacity(cfg.retained),
        xi_w: Vec::with_capacity(cfg.retained),
    };
    for it in 0..cfg.burn_in + cfg.retained {
        let prec_g = ConvPrecision {
            moment: ConvMoment::RankOne(&w),
            inv_sy2: 1.0 / sy2,
            input: None,
        };
        let post_g = prep
            .prior_g
            .posterior(&prec_g, &(toeplitz_tr_mul(&w, y) / sy2))
            .map_err(|e| e.at_iteration(it))?;
        let xi_g = post_g.sample_whitened(rng);
        let g = &prep.prior_g.mean + prep.prior_g.factor.mul(&xi_g);

        let prec_w = ConvPrecision {
            moment: ConvMoment::RankOne(&g),
            inv_sy2: 1.0 / sy2,
            input: prep.input_prec.as_ref(),
        };
        let info = info_w(&g, y, v, prep.input_prec.as_ref(), sy2);
        let post_w = prep
            .prior_w
            .posterior(&prec_w, &info)
            .map_err(|e| e.at_iteration(it))?;
        let xi_w = post_w.sample_whitened(rng);
        w = &prep.prior_w.mean + prep.prior_w.factor.mul(&xi_w);

        if it >= cfg.burn_in {
            chain.g.push(g);
            chain.w.push(w.clone());
            chain.xi_g.push(xi_g);
            chain.xi_w.push(xi_w);
        }
    }
    Ok(chain)
}

fn mean_and_cov(xs: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let m = xs.len() as f64;
    let n = xs[0].len();
    let mut mean = DVector::zeros(n);
    for x in xs {
        mean += x;
    }
    mean /= m;
    let mut cov = DMatrix::zeros(n, n);
    for x in xs {
        let d = x - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= m;
    (mean, symmetrize(&cov))
}

/// Sample means, `1/M`-normalized centered covariances and average residuals
/// `R_y = mean ||y - W g||^2`, `R_v = mean ||v - w||^2` (available samples only).
pub fn sample_moments(
    g: &[Signal],
    w: &[Signal],
    y: &Signal,
    v: Option<&Signal>,
    noise: &NoiseModel,
) -> Result<MomentSet> {
    if g.is_empty() || g.len() != w.len() {
        return Err(Error::InvalidInput(format!(
            "need matching non-empty sample lists, got {} and {}",
            g.len(),
            w.len()
        )));
    }
    let m = g.len() as f64;
    let (g_hat, p_g) = mean_and_cov(g);
    let (w_hat, p_w) = mean_and_cov(w);
    let r_y = g
        .iter()
        .zip(w)
        .map(|(g, w)| (y - convolve(w, g)).norm_squared())
        .sum::<f64>()
        / m;
    let r_v = match v {
        Some(v) if noise.sigma_v2.is_finite() => {
            w.iter().map(|w| noise.input_residual(v, w)).sum::<f64>() / m
        }
        _ => 0.0,
    };
    Ok(MomentSet {
        g_hat,
        w_hat,
        p_g,
        p_w,
        r_y,
        r_v,
        s_g: None,
        s_w: None,
        t_w: None,
        latent_g: None,
        latent_w: None,
    })
}

/// Sample moments of a chain, including whitened moments relative to `prep`.
pub(crate) fn chain_moments(
    chain: &Chain,
    model: &UIModel,
    prep: &PreparedModel,
) -> Result<MomentSet> {
    let v = if prep.input_prec.is_some() {
        model.v.as_ref()
    } else {
        None
    };
    let mut ms = sample_moments(&chain.g, &chain.w, &model.y, v, &prep.noise)?;
    let (ag, cg) = mean_and_cov(&chain.xi_g);
    let (aw, cw) = mean_and_cov(&chain.xi_w);
    ms.latent_g = Some(LatentMoments {
        factor: prep.prior_g.factor.clone(),
        prior_mean: prep.prior_g.mean.clone(),
        mean: ag,
        cov: cg,
    });
    ms.latent_w = Some(LatentMoments {
        factor: prep.prior_w.factor.clone(),
        prior_mean: prep.prior_w.mean.clone(),
        mean: aw,
        cov: cw,
    });
    Ok(ms)
}
