//! Sufficient statistics produced by an E-step and consumed by the Q functions
//! and M-steps.

use nalgebra::{DMatrix, DVector};

use crate::factor::{Transfer, SqrtFactor};
use crate::toeplitz::Signal;

/// Moments of one unknown expressed in the whitened coordinates of the prior it
/// was computed under: `x = prior_mean + factor * xi` with `E{xi} = mean`,
/// `Cov{xi} = cov`.
#[derive(Clone, Debug)]
pub struct LatentMoments {
    pub factor: SqrtFactor,
    pub prior_mean: Signal,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LatentMoments {
    /// `transfer * mean` and `tr(transfer cov transfer^T)`, i.e. the whitened
    /// first moment and total variance under another factor.
    pub(crate) fn moved(&self, t: &Transfer) -> (DVector<f64>, f64) {
        (t.apply(&self.mean), t.trace_congruence(&self.cov))
    }

    /// Mean of the pre-lift signal for lifted priors, physical mean otherwise.
    pub fn latent_mean(&self) -> Signal {
        match &self.factor {
            SqrtFactor::Lifted { .. } => self.factor.latent_mul(&self.mean),
            f => &self.prior_mean + f.mul(&self.mean),
        }
    }
}

/// Posterior moments of `(g, w)` from one E-step.
#[derive(Clone, Debug)]
pub struct MomentSet {
    pub g_hat: Signal,
    pub w_hat: Signal,
    pub p_g: DMatrix<f64>,
    pub p_w: DMatrix<f64>,
    /// `E{||y - W g||^2}`-type residual as defined by each backend.
    pub r_y: f64,
    /// Input residual over available samples.
    pub r_v: f64,
    /// Shifted sum of `p_g` (semiparametric backend).
    pub s_g: Option<DMatrix<f64>>,
    /// Shifted sum of `p_w` and `T_w = S_w + Ŵ^T Ŵ` (variational backend).
    pub s_w: Option<DMatrix<f64>>,
    pub t_w: Option<DMatrix<f64>>,
    pub latent_g: Option<LatentMoments>,
    pub latent_w: Option<LatentMoments>,
}
