//! Gaussian conditionals of `g` given `w` and of `w` given `g`, the
//! semiparametric posterior of `g`, and the parametric likelihood.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factor::{ConvMoment, ConvPrecision, GaussianPrior};
use crate::linalg::asymmetry;
use crate::toeplitz::{toeplitz_tr_mul, Signal};

/// A Gaussian with explicit mean and covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: Signal,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: Signal, cov: DMatrix<f64>) -> Result<GaussianBelief> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension(format!(
                "belief mean has length {n} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if asymmetry(&cov) > 1e-12 * (1.0 + cov.amax()) {
            return Err(Error::InvalidInput("belief covariance is not symmetric".into()));
        }
        Ok(GaussianBelief { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Noise variances and availability of the input measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub sigma_y2: f64,
    /// `f64::INFINITY` when no input measurement contributes.
    pub sigma_v2: f64,
    /// `true` marks an available input sample; `None` means all available.
    pub v_mask: Option<Vec<bool>>,
}

impl NoiseModel {
    pub fn new(sigma_y2: f64, sigma_v2: f64) -> NoiseModel {
        NoiseModel {
            sigma_y2,
            sigma_v2,
            v_mask: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_y2 > 0.0) || !self.sigma_y2.is_finite() {
            return Err(Error::Hyperparameter(format!(
                "output noise variance must be positive, got {}",
                self.sigma_y2
            )));
        }
        if !(self.sigma_v2 > 0.0) {
            return Err(Error::Hyperparameter(format!(
                "input noise variance must be positive or infinite, got {}",
                self.sigma_v2
            )));
        }
        Ok(())
    }

    fn available(&self, i: usize) -> bool {
        self.v_mask.as_ref().map_or(true, |m| m[i])
    }

    /// Number of input samples that contribute.
    pub fn active_inputs(&self, n: usize) -> usize {
        if self.sigma_v2.is_infinite() {
            return 0;
        }
        (0..n).filter(|&i| self.available(i)).count()
    }

    /// Per-sample input precision, `None` when the input carries no information.
    pub fn input_precision(&self, n: usize) -> Option<DVector<f64>> {
        if self.sigma_v2.is_infinite() || self.active_inputs(n) == 0 {
            return None;
        }
        let p = 1.0 / self.sigma_v2;
        Some(DVector::from_fn(n, |i, _| if self.available(i) { p } else { 0.0 }))
    }

    /// `sum over available samples of (v_i - w_i)^2`.
    pub fn input_residual(&self, v: &Signal, w: &Signal) -> f64 {
        (0..v.len())
            .filter(|&i| self.available(i))
            .map(|i| (v[i] - w[i]).powi(2))
            .sum()
    }
}

fn check_len(name: &str, x: &Signal, n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::Dimension(format!(
            "{name} has length {} but N = {n}",
            x.len()
        )));
    }
    Ok(())
}

/// `p(g | w, y)`: precision `W^T W / σy² + K_g^{-1}`.
pub fn cond_g_given_w(
    w: &Signal,
    y: &Signal,
    prior_g: &GaussianPrior,
    sigma_y2: f64,
) -> Result<GaussianBelief> {
    let n = prior_g.dim();
    check_len("w", w, n)?;
    check_len("y", y, n)?;
    NoiseModel::new(sigma_y2, f64::INFINITY).validate()?;
    let prec = ConvPrecision {
        moment: ConvMoment::RankOne(w),
        inv_sy2: 1.0 / sigma_y2,
        input: None,
    };
    let info = toeplitz_tr_mul(w, y) / sigma_y2;
    let post = prior_g.posterior(&prec, &info)?;
    Ok(GaussianBelief {
        mean: post.phys_mean(prior_g),
        cov: post.phys_cov(prior_g),
    })
}

/// Information vector `G^T y / σy² + diag(p) v` of the `w` conditional.
pub(crate) fn info_w(
    g: &Signal,
    y: &Signal,
    v: Option<&Signal>,
    input_prec: Option<&DVector<f64>>,
    sigma_y2: f64,
) -> DVector<f64> {
    let mut info = toeplitz_tr_mul(g, y) / sigma_y2;
    if let (Some(v), Some(p)) = (v, input_prec) {
        info += p.component_mul(v);
    }
    info
}

/// `p(w | g, y, v)`: precision `G^T G / σy² + I / σv² + K_w^{-1}`. Input terms
/// vanish for masked samples and when `σv² = ∞`.
pub fn cond_w_given_g(
    g: &Signal,
    y: &Signal,
    v: Option<&Signal>,
    prior_w: &GaussianPrior,
    noise: &NoiseModel,
) -> Result<GaussianBelief> {
    let n = prior_w.dim();
    check_len("g", g, n)?;
    check_len("y", y, n)?;
    if let Some(v) = v {
        check_len("v", v, n)?;
    }
    noise.validate()?;
    let input_prec = if v.is_some() {
        noise.input_precision(n)
    } else {
        None
    };
    let prec = ConvPrecision {
        moment: ConvMoment::RankOne(g),
        inv_sy2: 1.0 / noise.sigma_y2,
        input: input_prec.as_ref(),
    };
    let info = info_w(g, y, v, input_prec.as_ref(), noise.sigma_y2);
    let post = prior_w.posterior(&prec, &info)?;
    Ok(GaussianBelief {
        mean: post.phys_mean(prior_w),
        cov: post.phys_cov(prior_w),
    })
}

/// Posterior of `g` when `w` has a degenerate prior at `μ_w(θ)`.
pub fn semiparam_posterior_g(
    mu_w: &Signal,
    y: &Signal,
    prior_g: &GaussianPrior,
    sigma_y2: f64,
) -> Result<GaussianBelief> {
    cond_g_given_w(mu_w, y, prior_g, sigma_y2)
}

/// Negative log-likelihood (constants dropped) of `y = M_w μ_g + ε`,
/// `v = μ_w + η` with both unknowns at their prior means.
pub fn parametric_nll(
    mu_g: &Signal,
    mu_w: &Signal,
    y: &Signal,
    v: Option<&Signal>,
    noise: &NoiseModel,
) -> Result<f64> {
    let n = y.len();
    check_len("mu_g", mu_g, n)?;
    check_len("mu_w", mu_w, n)?;
    noise.validate()?;
    let pred = crate::toeplitz::convolve(mu_w, mu_g);
    let ry = (y - pred).norm_squared();
    let mut out = ry / (2.0 * noise.sigma_y2) + 0.5 * n as f64 * noise.sigma_y2.ln();
    if let Some(v) = v {
        check_len("v", v, n)?;
        let nv = noise.active_inputs(n);
        if nv > 0 {
            out += noise.input_residual(v, mu_w) / (2.0 * noise.sigma_v2)
                + 0.5 * nv as f64 * noise.sigma_v2.ln();
        }
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::SqrtFactor;
    use crate::linalg::min_eigenvalue;
    use crate::priors::stable_spline_matrix;
    use crate::toeplitz::toeplitz;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-300)
    }

    fn scalar_prior(mean: f64, var: f64) -> GaussianPrior {
        GaussianPrior::from_matrix(
            DVector::from_element(1, mean),
            &DMatrix::from_element(1, 1, var),
        )
        .unwrap()
    }

    fn random_instance(n: usize, seed: u64) -> (DVector<f64>, DVector<f64>, DVector<f64>, GaussianPrior, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let mu = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let k = stable_spline_matrix(1.5, 0.7, n).unwrap();
        let prior = GaussianPrior::from_matrix(mu.clone(), &k).unwrap();
        (a, y, mu, prior, k)
    }

    #[test]
    fn scalar_bayes_rule() {
        let b = cond_g_given_w(
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 2.0),
            &scalar_prior(0.0, 1.0),
            1.0,
        )
        .unwrap();
        assert!((b.cov[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((b.mean[0] - 1.0).abs() < 1e-15);

        let noise = NoiseModel::new(1.0, 1.0);
        let b = cond_w_given_g(
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 3.0),
            Some(&DVector::from_element(1, 0.0)),
            &scalar_prior(0.0, 1.0),
            &noise,
        )
        .unwrap();
        assert!((b.cov[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((b.mean[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uninformative_data_recovers_prior() {
        let (w, y, mu, prior, k) = random_instance(4, 1);
        let b = cond_g_given_w(&w, &y, &prior, 1e12).unwrap();
        assert!((&b.mean - &mu).norm() <= 1e-3 * mu.norm());
        assert!(rel_err(&b.cov, &k) < 1e-6);
    }

    #[test]
    fn zero_g_without_input_returns_prior() {
        let (_, y, mu, prior, k) = random_instance(4, 2);
        let noise = NoiseModel::new(0.5, f64::INFINITY);
        let b = cond_w_given_g(&DVector::zeros(4), &y, Some(&y), &prior, &noise).unwrap();
        assert!((&b.mean - &mu).amax() < 1e-14);
        assert!((&b.cov - &k).amax() < 1e-14);
    }

    #[test]
    fn conditionals_match_joint_gaussian_oracle() {
        for n in 1..=5 {
            for seed in 0..5 {
                let (w, y, mu, prior, k) = random_instance(n, 100 + seed);
                let s2 = 0.3;
                let b = cond_g_given_w(&w, &y, &prior, s2).unwrap();
                let h = toeplitz(&w, n, n);
                let (m, p) = oracle::condition(&mu, &k, &h, &(DMatrix::identity(n, n) * s2), &y);
                assert!(rel_err(&DMatrix::from_column_slice(n, 1, b.mean.as_slice()), &DMatrix::from_column_slice(n, 1, m.as_slice())) < 1e-10);
                assert!(rel_err(&b.cov, &p) < 1e-10);

                let b = semiparam_posterior_g(&w, &y, &prior, s2).unwrap();
                assert!((b.mean - &m).amax() <= 1e-10 * m.amax());

                let v = y.map(|x| 0.5 - x);
                let noise = NoiseModel::new(s2, 0.8);
                let g = w.clone();
                let b = cond_w_given_g(&g, &y, Some(&v), &prior, &noise).unwrap();
                let mut h = DMatrix::zeros(2 * n, n);
                h.view_mut((0, 0), (n, n)).copy_from(&toeplitz(&g, n, n));
                h.view_mut((n, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
                let mut r = DMatrix::identity(2 * n, 2 * n) * 0.8;
                r.view_mut((0, 0), (n, n)).copy_from(&(DMatrix::identity(n, n) * s2));
                let z = DVector::from_iterator(2 * n, y.iter().chain(v.iter()).copied());
                let (m, p) = oracle::condition(&mu, &k, &h, &r, &z);
                assert!((b.mean - &m).amax() <= 1e-10 * m.amax());
                assert!(rel_err(&b.cov, &p) < 1e-10);
            }
        }
    }

    #[test]
    fn masked_input_matches_oracle() {
        let n = 4;
        let (g, y, mu, prior, k) = random_instance(n, 7);
        let v = y.map(|x| x * 0.3 + 0.1);
        let mask = vec![true, false, true, false];
        let noise = NoiseModel {
            sigma_y2: 0.4,
            sigma_v2: 0.9,
            v_mask: Some(mask.clone()),
        };
        let b = cond_w_given_g(&g, &y, Some(&v), &prior, &noise).unwrap();
        let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        let nv = idx.len();
        let mut h = DMatrix::zeros(n + nv, n);
        h.view_mut((0, 0), (n, n)).copy_from(&toeplitz(&g, n, n));
        for (r, &i) in idx.iter().enumerate() {
            h[(n + r, i)] = 1.0;
        }
        let mut r = DMatrix::identity(n + nv, n + nv) * 0.9;
        r.view_mut((0, 0), (n, n)).copy_from(&(DMatrix::identity(n, n) * 0.4));
        let z = DVector::from_iterator(n + nv, y.iter().copied().chain(idx.iter().map(|&i| v[i])));
        let (m, p) = oracle::condition(&mu, &k, &h, &r, &z);
        assert!((b.mean - &m).amax() <= 1e-10 * m.amax());
        assert!(rel_err(&b.cov, &p) < 1e-10);
    }

    #[test]
    fn impulse_mean_gives_identity_regression() {
        let n = 4;
        let (_, y, _, prior, k) = random_instance(n, 3);
        let mut imp = DVector::zeros(n);
        imp[0] = 1.0;
        let b = semiparam_posterior_g(&imp, &y, &prior, 0.5).unwrap();
        let expected = (DMatrix::identity(n, n) / 0.5 + k.try_inverse().unwrap())
            .try_inverse()
            .unwrap();
        assert!(rel_err(&b.cov, &expected) < 1e-10);
    }

    #[test]
    fn hammerstein_style_mean_matches_oracle() {
        let n = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let phi = crate::priors::legendre_basis(&u, 3).unwrap();
        let mu_w = phi * DVector::from_vec(vec![0.2, -0.7, 0.5]);
        let y = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let k = stable_spline_matrix(1.0, 0.6, n).unwrap();
        let prior = GaussianPrior::new(DVector::zeros(n), SqrtFactor::stable_spline(1.0, 0.6, n).unwrap()).unwrap();
        let b = semiparam_posterior_g(&mu_w, &y, &prior, 0.1).unwrap();
        let (m, p) = oracle::condition(
            &DVector::zeros(n),
            &k,
            &toeplitz(&mu_w, n, n),
            &(DMatrix::identity(n, n) * 0.1),
            &y,
        );
        assert!((b.mean - &m).amax() <= 1e-10 * m.amax());
        assert!(rel_err(&b.cov, &p) < 1e-10);
    }

    #[test]
    fn parametric_nll_examples() {
        let g = DVector::from_vec(vec![1.0, 0.5]);
        let w = DVector::from_vec(vec![2.0, -1.0]);
        let y = crate::toeplitz::convolve(&w, &g);
        let noise = NoiseModel::new(1.0, 1.0);
        assert_eq!(parametric_nll(&g, &w, &y, Some(&w), &noise).unwrap(), 0.0);
        let noise2 = NoiseModel::new(2.0, 1.0);
        let d = parametric_nll(&g, &w, &y, Some(&w), &noise2).unwrap();
        assert!((d - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn parametric_nll_matches_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let w = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let noise = NoiseModel::new(0.3, 0.7);
        let nll = parametric_nll(&g, &w, &y, Some(&v), &noise).unwrap();
        // sum of univariate Gaussian log densities, with the 2π constants removed
        let pred = toeplitz(&w, n, n) * &g;
        let logpdf = |x: f64, m: f64, s2: f64| {
            -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - (x - m).powi(2) / (2.0 * s2)
        };
        let mut ll = 0.0;
        for i in 0..n {
            ll += logpdf(y[i], pred[i], 0.3) + logpdf(v[i], w[i], 0.7);
        }
        let c = n as f64 * (2.0 * std::f64::consts::PI).ln();
        assert!((-ll - c - nll).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn conditional_covariances_are_psd(
            seed in 0u64..1_000_000,
            n in 1usize..8,
            s2 in 0.01f64..10.0,
        ) {
            let (w, y, _, prior, _) = random_instance(n, seed);
            let b = cond_g_given_w(&w, &y, &prior, s2).unwrap();
            prop_assert!(asymmetry(&b.cov) <= 1e-12 * (1.0 + b.cov.amax()));
            prop_assert!(min_eigenvalue(&b.cov) >= -1e-8);
            let noise = NoiseModel::new(s2, 1.0);
            let b = cond_w_given_g(&w, &y, Some(&y), &prior, &noise).unwrap();
            prop_assert!(min_eigenvalue(&b.cov) >= -1e-8);
        }

        #[test]
        fn infinite_input_variance_equals_no_input(
            seed in 0u64..1_000_000,
            n in 1usize..8,
        ) {
            let (g, y, _, prior, _) = random_instance(n, seed);
            let v = y.map(|x| x * 2.0);
            let with_v = cond_w_given_g(&g, &y, Some(&v), &prior, &NoiseModel::new(0.5, f64::INFINITY)).unwrap();
            let without = cond_w_given_g(&g, &y, None, &prior, &NoiseModel::new(0.5, 1.0)).unwrap();
            prop_assert_eq!(with_v, without);
        }

        #[test]
        fn huge_noise_recovers_prior(
            seed in 0u64..1_000_000,
            n in 1usize..8,
        ) {
            let (g, y, mu, prior, k) = random_instance(n, seed);
            let b = cond_w_given_g(&g, &y, Some(&y), &prior, &NoiseModel::new(1e12, 1e12)).unwrap();
            prop_assert!((&b.mean - &mu).amax() <= 1e-6 * (1.0 + mu.amax()));
            prop_assert!((&b.cov - &k).amax() <= 1e-6 * k.amax());
        }
    }
}
