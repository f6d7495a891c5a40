//! Joint estimators of the two benchmark structures: cascaded linear systems
//! and Hammerstein systems.

use nalgebra::{DMatrix, DVector};

use crate::em::{run_em, Backend, EmOptions, EmResult};
use crate::error::{Error, Result};
use crate::metrics::{init_noise, lstsq, nonlinearity_grid, rbf_readout, rms, CascadePair};
use crate::model::{Hyperparameters, UIModel};
use crate::priors::{legendre_basis, KernelSpec, MeanSpec, PriorSpec};
use crate::toeplitz::{toeplitz, Signal};

fn stable_spline(rho: &[f64]) -> KernelSpec {
    KernelSpec::StableSpline {
        scale: rho[0],
        decay: rho[1],
    }
}

/// `y = T(w) g2 + e`, `v = w + η`, `w = T(u) g1` with stable-spline priors on
/// both impulse responses.
pub fn cascade_model(u: &Signal, v: &Signal, y: &Signal, init_rho: &[f64], init_theta: &[f64]) -> Result<UIModel> {
    let prior_g = PriorSpec::new(MeanSpec::Zero, stable_spline(init_rho));
    let prior_w = PriorSpec::new(
        MeanSpec::Zero,
        KernelSpec::CascadeWrapped {
            inner: Box::new(stable_spline(init_theta)),
            input: u.clone(),
        },
    );
    UIModel::new(y.clone(), Some(v.clone()), prior_g, prior_w)
}

/// Kernel hyperparameters as given; noise variances from FIR least squares of
/// `v` on `u` and of `y` on `v`.
pub fn cascade_init(u: &Signal, v: &Signal, y: &Signal, init_rho: &[f64], init_theta: &[f64]) -> Result<Hyperparameters> {
    Ok(Hyperparameters {
        rho: init_rho.to_vec(),
        theta: init_theta.to_vec(),
        sigma_y2: init_noise(v, y)?,
        sigma_v2: init_noise(u, v)?,
    })
}

/// Joint-model cascade estimate; `em` refers to the standardized data.
#[derive(Clone, Debug)]
pub struct CascadeFit {
    pub pair: CascadePair,
    /// Posterior mean of the intermediate signal.
    pub w: Signal,
    pub em: EmResult,
}

/// Estimate of a cascade by EM on the joint model. The model is fitted to
/// unit-RMS copies of `u`, `v` and `y`; the returned signals are in the
/// original units.
pub fn fit_cascade_joint(
    u: &Signal,
    v: &Signal,
    y: &Signal,
    backend: Backend,
    init_rho: &[f64],
    init_theta: &[f64],
    opts: &EmOptions,
) -> Result<CascadeFit> {
    if backend == Backend::Semiparam {
        return Err(Error::BackendMismatch {
            backend: backend.to_string(),
            reason: "a cascade has a random intermediate signal".into(),
        });
    }
    let (su, sv, sy) = (rms(u), rms(v), rms(y));
    let (u1, v1, y1) = (u / su, v / sv, y / sy);
    let model = cascade_model(&u1, &v1, &y1, init_rho, init_theta)?;
    let tau0 = cascade_init(&u1, &v1, &y1, init_rho, init_theta)?;
    let em = run_em(&model, backend, &tau0, opts)?;
    Ok(CascadeFit {
        pair: CascadePair {
            g1: em.w_latent() * (sv / su),
            g2: &em.g_hat * (sy / sv),
        },
        w: &em.w_hat * sv,
        em,
    })
}

/// Rank-one fit of an overparameterized Hammerstein FIR model.
#[derive(Clone, Debug, PartialEq)]
pub struct OverparamFit {
    /// FIR coefficients, scaled to sum to one.
    pub g: Signal,
    /// Legendre coefficients of the nonlinearity, in the same scaling.
    pub coeffs: Vec<f64>,
    /// `RSS / (N - taps * basis)`.
    pub sigma_y2: f64,
}

/// FIR length of the overparameterized fit with `n_basis` basis functions.
pub fn overparam_taps(n: usize, n_basis: usize) -> usize {
    (n / (2 * n_basis.max(1))).clamp(3, 30)
}

/// Least squares of `y_t = sum_k sum_j b_kj P_j(u_{t-k})`, then the leading
/// singular pair of `B` split into an impulse response and a nonlinearity.
pub fn overparam_least_squares(u: &Signal, y: &Signal, n_basis: usize, taps: usize) -> Result<OverparamFit> {
    let n = u.len();
    if y.len() != n {
        return Err(Error::Dimension("input and output lengths differ".into()));
    }
    let cols = taps * n_basis;
    if cols == 0 || cols >= n {
        return Err(Error::InvalidInput(format!(
            "{taps} taps with {n_basis} basis functions for {n} samples"
        )));
    }
    let phi = legendre_basis(u, n_basis)?;
    let mut x = DMatrix::zeros(n, cols);
    for j in 0..n_basis {
        let tj = toeplitz(&phi.column(j).into_owned(), n, taps);
        for k in 0..taps {
            x.set_column(k * n_basis + j, &tj.column(k));
        }
    }
    let b = lstsq(&x, y)?;
    let rss = (y - &x * &b).norm_squared();
    let bm = DMatrix::from_fn(taps, n_basis, |k, j| b[k * n_basis + j]);
    // leading right singular vector from the eigenvectors of B^T B
    let eig = bm.tr_mul(&bm).symmetric_eigen();
    let i = eig.eigenvalues.imax();
    let right = eig.eigenvectors.column(i).into_owned();
    let mut g: Signal = &bm * &right;
    let mut c: Vec<f64> = right.iter().copied().collect();
    let sum = g.sum();
    let scale = if sum.abs() > 1e-8 { sum } else { g[g.iamax()] };
    g /= scale;
    c.iter_mut().for_each(|x| *x *= scale);
    Ok(OverparamFit {
        g,
        coeffs: c,
        sigma_y2: (rss / (n - cols) as f64).max(f64::MIN_POSITIVE),
    })
}

fn gain(g: &Signal) -> f64 {
    let s = g.sum();
    if s.abs() < 1e-12 || !s.is_finite() {
        1.0
    } else {
        s
    }
}

/// Rescales `(g, f)` so that `g` sums to one, keeping `g * f` unchanged.
pub fn normalize_pair(g: &Signal, f: &Signal) -> (Signal, Signal) {
    let s = gain(g);
    (g / s, f * s)
}

/// Hammerstein estimate with the nonlinearity evaluated on the scoring grid,
/// normalized so that `g` sums to one.
#[derive(Clone, Debug)]
pub struct HammersteinFit {
    pub g: Signal,
    pub f_grid: Signal,
    /// Estimate of the intermediate signal, in the scaling of `f_grid`.
    pub w: Signal,
    /// Refers to the standardized output.
    pub em: EmResult,
}

/// Both Hammerstein estimators work on a unit-RMS copy of `y`; the
/// nonlinearity is mapped back to the original units.
///
/// Semiparametric estimator: `w = Φ θ` with Legendre polynomials up to
/// `degree`, stable-spline prior on `g`.
pub fn fit_hammerstein_parametric(
    u: &Signal,
    y: &Signal,
    degree: usize,
    init_rho: &[f64],
    opts: &EmOptions,
) -> Result<HammersteinFit> {
    let p = degree + 1;
    let sy = rms(y);
    let y = &(y / sy);
    let ls = overparam_least_squares(u, y, p, overparam_taps(u.len(), p))?;
    let phi = legendre_basis(u, p)?;
    let prior_w = PriorSpec::new(
        MeanSpec::basis(phi, DVector::from_column_slice(&ls.coeffs))?,
        KernelSpec::Degenerate,
    );
    let prior_g = PriorSpec::new(MeanSpec::Zero, stable_spline(init_rho));
    let model = UIModel::new(y.clone(), None, prior_g, prior_w)?;
    let tau0 = Hyperparameters {
        rho: init_rho.to_vec(),
        theta: ls.coeffs.clone(),
        sigma_y2: ls.sigma_y2,
        sigma_v2: f64::INFINITY,
    };
    let em = run_em(&model, Backend::Semiparam, &tau0, opts)?;
    let grid = nonlinearity_grid();
    let f = legendre_basis(&grid, p)? * DVector::from_column_slice(&em.tau.theta) * sy;
    let (g, f_grid) = normalize_pair(&em.g_hat, &f);
    let w = &em.w_hat * (sy * gain(&em.g_hat));
    Ok(HammersteinFit { g, f_grid, w, em })
}

/// Nonparametric estimator: RBF prior over the input abscissae with the scale
/// pinned, started from the pilot nonlinearity of an overparameterized fit
/// with Legendre polynomials up to `pilot_degree`.
pub fn fit_hammerstein_nonparametric(
    u: &Signal,
    y: &Signal,
    backend: Backend,
    pilot_degree: usize,
    init_rho: &[f64],
    init_theta: &[f64],
    opts: &EmOptions,
) -> Result<HammersteinFit> {
    if backend == Backend::Semiparam {
        return Err(Error::BackendMismatch {
            backend: backend.to_string(),
            reason: "the nonparametric model has a random input".into(),
        });
    }
    let p = pilot_degree + 1;
    let sy = rms(y);
    let y = &(y / sy);
    let ls = overparam_least_squares(u, y, p, overparam_taps(u.len(), p))?;
    let pilot = legendre_basis(u, p)? * DVector::from_column_slice(&ls.coeffs);
    let prior_w = PriorSpec::new(
        MeanSpec::Zero,
        KernelSpec::Rbf {
            scale: init_theta[0],
            width: init_theta[1],
            input: u.clone(),
        },
    )
    .pin(0);
    let prior_g = PriorSpec::new(MeanSpec::Zero, stable_spline(init_rho));
    let model = UIModel::new(y.clone(), None, prior_g, prior_w)?.with_pilot(pilot)?;
    let tau0 = Hyperparameters {
        rho: init_rho.to_vec(),
        theta: init_theta.to_vec(),
        sigma_y2: ls.sigma_y2,
        sigma_v2: f64::INFINITY,
    };
    let em = run_em(&model, backend, &tau0, opts)?;
    let latent = em
        .latent_w()
        .ok_or_else(|| Error::InvalidInput("missing whitened input moments".into()))?;
    let f = rbf_readout(latent, &em.tau.theta, u, &nonlinearity_grid())? * sy;
    let (g, f_grid) = normalize_pair(&em.g_hat, &f);
    let w = &em.w_hat * (sy * gain(&em.g_hat));
    Ok(HammersteinFit { g, f_grid, w, em })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_cascade_dataset, hammerstein_from_parts, sample_system, CascadeSpec};
    use crate::metrics::fit_metric;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn overparam_fit_recovers_a_noiseless_hammerstein() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u: Signal = DVector::from_fn(200, |_, _| rng.gen_range(-1.0..=1.0));
        let g = DVector::from_vec(vec![0.5, 0.3, 0.2]);
        let coeffs = vec![0.2, -0.7, 0.4];
        let phi = legendre_basis(&u, 3).unwrap();
        let w = &phi * DVector::from_column_slice(&coeffs);
        let y = crate::toeplitz::convolve(&w, &g);
        let fit = overparam_least_squares(&u, &y, 3, 5).unwrap();
        assert!((fit.g.rows(0, 3) - &g).amax() < 1e-8);
        assert!(fit.g.rows(3, 2).amax() < 1e-8);
        for (a, b) in fit.coeffs.iter().zip(&coeffs) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(fit.sigma_y2 < 1e-20);
    }

    #[test]
    fn normalization_keeps_the_product() {
        let g = DVector::from_vec(vec![2.0, 2.0]);
        let f = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let (gn, fn_) = normalize_pair(&g, &f);
        assert_eq!(gn.sum(), 1.0);
        assert_eq!(fn_, f * 4.0);
    }

    #[test]
    fn taps_are_clamped() {
        assert_eq!(overparam_taps(200, 11), 9);
        assert_eq!(overparam_taps(200, 1), 30);
        assert_eq!(overparam_taps(20, 11), 3);
    }

    #[test]
    fn joint_backends_run_on_a_small_cascade() {
        let spec = CascadeSpec {
            n: 40,
            n_poles: 4,
            n_zeros: 4,
            ..CascadeSpec::default()
        };
        let d = generate_cascade_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let opts = EmOptions {
            max_outer: 5,
            chain: crate::em::ChainSettings {
                burn_in: 50,
                retained: 200,
                seed: 3,
            },
            ..EmOptions::default()
        };
        for b in [Backend::Mcem, Backend::Vbem] {
            let fit = fit_cascade_joint(&d.u, &d.v, &d.y, b, &[1.0, 0.6], &[1.0, 0.6], &opts).unwrap();
            assert_eq!(fit.pair.g1.len(), 40);
            assert!(fit_metric(&d.g2, &fit.pair.g2).unwrap().unwrap() > 0.0);
        }
        assert!(fit_cascade_joint(&d.u, &d.v, &d.y, Backend::Semiparam, &[1.0, 0.6], &[1.0, 0.6], &opts).is_err());
    }

    #[test]
    fn cascade_estimates_follow_the_data_units() {
        let spec = CascadeSpec {
            n: 40,
            n_poles: 4,
            n_zeros: 4,
            ..CascadeSpec::default()
        };
        let d = generate_cascade_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let opts = EmOptions {
            max_outer: 3,
            ..EmOptions::default()
        };
        let (a, b, c) = (3.0, 1e4, 1e-3);
        let (u2, v2, y2) = (&d.u * a, &d.v * b, &d.y * c);
        let close = |x: &Signal, y: &Signal| (x - y).norm() <= 1e-6 * y.norm();
        let p = crate::metrics::naive_cascade(&d.u, &d.v, &d.y, &[1.0, 0.6], &opts).unwrap().pair;
        let q = crate::metrics::naive_cascade(&u2, &v2, &y2, &[1.0, 0.6], &opts).unwrap().pair;
        assert!(close(&q.g1, &(&p.g1 * (b / a))));
        assert!(close(&q.g2, &(&p.g2 * (c / b))));
        let p = fit_cascade_joint(&d.u, &d.v, &d.y, Backend::Vbem, &[1.0, 0.6], &[1.0, 0.6], &opts).unwrap();
        let q = fit_cascade_joint(&u2, &v2, &y2, Backend::Vbem, &[1.0, 0.6], &[1.0, 0.6], &opts).unwrap();
        assert!(close(&q.pair.g1, &(&p.pair.g1 * (b / a))));
        assert!(close(&q.pair.g2, &(&p.pair.g2 * (c / b))));
    }

    #[test]
    fn parametric_hammerstein_on_an_easy_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u: Signal = DVector::from_fn(200, |_, _| rng.gen_range(-1.0..=1.0));
        let sys = sample_system(3, 3, &mut rng);
        let d = hammerstein_from_parts(u, vec![0.1, 0.8, -0.5, 0.3], sys, 0.001, &mut rng).unwrap();
        let fit = fit_hammerstein_parametric(&d.u, &d.y, 3, &[1.0, 0.6], &EmOptions::default()).unwrap();
        let grid = nonlinearity_grid();
        let f_true = crate::bench::legendre_series(&d.coeffs, &grid).unwrap();
        assert!(fit_metric(&d.g, &fit.g).unwrap().unwrap() > 0.9);
        assert!(fit_metric(&f_true, &fit.f_grid).unwrap().unwrap() > 0.9);
    }
}
