#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uisid::model::{Hyperparameters, UIModel};
use uisid::priors::{KernelSpec, MeanSpec, PriorSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ss(c: f64, lambda: f64) -> PriorSpec {
    PriorSpec::new(
        MeanSpec::Zero,
        KernelSpec::StableSpline {
            scale: c,
            decay: lambda,
        },
    )
}

pub fn rbf(scale: f64, width: f64, input: &DVector<f64>) -> PriorSpec {
    PriorSpec::new(
        MeanSpec::Zero,
        KernelSpec::Rbf {
            scale,
            width,
            input: input.clone(),
        },
    )
}

pub fn uniform(n: usize, r: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.gen_range(-1.0..=1.0))
}

pub fn normal(n: usize, r: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Lower-triangular Toeplitz matrix of `x`, built entry by entry.
pub fn lower_toeplitz(x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| if i >= j { x[i - j] } else { 0.0 })
}

/// An SS-prior impulse response driven by an RBF-prior input with a noisy
/// measurement.
pub fn small_model(n: usize, seed: u64) -> (UIModel, Hyperparameters) {
    let mut r = rng(seed);
    let u = uniform(n, &mut r);
    let g: DVector<f64> = DVector::from_fn(n, |i, _| 0.7f64.powi(i as i32));
    let w = u.map(|x| (2.0 * x).sin());
    let y = lower_toeplitz(&w) * &g + 0.1 * normal(n, &mut r);
    let v = &w + 0.3 * normal(n, &mut r);
    let model = UIModel::new(y, Some(v), ss(1.0, 0.6), rbf(1.0, 0.6, &u)).unwrap();
    let tau = Hyperparameters {
        rho: vec![1.0, 0.6],
        theta: vec![1.0, 0.6],
        sigma_y2: 0.01,
        sigma_v2: 0.09,
    };
    (model, tau)
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
