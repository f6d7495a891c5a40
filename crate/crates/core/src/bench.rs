//! Random rational systems and the cascaded and Hammerstein datasets.

use std::ops::RangeInclusive;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::legendre_basis;
use crate::toeplitz::{convolve, Signal};

/// `H(q) = gain * prod(1 - z_i q^-1) / prod(1 - p_i q^-1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationalSystem {
    #[serde(with = "complex_list")]
    pub poles: Vec<Complex64>,
    #[serde(with = "complex_list")]
    pub zeros: Vec<Complex64>,
    pub gain: f64,
}

mod complex_list {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Complex64], s: S) -> Result<S::Ok, S::Error> {
        let pairs: Vec<[f64; 2]> = v.iter().map(|c| [c.re, c.im]).collect();
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Complex64>, D::Error> {
        let pairs = Vec::<[f64; 2]>::deserialize(d)?;
        Ok(pairs.into_iter().map(|[re, im]| Complex64::new(re, im)).collect())
    }
}

/// Coefficients of `prod(1 - r_i x)` in increasing powers of `x`.
pub fn expand_roots(roots: &[Complex64]) -> Result<Vec<f64>> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = c.clone();
        next.push(Complex64::new(0.0, 0.0));
        for k in 0..c.len() {
            next[k + 1] -= r * c[k];
        }
        c = next;
    }
    let scale = c.iter().map(|z| z.norm()).fold(1.0, f64::max);
    if let Some(z) = c.iter().find(|z| z.im.abs() > 1e-10 * scale) {
        return Err(Error::InvalidInput(format!(
            "roots are not conjugate-closed (imaginary coefficient {:e})",
            z.im
        )));
    }
    Ok(c.iter().map(|z| z.re).collect())
}

impl RationalSystem {
    pub fn check_stable(&self) -> Result<()> {
        if let Some(p) = self.poles.iter().find(|p| p.norm() >= 1.0) {
            return Err(Error::UnstableSystem(p.norm()));
        }
        Ok(())
    }

    pub fn numerator(&self) -> Result<Vec<f64>> {
        Ok(expand_roots(&self.zeros)?
            .into_iter()
            .map(|b| self.gain * b)
            .collect())
    }

    pub fn denominator(&self) -> Result<Vec<f64>> {
        expand_roots(&self.poles)
    }

    /// `H(1)`, the gain at frequency zero.
    pub fn static_gain(&self) -> f64 {
        let num: Complex64 = self.zeros.iter().map(|z| 1.0 - z).product();
        let den: Complex64 = self.poles.iter().map(|p| 1.0 - p).product();
        self.gain * (num / den).re
    }

    /// Rescales the gain so that `H(1) = 1`.
    pub fn normalize(&mut self) -> Result<()> {
        let h = self.static_gain();
        if !(h.abs() >= 1e-8) {
            return Err(Error::InvalidInput(format!("static gain {h:e} too small to normalize")));
        }
        self.gain /= h;
        Ok(())
    }
}

/// First `n` impulse-response samples by the difference equation of the
/// expanded numerator and denominator.
pub fn impulse_response(sys: &RationalSystem, n: usize) -> Result<Signal> {
    sys.check_stable()?;
    let b = sys.numerator()?;
    let a = sys.denominator()?;
    let mut g = DVector::zeros(n);
    for t in 0..n {
        let mut acc = if t < b.len() { b[t] } else { 0.0 };
        for k in 1..a.len().min(t + 1) {
            acc -= a[k] * g[t - k];
        }
        g[t] = acc;
    }
    Ok(g)
}

/// `count` roots with magnitudes uniform in `radius` and phases uniform in
/// `[0, π]`, mirrored into conjugate pairs; an odd count adds one real root of
/// random sign.
pub fn sample_conjugate_roots<R: Rng + ?Sized>(
    count: usize,
    radius: (f64, f64),
    rng: &mut R,
) -> Vec<Complex64> {
    let mut roots = Vec::with_capacity(count);
    for _ in 0..count / 2 {
        let r = rng.gen_range(radius.0..=radius.1);
        let phase = rng.gen_range(0.0..=std::f64::consts::PI);
        let z = Complex64::from_polar(r, phase);
        roots.push(z);
        roots.push(z.conj());
    }
    if count % 2 == 1 {
        let r = rng.gen_range(radius.0..=radius.1);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        roots.push(Complex64::new(sign * r, 0.0));
    }
    roots
}

/// Pole and zero radii of the benchmark systems.
pub const POLE_RADIUS: (f64, f64) = (0.4, 0.8);
pub const ZERO_RADIUS: (f64, f64) = (0.0, 0.92);

/// A random system with unit static gain; redraws when `|H(1)|` is too small.
pub fn sample_system<R: Rng + ?Sized>(n_poles: usize, n_zeros: usize, rng: &mut R) -> RationalSystem {
    loop {
        let poles = sample_conjugate_roots(n_poles, POLE_RADIUS, rng);
        let zeros = sample_conjugate_roots(n_zeros, ZERO_RADIUS, rng);
        let mut sys = RationalSystem {
            poles,
            zeros,
            gain: 1.0,
        };
        if sys.normalize().is_ok() {
            return sys;
        }
    }
}

/// 40 poles and 40 zeros (20 conjugate pairs each), unit static gain.
pub fn sample_cascade_system<R: Rng + ?Sized>(rng: &mut R) -> RationalSystem {
    sample_system(40, 40, rng)
}

/// Order drawn uniformly from `orders`, with as many zeros as poles.
pub fn sample_hammerstein_system<R: Rng + ?Sized>(
    orders: RangeInclusive<usize>,
    rng: &mut R,
) -> RationalSystem {
    let order = rng.gen_range(orders);
    sample_system(order, order, rng)
}

fn variance(x: &Signal) -> f64 {
    let m = x.mean();
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

fn white<R: Rng + ?Sized>(n: usize, var: f64, rng: &mut R) -> Signal {
    let s = var.sqrt();
    DVector::from_fn(n, |_, _| s * rng.sample::<f64, _>(StandardNormal))
}

/// Settings of the cascaded-system experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeSpec {
    pub n: usize,
    pub n_poles: usize,
    pub n_zeros: usize,
    /// Input-noise variance relative to the variance of the noiseless `w`.
    pub input_noise_ratio: f64,
    /// Output-noise variance relative to the variance of the noiseless `y`.
    pub output_noise_ratio: f64,
}

impl Default for CascadeSpec {
    fn default() -> Self {
        CascadeSpec {
            n: 200,
            n_poles: 40,
            n_zeros: 40,
            input_noise_ratio: 1.0,
            output_noise_ratio: 0.01,
        }
    }
}

/// One cascaded-system dataset with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeData {
    pub u: Signal,
    pub w_true: Signal,
    pub g1: Signal,
    pub g2: Signal,
    pub v: Signal,
    pub y: Signal,
    pub sigma_v2: f64,
    pub sigma_y2: f64,
    pub systems: [RationalSystem; 2],
}

/// Unit-variance white Gaussian input through two random systems; noise
/// variances proportional to the variances of the noiseless signals.
pub fn generate_cascade_dataset<R: Rng + ?Sized>(spec: &CascadeSpec, rng: &mut R) -> Result<CascadeData> {
    let n = spec.n;
    if n == 0 {
        return Err(Error::InvalidInput("dataset length must be positive".into()));
    }
    let s1 = sample_system(spec.n_poles, spec.n_zeros, rng);
    let s2 = sample_system(spec.n_poles, spec.n_zeros, rng);
    let g1 = impulse_response(&s1, n)?;
    let g2 = impulse_response(&s2, n)?;
    let u = white(n, 1.0, rng);
    let w_true = convolve(&u, &g1);
    let y_clean = convolve(&w_true, &g2);
    let sigma_v2 = spec.input_noise_ratio * variance(&w_true);
    let sigma_y2 = spec.output_noise_ratio * variance(&y_clean);
    let v = &w_true + white(n, sigma_v2, rng);
    let y = &y_clean + white(n, sigma_y2, rng);
    Ok(CascadeData {
        u,
        w_true,
        g1,
        g2,
        v,
        y,
        sigma_v2,
        sigma_y2,
        systems: [s1, s2],
    })
}

/// Settings of the Hammerstein experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HammersteinSpec {
    pub n: usize,
    pub system_orders: (usize, usize),
    pub nonlinearity_orders: (usize, usize),
    pub output_noise_ratio: f64,
}

impl HammersteinSpec {
    /// The four order settings `LOLO`, `HILO`, `LOHI`, `HIHI`.
    pub fn preset(name: &str) -> Result<HammersteinSpec> {
        let (s, f) = match name {
            "LOLO" => ((3, 5), (5, 10)),
            "HILO" => ((9, 20), (5, 10)),
            "LOHI" => ((3, 5), (15, 20)),
            "HIHI" => ((9, 20), (15, 20)),
            _ => return Err(Error::Config(format!("unknown Hammerstein preset {name:?}"))),
        };
        Ok(HammersteinSpec {
            n: 200,
            system_orders: s,
            nonlinearity_orders: f,
            output_noise_ratio: 0.01,
        })
    }
}

/// One Hammerstein dataset with its ground truth; `coeffs[j]` multiplies the
/// degree-`j` Legendre polynomial.
#[derive(Clone, Debug, PartialEq)]
pub struct HammersteinData {
    pub u: Signal,
    pub coeffs: Vec<f64>,
    pub w_true: Signal,
    pub g: Signal,
    pub y: Signal,
    pub sigma_y2: f64,
    pub system: RationalSystem,
}

/// Evaluates `sum_j coeffs[j] P_j(x)`.
pub fn legendre_series(coeffs: &[f64], x: &Signal) -> Result<Signal> {
    if coeffs.is_empty() {
        return Ok(DVector::zeros(x.len()));
    }
    let phi = legendre_basis(x, coeffs.len())?;
    Ok(phi * DVector::from_column_slice(coeffs))
}

/// Builds a Hammerstein dataset from given parts.
pub fn hammerstein_from_parts<R: Rng + ?Sized>(
    u: Signal,
    coeffs: Vec<f64>,
    system: RationalSystem,
    output_noise_ratio: f64,
    rng: &mut R,
) -> Result<HammersteinData> {
    let n = u.len();
    let g = impulse_response(&system, n)?;
    let w_true = legendre_series(&coeffs, &u)?;
    let y_clean = convolve(&w_true, &g);
    let sigma_y2 = output_noise_ratio * variance(&y_clean);
    let y = &y_clean + white(n, sigma_y2, rng);
    Ok(HammersteinData {
        u,
        coeffs,
        w_true,
        g,
        y,
        sigma_y2,
        system,
    })
}

/// Uniform input on `[-1, 1]`, Legendre nonlinearity with coefficients uniform
/// on `[-1, 1]` up to a random degree, random linear block; no input measurement.
pub fn generate_hammerstein_dataset<R: Rng + ?Sized>(
    spec: &HammersteinSpec,
    rng: &mut R,
) -> Result<HammersteinData> {
    if spec.n == 0 {
        return Err(Error::InvalidInput("dataset length must be positive".into()));
    }
    let system =
        sample_hammerstein_system(spec.system_orders.0..=spec.system_orders.1, rng);
    let degree = rng.gen_range(spec.nonlinearity_orders.0..=spec.nonlinearity_orders.1);
    let coeffs: Vec<f64> = (0..=degree).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let u = DVector::from_fn(spec.n, |_, _| rng.gen_range(-1.0..=1.0));
    hammerstein_from_parts(u, coeffs, system, spec.output_noise_ratio, rng)
}
