//! The uncertain-input model: observed data, prior families and hyperparameters.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::conditionals::NoiseModel;
use crate::error::{Error, Result};
use crate::factor::GaussianPrior;
use crate::priors::PriorSpec;
use crate::toeplitz::Signal;

/// Observed data and prior families for `y = W g + ε`, `v = w + η`.
#[derive(Clone, Debug)]
pub struct UIModel {
    pub y: Signal,
    pub v: Option<Signal>,
    pub v_mask: Option<Vec<bool>>,
    pub prior_g: PriorSpec,
    pub prior_w: PriorSpec,
    /// Starting guess for `w` when no input measurement is available.
    pub w_pilot: Option<Signal>,
}

impl UIModel {
    pub fn new(
        y: Signal,
        v: Option<Signal>,
        prior_g: PriorSpec,
        prior_w: PriorSpec,
    ) -> Result<UIModel> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty output signal".into()));
        }
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("output contains non-finite samples".into()));
        }
        if let Some(v) = &v {
            if v.len() != n {
                return Err(Error::Dimension(format!(
                    "input measurement has length {} but output has {n}",
                    v.len()
                )));
            }
        }
        prior_g.evaluate(n)?;
        prior_w.evaluate(n)?;
        Ok(UIModel {
            y,
            v,
            v_mask: None,
            prior_g,
            prior_w,
            w_pilot: None,
        })
    }

    /// Marks which input samples are available; masked samples may hold any value.
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<UIModel> {
        if mask.len() != self.n() {
            return Err(Error::Dimension(format!(
                "mask has length {} but N = {}",
                mask.len(),
                self.n()
            )));
        }
        self.v_mask = Some(mask);
        Ok(self)
    }

    pub fn with_pilot(mut self, w: Signal) -> Result<UIModel> {
        if w.len() != self.n() {
            return Err(Error::Dimension(format!(
                "pilot input has length {} but N = {}",
                w.len(),
                self.n()
            )));
        }
        self.w_pilot = Some(w);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn noise(&self, tau: &Hyperparameters) -> NoiseModel {
        let sigma_v2 = if self.v.is_some() {
            tau.sigma_v2
        } else {
            f64::INFINITY
        };
        NoiseModel {
            sigma_y2: tau.sigma_y2,
            sigma_v2,
            v_mask: self.v_mask.clone(),
        }
    }

    /// Number of input samples that carry information under `tau`.
    pub fn active_inputs(&self, tau: &Hyperparameters) -> usize {
        self.noise(tau).active_inputs(self.n())
    }

    /// Priors and noise at `tau`, with kernels factored.
    pub fn prepare(&self, tau: &Hyperparameters) -> Result<PreparedModel> {
        tau.validate()?;
        let n = self.n();
        let prior_g = self.prior_g.with_params(&tau.rho)?.gaussian(n)?;
        let prior_w = self.prior_w.with_params(&tau.theta)?.gaussian(n)?;
        let noise = self.noise(tau);
        noise.validate()?;
        let input_prec = noise.input_precision(n);
        Ok(PreparedModel {
            prior_g,
            prior_w,
            noise,
            input_prec,
        })
    }

    /// Starting point for `w`: the measured input where available, else the
    /// pilot, else the prior mean.
    pub fn initial_w(&self, prior_mean_w: &Signal) -> Signal {
        let base = self.w_pilot.clone().unwrap_or_else(|| prior_mean_w.clone());
        match &self.v {
            Some(v) => DVector::from_fn(self.n(), |i, _| {
                if self.v_mask.as_ref().map_or(true, |m| m[i]) {
                    v[i]
                } else {
                    base[i]
                }
            }),
            None => base,
        }
    }
}

/// A model with priors evaluated at fixed hyperparameters.
#[derive(Clone, Debug)]
pub struct PreparedModel {
    pub prior_g: GaussianPrior,
    pub prior_w: GaussianPrior,
    pub noise: NoiseModel,
    /// Per-sample input precision; `None` when `v` carries no information.
    pub input_prec: Option<DVector<f64>>,
}

/// `τ = (ρ, θ, σy², σv²)`. `σv² = ∞` marks an unmeasured input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub rho: Vec<f64>,
    pub theta: Vec<f64>,
    pub sigma_y2: f64,
    #[serde(with = "maybe_infinite")]
    pub sigma_v2: f64,
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        if self.rho.iter().chain(&self.theta).any(|x| !x.is_finite()) {
            return Err(Error::Hyperparameter("non-finite kernel hyperparameter".into()));
        }
        NoiseModel::new(self.sigma_y2, self.sigma_v2).validate()
    }

    /// All components in the order `ρ, θ, σy², σv²`.
    pub fn components(&self) -> Vec<f64> {
        let mut c = self.rho.clone();
        c.extend(&self.theta);
        c.push(self.sigma_y2);
        c.push(self.sigma_v2);
        c
    }

    /// `max_i |a_i - b_i| / (|a_i| + 1e-12)` over finite components.
    pub fn rel_change(&self, next: &Hyperparameters) -> f64 {
        self.components()
            .iter()
            .zip(next.components())
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| (b - a).abs() / (a.abs() + 1e-12))
            .fold(0.0, f64::max)
    }
}

/// Serializes infinite values as the string `"inf"` (JSON has no infinity).
pub(crate) mod maybe_infinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*x)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad variance {t:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{KernelSpec, MeanSpec};

    #[test]
    fn rel_change_skips_infinite_components() {
        let a = Hyperparameters {
            rho: vec![1.0, 0.5],
            theta: vec![],
            sigma_y2: 2.0,
            sigma_v2: f64::INFINITY,
        };
        let mut b = a.clone();
        b.rho[1] = 0.6;
        assert!((a.rel_change(&b) - 0.2).abs() < 1e-12);
        assert_eq!(a.rel_change(&a), 0.0);
    }

    #[test]
    fn hyperparameters_json_round_trip() {
        let a = Hyperparameters {
            rho: vec![1.0, 0.5],
            theta: vec![0.25],
            sigma_y2: 2.0,
            sigma_v2: f64::INFINITY,
        };
        let s = serde_json::to_string(&a).unwrap();
        assert!(s.contains("\"inf\""));
        let b: Hyperparameters = serde_json::from_str(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn initial_w_prefers_measurements() {
        let n = 3;
        let g = PriorSpec::new(MeanSpec::Zero, KernelSpec::StableSpline { scale: 1.0, decay: 0.5 });
        let w = PriorSpec::new(MeanSpec::Fixed(DVector::from_element(n, 7.0)), KernelSpec::Degenerate);
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = UIModel::new(DVector::zeros(n), Some(v), g, w)
            .unwrap()
            .with_mask(vec![true, false, true])
            .unwrap();
        let w0 = m.initial_w(&DVector::from_element(n, 7.0));
        assert_eq!(w0.as_slice(), &[1.0, 7.0, 3.0]);
        assert!(m.with_mask(vec![true]).is_err());
    }
}
