//! Monte-Carlo experiments: configuration, dataset files, per-run fitting and
//! scoring, the results table and its summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{
    generate_cascade_dataset, generate_hammerstein_dataset, legendre_series, CascadeSpec,
    HammersteinSpec, RationalSystem,
};
use crate::em::{Backend, ChainSettings, EmOptions, EmResult};
use crate::error::{Error, Result};
use crate::estimators::{fit_cascade_joint, fit_hammerstein_nonparametric, fit_hammerstein_parametric};
use crate::metrics::{fit_metric, naive_cascade, nonlinearity_grid, two_stage_cascade, BaselineFit};
use crate::model::Hyperparameters;
use crate::toeplitz::{convolve, Signal};

/// Stream of a run's generator reserved for dataset generation. MCEM
/// iteration `k` draws from stream `k` of the same seed and the final E-step
/// from stream `u64::MAX`.
pub const DATASET_STREAM: u64 = 1 << 63;

/// Seed of run `run_id`.
pub fn run_seed(master: u64, run_id: u64) -> u64 {
    master ^ run_id
}

/// Generator for the dataset of a run.
pub fn dataset_rng(master: u64, run_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed(master, run_id));
    rng.set_stream(DATASET_STREAM);
    rng
}

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    Cascade {
        runs: usize,
        n: usize,
        n_poles: usize,
        n_zeros: usize,
        input_noise_ratio: f64,
        output_noise_ratio: f64,
    },
    Hammerstein {
        runs: usize,
        n: usize,
        system_orders: (usize, usize),
        nonlinearity_orders: (usize, usize),
        output_noise_ratio: f64,
    },
}

impl DatasetConfig {
    pub fn runs(&self) -> usize {
        match self {
            DatasetConfig::Cascade { runs, .. } | DatasetConfig::Hammerstein { runs, .. } => *runs,
        }
    }

    pub fn kind(&self) -> DatasetKind {
        match self {
            DatasetConfig::Cascade { .. } => DatasetKind::Cascade,
            DatasetConfig::Hammerstein { .. } => DatasetKind::Hammerstein,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub rel_tol: f64,
    pub max_outer: usize,
    pub init_rho: Vec<f64>,
    pub init_theta: Vec<f64>,
    /// Legendre degree of the pilot fit of the nonparametric Hammerstein estimators.
    pub pilot_degree: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub retained: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VbConfig {
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedConfig {
    pub master: u64,
}

/// Settings shared by every fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub em: EmConfig,
    pub chain: ChainConfig,
    pub vb: VbConfig,
}

impl FitSettings {
    /// EM options for a run whose chains are seeded with `seed`.
    pub fn em_options(&self, seed: u64) -> EmOptions {
        EmOptions {
            rel_tol: self.em.rel_tol,
            max_outer: self.em.max_outer,
            chain: ChainSettings {
                burn_in: self.chain.burn_in,
                retained: self.chain.retained,
                seed,
            },
            vb_tol: self.vb.tol,
            vb_max_iter: self.vb.max_iter,
            ..EmOptions::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.em.init_rho.len() != 2 || self.em.init_theta.len() != 2 {
            return Err(Error::Config("em.init_rho and em.init_theta take two values".into()));
        }
        if !(self.em.rel_tol > 0.0) || self.em.max_outer == 0 {
            return Err(Error::Config("em.rel_tol and em.max_outer must be positive".into()));
        }
        if self.chain.retained == 0 {
            return Err(Error::Config("chain.retained must be positive".into()));
        }
        if !(self.vb.tol > 0.0) || self.vb.max_iter == 0 {
            return Err(Error::Config("vb.tol and vb.max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Full experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub estimators: Vec<Estimator>,
    pub em: EmConfig,
    pub chain: ChainConfig,
    pub vb: VbConfig,
    pub seeds: SeedConfig,
}

impl ExperimentConfig {
    /// Ready-made configurations: `cascade` and the Hammerstein order
    /// settings `LOLO`, `HILO`, `LOHI`, `HIHI`.
    pub fn preset(name: &str) -> Result<ExperimentConfig> {
        let em = |pilot_degree| EmConfig {
            rel_tol: 1e-2,
            max_outer: 100,
            init_rho: vec![1.0, 0.6],
            init_theta: vec![1.0, 0.6],
            pilot_degree,
        };
        let vb = VbConfig {
            tol: crate::variational::VB_TOL,
            max_iter: crate::variational::VB_MAX_ITER,
        };
        if name == "cascade" {
            let spec = CascadeSpec::default();
            return Ok(ExperimentConfig {
                dataset: DatasetConfig::Cascade {
                    runs: 500,
                    n: spec.n,
                    n_poles: spec.n_poles,
                    n_zeros: spec.n_zeros,
                    input_noise_ratio: spec.input_noise_ratio,
                    output_noise_ratio: spec.output_noise_ratio,
                },
                estimators: vec![Estimator::Mcem, Estimator::Vbem, Estimator::TwoStage, Estimator::Naive],
                em: em(10),
                chain: ChainConfig {
                    burn_in: 400,
                    retained: 2000,
                },
                vb,
                seeds: SeedConfig { master: 1 },
            });
        }
        let spec = HammersteinSpec::preset(name)?;
        Ok(ExperimentConfig {
            dataset: DatasetConfig::Hammerstein {
                runs: 500,
                n: spec.n,
                system_orders: spec.system_orders,
                nonlinearity_orders: spec.nonlinearity_orders,
                output_noise_ratio: spec.output_noise_ratio,
            },
            estimators: vec![Estimator::Semiparam, Estimator::Mcem, Estimator::Vbem],
            em: em(10),
            chain: ChainConfig {
                burn_in: 200,
                retained: 500,
            },
            vb,
            seeds: SeedConfig { master: 1 },
        })
    }

    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn settings(&self) -> FitSettings {
        FitSettings {
            em: self.em.clone(),
            chain: self.chain.clone(),
            vb: self.vb.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.settings().validate()?;
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators".into()));
        }
        let unique: BTreeSet<_> = self.estimators.iter().collect();
        if unique.len() != self.estimators.len() {
            return Err(Error::Config("estimators are listed twice".into()));
        }
        let kind = self.dataset.kind();
        for e in &self.estimators {
            e.check_kind(kind)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- estimators

/// Estimator names. On cascade data `mcem` and `vbem` fit the joint model and
/// `two-stage`, `naive` are the baselines; on Hammerstein data `semiparam` is
/// the parametric-nonlinearity estimator and `mcem`, `vbem` the
/// nonparametric ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Estimator {
    Semiparam,
    Mcem,
    Vbem,
    TwoStage,
    Naive,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::Semiparam,
        Estimator::Mcem,
        Estimator::Vbem,
        Estimator::TwoStage,
        Estimator::Naive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Semiparam => "semiparam",
            Estimator::Mcem => "mcem",
            Estimator::Vbem => "vbem",
            Estimator::TwoStage => "two-stage",
            Estimator::Naive => "naive",
        }
    }

    pub fn check_kind(self, kind: DatasetKind) -> Result<()> {
        let ok = match kind {
            DatasetKind::Cascade => self != Estimator::Semiparam,
            DatasetKind::Hammerstein => !matches!(self, Estimator::TwoStage | Estimator::Naive),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("estimator {self} does not apply to {kind} data")))
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Estimator> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Estimator::ALL.iter().map(|e| e.name()).collect();
                Error::Config(format!("unknown estimator {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

impl TryFrom<String> for Estimator {
    type Error = Error;
    fn try_from(s: String) -> Result<Estimator> {
        s.parse()
    }
}

impl From<Estimator> for String {
    fn from(e: Estimator) -> String {
        e.name().to_string()
    }
}

// ---------------------------------------------------------------- datasets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cascade,
    Hammerstein,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Cascade => "cascade",
            DatasetKind::Hammerstein => "hammerstein",
        })
    }
}

/// Ground truth stored next to a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Truth {
    Cascade {
        w_true: Vec<f64>,
        g1: Vec<f64>,
        g2: Vec<f64>,
        sigma_v2: f64,
        sigma_y2: f64,
        systems: [RationalSystem; 2],
    },
    Hammerstein {
        w_true: Vec<f64>,
        g: Vec<f64>,
        /// Legendre coefficients of the nonlinearity.
        coeffs: Vec<f64>,
        sigma_y2: f64,
        system: RationalSystem,
    },
}

/// Contents of the JSON file accompanying a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub run_id: u64,
    pub seed: u64,
    pub truth: Truth,
}

/// Measured signals and truth of one run. Hammerstein data has no `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub u: Signal,
    pub v: Option<Signal>,
    pub y: Signal,
    pub sidecar: Sidecar,
}

fn sig(x: &[f64]) -> Signal {
    DVector::from_column_slice(x)
}

impl Dataset {
    pub fn kind(&self) -> DatasetKind {
        match self.sidecar.truth {
            Truth::Cascade { .. } => DatasetKind::Cascade,
            Truth::Hammerstein { .. } => DatasetKind::Hammerstein,
        }
    }

    /// Dataset of run `run_id` of an experiment.
    pub fn generate(cfg: &DatasetConfig, master: u64, run_id: u64) -> Result<Dataset> {
        let mut rng = dataset_rng(master, run_id);
        let seed = run_seed(master, run_id);
        match cfg {
            DatasetConfig::Cascade {
                n,
                n_poles,
                n_zeros,
                input_noise_ratio,
                output_noise_ratio,
                ..
            } => {
                let spec = CascadeSpec {
                    n: *n,
                    n_poles: *n_poles,
                    n_zeros: *n_zeros,
                    input_noise_ratio: *input_noise_ratio,
                    output_noise_ratio: *output_noise_ratio,
                };
                let d = generate_cascade_dataset(&spec, &mut rng)?;
                Ok(Dataset {
                    u: d.u,
                    v: Some(d.v),
                    y: d.y,
                    sidecar: Sidecar {
                        run_id,
                        seed,
                        truth: Truth::Cascade {
                            w_true: d.w_true.as_slice().to_vec(),
                            g1: d.g1.as_slice().to_vec(),
                            g2: d.g2.as_slice().to_vec(),
                            sigma_v2: d.sigma_v2,
                            sigma_y2: d.sigma_y2,
                            systems: d.systems,
                        },
                    },
                })
            }
            DatasetConfig::Hammerstein {
                n,
                system_orders,
                nonlinearity_orders,
                output_noise_ratio,
                ..
            } => {
                let spec = HammersteinSpec {
                    n: *n,
                    system_orders: *system_orders,
                    nonlinearity_orders: *nonlinearity_orders,
                    output_noise_ratio: *output_noise_ratio,
                };
                let d = generate_hammerstein_dataset(&spec, &mut rng)?;
                Ok(Dataset {
                    u: d.u,
                    v: None,
                    y: d.y,
                    sidecar: Sidecar {
                        run_id,
                        seed,
                        truth: Truth::Hammerstein {
                            w_true: d.w_true.as_slice().to_vec(),
                            g: d.g.as_slice().to_vec(),
                            coeffs: d.coeffs,
                            sigma_y2: d.sigma_y2,
                            system: d.system,
                        },
                    },
                })
            }
        }
    }

    /// Writes `<stem>.csv` with columns `t,u,v,y` (empty `v` when unmeasured)
    /// and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(stem.with_extension("csv"))?;
        w.write_record(["t", "u", "v", "y"])?;
        for t in 0..self.u.len() {
            let v = self.v.as_ref().map_or(String::new(), |v| v[t].to_string());
            w.write_record([t.to_string(), self.u[t].to_string(), v, self.y[t].to_string()])?;
        }
        w.flush()?;
        let json = serde_json::to_string_pretty(&self.sidecar)?;
        fs::write(stem.with_extension("json"), json + "\n")?;
        Ok(())
    }

    /// Reads a dataset CSV and the sidecar with the same stem.
    pub fn load(csv_path: &Path) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(csv_path)?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "u", "v", "y"] {
            return Err(Error::InvalidInput(format!(
                "{}: expected header t,u,v,y",
                csv_path.display()
            )));
        }
        let (mut u, mut v, mut y) = (Vec::new(), Vec::new(), Vec::new());
        let num = |s: &str, line: usize| {
            s.parse::<f64>().map_err(|e| {
                Error::InvalidInput(format!("{}:{line}: {s:?}: {e}", csv_path.display()))
            })
        };
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if num(&rec[0], line)? != i as f64 {
                return Err(Error::InvalidInput(format!(
                    "{}:{line}: samples must be consecutive from t = 0",
                    csv_path.display()
                )));
            }
            u.push(num(&rec[1], line)?);
            if !rec[2].is_empty() {
                v.push(num(&rec[2], line)?);
            }
            y.push(num(&rec[3], line)?);
        }
        if u.is_empty() {
            return Err(Error::InvalidInput(format!("{}: no samples", csv_path.display())));
        }
        let v = match v.len() {
            0 => None,
            k if k == u.len() => Some(sig(&v)),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "{}: column v is only partly filled",
                    csv_path.display()
                )))
            }
        };
        let side_path = csv_path.with_extension("json");
        let side = fs::read_to_string(&side_path)
            .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", side_path.display())))?;
        let sidecar: Sidecar = serde_json::from_str(&side)?;
        let d = Dataset {
            u: sig(&u),
            v,
            y: sig(&y),
            sidecar,
        };
        if (d.kind() == DatasetKind::Cascade) != d.v.is_some() {
            return Err(Error::InvalidInput(format!(
                "{}: column v must be filled exactly for cascade data",
                csv_path.display()
            )));
        }
        Ok(d)
    }
}

// ---------------------------------------------------------------- fitting

/// Output of one estimator on one dataset.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub estimator: Estimator,
    /// Estimated signals by name: `g1`, `g2`, `w` for cascades; `g`, `w` and
    /// `f` (on the scoring grid) for Hammerstein data.
    pub signals: BTreeMap<String, Signal>,
    /// EM runs by stage label, for traces and hyperparameters.
    pub stages: Vec<(String, EmResult)>,
}

impl Estimate {
    pub fn converged(&self) -> bool {
        self.stages.iter().all(|(_, em)| em.converged)
    }

    pub fn hyperparameters(&self) -> BTreeMap<String, Hyperparameters> {
        self.stages
            .iter()
            .map(|(k, em)| (k.clone(), em.tau.clone()))
            .collect()
    }

    fn from_baseline(estimator: Estimator, u: &Signal, fit: BaselineFit) -> Estimate {
        let w = convolve(u, &fit.pair.g1);
        let [a, b] = fit.stages;
        Estimate {
            estimator,
            signals: BTreeMap::from([
                ("g1".to_string(), fit.pair.g1),
                ("g2".to_string(), fit.pair.g2),
                ("w".to_string(), w),
            ]),
            stages: vec![("stage1".into(), a.em), ("stage2".into(), b.em)],
        }
    }
}

/// Runs `estimator` on `data`; Monte-Carlo chains are seeded with the run seed.
pub fn fit_dataset(data: &Dataset, estimator: Estimator, settings: &FitSettings) -> Result<Estimate> {
    settings.validate()?;
    estimator.check_kind(data.kind())?;
    let opts = settings.em_options(data.sidecar.seed);
    let (rho, theta) = (&settings.em.init_rho, &settings.em.init_theta);
    let u = &data.u;
    let y = &data.y;
    match &data.sidecar.truth {
        Truth::Cascade { .. } => {
            let v = data.v.as_ref().ok_or_else(|| Error::InvalidInput("cascade data needs v".into()))?;
            match estimator {
                Estimator::TwoStage => Ok(Estimate::from_baseline(
                    estimator,
                    u,
                    two_stage_cascade(u, v, y, rho, &opts)?,
                )),
                Estimator::Naive => Ok(Estimate::from_baseline(estimator, u, naive_cascade(u, v, y, rho, &opts)?)),
                Estimator::Mcem | Estimator::Vbem => {
                    let backend = if estimator == Estimator::Mcem { Backend::Mcem } else { Backend::Vbem };
                    let fit = fit_cascade_joint(u, v, y, backend, rho, theta, &opts)?;
                    Ok(Estimate {
                        estimator,
                        signals: BTreeMap::from([
                            ("g1".to_string(), fit.pair.g1),
                            ("g2".to_string(), fit.pair.g2),
                            ("w".to_string(), fit.w),
                        ]),
                        stages: vec![("joint".into(), fit.em)],
                    })
                }
                Estimator::Semiparam => unreachable!("rejected by check_kind"),
            }
        }
        Truth::Hammerstein { coeffs, .. } => {
            let fit = match estimator {
                // the parametric estimator is given the true degree
                Estimator::Semiparam => {
                    fit_hammerstein_parametric(u, y, coeffs.len().saturating_sub(1), rho, &opts)?
                }
                Estimator::Mcem => {
                    fit_hammerstein_nonparametric(u, y, Backend::Mcem, settings.em.pilot_degree, rho, theta, &opts)?
                }
                Estimator::Vbem => {
                    fit_hammerstein_nonparametric(u, y, Backend::Vbem, settings.em.pilot_degree, rho, theta, &opts)?
                }
                _ => unreachable!("rejected by check_kind"),
            };
            Ok(Estimate {
                estimator,
                signals: BTreeMap::from([
                    ("g".to_string(), fit.g),
                    ("f".to_string(), fit.f_grid),
                    ("w".to_string(), fit.w),
                ]),
                stages: vec![("model".into(), fit.em)],
            })
        }
    }
}

/// Scored targets per dataset kind.
pub fn targets(kind: DatasetKind) -> &'static [&'static str] {
    match kind {
        DatasetKind::Cascade => &["g1", "g2"],
        DatasetKind::Hammerstein => &["f", "g"],
    }
}

/// Fit of each target; `f` is compared on the scoring grid.
pub fn score(data: &Dataset, est: &Estimate) -> Result<Vec<(&'static str, Option<f64>)>> {
    let truth = |name: &str| -> Result<Signal> {
        Ok(match (&data.sidecar.truth, name) {
            (Truth::Cascade { g1, .. }, "g1") => sig(g1),
            (Truth::Cascade { g2, .. }, "g2") => sig(g2),
            (Truth::Hammerstein { g, .. }, "g") => sig(g),
            (Truth::Hammerstein { coeffs, .. }, "f") => legendre_series(coeffs, &nonlinearity_grid())?,
            _ => unreachable!("targets are fixed per kind"),
        })
    };
    targets(data.kind())
        .iter()
        .map(|&t| {
            let e = est
                .signals
                .get(t)
                .ok_or_else(|| Error::InvalidInput(format!("estimate has no {t}")))?;
            Ok((t, fit_metric(&truth(t)?, e)?))
        })
        .collect()
}

// ---------------------------------------------------------------- results

/// One row of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub run_id: u64,
    pub estimator: String,
    pub target: String,
    pub fit: Option<f64>,
}

pub const RESULTS_HEADER: [&str; 4] = ["run_id", "estimator", "target", "fit"];

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != RESULTS_HEADER {
        return Err(Error::InvalidInput(format!(
            "{}: expected header {}",
            path.display(),
            RESULTS_HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::InvalidInput(format!("{}:{}: bad {what}", path.display(), i + 2));
        let fit = match &rec[3] {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad("fit"))?),
        };
        rows.push(ResultRow {
            run_id: rec[0].parse().map_err(|_| bad("run_id"))?,
            estimator: rec[1].to_string(),
            target: rec[2].to_string(),
            fit,
        });
    }
    Ok(rows)
}

fn write_rows<W: Write>(w: &mut csv::Writer<W>, rows: &[ResultRow]) -> Result<()> {
    for r in rows {
        w.write_record([
            r.run_id.to_string(),
            r.estimator.clone(),
            r.target.clone(),
            r.fit.map_or(String::new(), |f| f.to_string()),
        ])?;
    }
    Ok(())
}

/// Linear-interpolation quantile of sorted data: position `p (n - 1)`.
pub fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Min, lower quartile, median, upper quartile and max.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Option<FiveNumber> {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(FiveNumber {
            min: *s.first()?,
            q1: quantile(&s, 0.25)?,
            median: quantile(&s, 0.5)?,
            q3: quantile(&s, 0.75)?,
            max: *s.last()?,
        })
    }
}

/// Scores of one estimator on one target over all runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub runs: usize,
    /// Runs without a score (failed fit or constant truth).
    pub missing: usize,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
}

/// `estimator -> target -> summary`.
pub type Summary = BTreeMap<String, BTreeMap<String, TargetSummary>>;

fn group(rows: &[ResultRow]) -> BTreeMap<(String, String), (usize, Vec<f64>)> {
    let mut g: BTreeMap<(String, String), (usize, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = g.entry((r.estimator.clone(), r.target.clone())).or_default();
        e.0 += 1;
        e.1.extend(r.fit.filter(|f| f.is_finite()));
    }
    g
}

pub fn summarize(rows: &[ResultRow]) -> Summary {
    let mut out = Summary::new();
    for ((est, target), (runs, vals)) in group(rows) {
        let five = FiveNumber::of(&vals);
        out.entry(est).or_default().insert(
            target,
            TargetSummary {
                runs,
                missing: runs - vals.len(),
                q1: five.as_ref().map(|f| f.q1),
                median: five.as_ref().map(|f| f.median),
                q3: five.as_ref().map(|f| f.q3),
            },
        );
    }
    out
}

/// Five-number summary per estimator and target as CSV text:
/// `estimator,target,runs,missing,min,q1,median,q3,max`.
pub fn report(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("the results table has no rows".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["estimator", "target", "runs", "missing", "min", "q1", "median", "q3", "max"])?;
    for ((est, target), (runs, vals)) in group(rows) {
        let mut rec = vec![est, target, runs.to_string(), (runs - vals.len()).to_string()];
        match FiveNumber::of(&vals) {
            Some(f) => rec.extend([f.min, f.q1, f.median, f.q3, f.max].iter().map(|x| format!("{x:.4}"))),
            None => rec.extend(std::iter::repeat(String::new()).take(5)),
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

// ---------------------------------------------------------------- runner

/// Files written by [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentPaths {
    pub results: PathBuf,
    pub summary: PathBuf,
    pub config: PathBuf,
    pub traces: PathBuf,
}

impl ExperimentPaths {
    pub fn new(out: &Path) -> ExperimentPaths {
        ExperimentPaths {
            results: out.join("results.csv"),
            summary: out.join("summary.json"),
            config: out.join("config.json"),
            traces: out.join("traces"),
        }
    }
}

/// Outcome of one run: result rows in estimator order and log lines.
struct RunOutput {
    rows: Vec<ResultRow>,
    log: Vec<String>,
}

fn run_one(cfg: &ExperimentConfig, run_id: u64, traces: Option<&Path>) -> Result<RunOutput> {
    let data = Dataset::generate(&cfg.dataset, cfg.seeds.master, run_id)?;
    let settings = cfg.settings();
    let mut rows = Vec::new();
    let mut log = Vec::new();
    for &est in &cfg.estimators {
        let start = Instant::now();
        let outcome = fit_dataset(&data, est, &settings).and_then(|e| Ok((score(&data, &e)?, e)));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok((scores, estimate)) => {
                if let Some(dir) = traces {
                    for (label, em) in &estimate.stages {
                        em.trace.save(&dir.join(format!("run{run_id:05}_{est}_{label}.csv")))?;
                    }
                }
                let parts: Vec<String> = scores
                    .iter()
                    .map(|(t, f)| format!("{t}={}", f.map_or("NA".into(), |f| format!("{f:.3}"))))
                    .collect();
                log.push(format!("run {run_id} {est}: {} ({secs:.1} s)", parts.join(" ")));
                rows.extend(scores.into_iter().map(|(t, fit)| ResultRow {
                    run_id,
                    estimator: est.to_string(),
                    target: t.to_string(),
                    fit,
                }));
            }
            Err(e) => {
                log.push(format!("run {run_id} {est}: failed: {e}"));
                rows.extend(targets(data.kind()).iter().map(|t| ResultRow {
                    run_id,
                    estimator: est.to_string(),
                    target: t.to_string(),
                    fit: None,
                }));
            }
        }
    }
    Ok(RunOutput { rows, log })
}

/// Runs every run of `cfg` not yet recorded in `<out>/results.csv` on a pool of
/// `workers` threads, appending rows in run order, then rewrites the summary.
/// Runs are complete once rows for all configured estimators and targets are present;
/// rows of incomplete runs are dropped and redone. `log` receives one line
/// per fit.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    workers: usize,
    write_traces: bool,
    log: &(dyn Fn(&str) + Sync),
) -> Result<Summary> {
    cfg.validate()?;
    let paths = ExperimentPaths::new(out);
    fs::create_dir_all(out)?;
    if write_traces {
        fs::create_dir_all(&paths.traces)?;
    }
    let config_json = cfg.to_json()? + "\n";
    if paths.config.exists() {
        let old = ExperimentConfig::load(&paths.config)?;
        if &old != cfg {
            return Err(Error::Config(format!(
                "{} holds results of a different configuration",
                out.display()
            )));
        }
    } else {
        fs::write(&paths.config, &config_json)?;
    }

    let expected: BTreeSet<(String, String)> = cfg
        .estimators
        .iter()
        .flat_map(|e| targets(cfg.dataset.kind()).iter().map(move |t| (e.to_string(), t.to_string())))
        .collect();
    let mut done = BTreeSet::new();
    if paths.results.exists() {
        let rows = read_results(&paths.results)?;
        let mut seen: BTreeMap<u64, BTreeSet<(String, String)>> = BTreeMap::new();
        for r in &rows {
            seen.entry(r.run_id)
                .or_default()
                .insert((r.estimator.clone(), r.target.clone()));
        }
        done = seen
            .into_iter()
            .filter(|(_, e)| *e == expected)
            .map(|(k, _)| k)
            .collect();
        let kept: Vec<ResultRow> = rows.iter().filter(|r| done.contains(&r.run_id)).cloned().collect();
        if kept.len() != rows.len() {
            let mut w = csv::Writer::from_path(&paths.results)?;
            w.write_record(RESULTS_HEADER)?;
            write_rows(&mut w, &kept)?;
            w.flush()?;
        }
    } else {
        let mut w = csv::Writer::from_path(&paths.results)?;
        w.write_record(RESULTS_HEADER)?;
        w.flush()?;
    }

    let pending: Vec<u64> = (0..cfg.dataset.runs() as u64).filter(|r| !done.contains(r)).collect();
    if !done.is_empty() {
        log(&format!("resuming: {} of {} runs already recorded", done.len(), cfg.dataset.runs()));
    }
    let workers = workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let traces = write_traces.then_some(paths.traces.as_path());
    for batch in pending.chunks(workers) {
        let outputs: Vec<Result<RunOutput>> =
            pool.install(|| batch.par_iter().map(|&r| run_one(cfg, r, traces)).collect());
        let file = OpenOptions::new().append(true).open(&paths.results)?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        for o in outputs {
            let o = o?;
            o.log.iter().for_each(|l| log(l));
            write_rows(&mut w, &o.rows)?;
        }
        w.flush()?;
    }

    let summary = summarize(&read_results(&paths.results)?);
    let mut f = File::create(&paths.summary)?;
    f.write_all((serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    Ok(summary)
}
