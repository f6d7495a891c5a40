use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use uisid::experiment::{
    fit_dataset, read_results, report, run_experiment, run_seed, score, Dataset, DatasetKind,
    Estimator, ExperimentConfig, ExperimentPaths,
};

/// Exit status of `fit` when EM stopped at the iteration cap.
const EXIT_MAX_ITER: u8 = 2;
/// Exit status for malformed command lines.
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "uisid", version, about = "Identification of linear systems with uncertain inputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a ready-made experiment configuration.
    Init {
        /// cascade, LOLO, HILO, LOHI or HIHI
        #[arg(long, default_value = "cascade")]
        preset: String,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the datasets of an experiment.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "UISID_OUT")]
        out: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit one estimator to one dataset.
    Fit {
        /// Dataset CSV; the JSON sidecar with the same stem must exist.
        #[arg(long)]
        data: PathBuf,
        /// semiparam, mcem, vbem, two-stage or naive
        #[arg(long)]
        estimator: Estimator,
        #[arg(long, env = "UISID_OUT")]
        out: PathBuf,
        /// Take the em, chain and vb sections from this configuration
        /// instead of the preset for the dataset kind.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the chain seed (default: the dataset's run seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a Monte-Carlo experiment, resuming an earlier one in the same directory.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "UISID_OUT")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated estimators replacing the configured list.
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<Estimator>>,
        /// Skip writing per-fit EM traces.
        #[arg(long)]
        no_traces: bool,
    },
    /// Five-number summaries of a results table.
    Report {
        results: PathBuf,
        /// Write the table to this file as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seeds.master = s;
    }
    Ok(cfg)
}

fn init(preset: &str, out: Option<&Path>) -> Result<()> {
    let json = ExperimentConfig::preset(preset)?.to_json()? + "\n";
    match out {
        Some(p) => fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{json}"),
    }
    Ok(())
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let runs = cfg.dataset.runs() as u64;
    for r in 0..runs {
        Dataset::generate(&cfg.dataset, cfg.seeds.master, r)?.save(&out.join(format!("run{r:05}")))?;
    }
    let seeds: Vec<u64> = (0..runs).map(|r| run_seed(cfg.seeds.master, r)).collect();
    let echo = serde_json::json!({ "config": cfg, "run_seeds": seeds });
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&echo)? + "\n")?;
    eprintln!("wrote {runs} datasets to {}", out.display());
    Ok(())
}

fn write_columns(path: &Path, names: &[&str], cols: &[&[f64]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t"];
    header.extend(names);
    w.write_record(&header)?;
    let n = cols.iter().map(|c| c.len()).max().unwrap_or(0);
    for t in 0..n {
        let mut rec = vec![t.to_string()];
        rec.extend(cols.iter().map(|c| c.get(t).map_or(String::new(), |x| x.to_string())));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn fit(data: &Path, estimator: Estimator, out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<bool> {
    let mut dataset = Dataset::load(data)?;
    let settings = match config {
        Some(p) => ExperimentConfig::load(p)?.settings(),
        None => {
            let preset = match dataset.kind() {
                DatasetKind::Cascade => "cascade",
                DatasetKind::Hammerstein => "LOLO",
            };
            ExperimentConfig::preset(preset)?.settings()
        }
    };
    if let Some(s) = seed {
        dataset.sidecar.seed = s;
    }
    let est = fit_dataset(&dataset, estimator, &settings)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let sig = |k: &str| est.signals.get(k).map(|s| s.as_slice().to_vec());
    match dataset.kind() {
        DatasetKind::Cascade => {
            let (g1, g2, w) = (sig("g1").unwrap(), sig("g2").unwrap(), sig("w").unwrap());
            write_columns(&out.join("estimate.csv"), &["g1", "g2", "w"], &[&g1, &g2, &w])?;
        }
        DatasetKind::Hammerstein => {
            let (g, w, f) = (sig("g").unwrap(), sig("w").unwrap(), sig("f").unwrap());
            write_columns(&out.join("estimate.csv"), &["g", "w"], &[&g, &w])?;
            let grid = uisid::metrics::nonlinearity_grid();
            write_columns(&out.join("nonlinearity.csv"), &["x", "f"], &[grid.as_slice(), &f])?;
        }
    }
    let tau = serde_json::to_string_pretty(&est.hyperparameters())? + "\n";
    fs::write(out.join("tau.json"), tau)?;
    for (label, em) in &est.stages {
        em.trace.save(&out.join(format!("trace_{label}.csv")))?;
    }
    let scores: serde_json::Map<String, serde_json::Value> = score(&dataset, &est)?
        .into_iter()
        .map(|(t, f)| (t.to_string(), serde_json::json!(f)))
        .collect();
    fs::write(out.join("scores.json"), serde_json::to_string_pretty(&scores)? + "\n")?;
    let converged = est.converged();
    let iterations: Vec<String> = est.stages.iter().map(|(l, em)| format!("{l} {}", em.iterations)).collect();
    eprintln!(
        "{estimator}: {} after {} outer iterations; fits {}",
        if converged { "converged" } else { "stopped at the iteration cap" },
        iterations.join(", "),
        serde_json::Value::Object(scores)
    );
    Ok(converged)
}

fn experiment(
    config: &Path,
    out: &Path,
    workers: usize,
    seed: Option<u64>,
    estimators: Option<Vec<Estimator>>,
    traces: bool,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(e) = estimators {
        cfg.estimators = e;
    }
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    run_experiment(&cfg, out, workers, traces, &|line| eprintln!("{line}"))?;
    let paths = ExperimentPaths::new(out);
    print!("{}", report(&read_results(&paths.results)?)?);
    Ok(())
}

fn report_cmd(results: &Path, out: Option<&Path>) -> Result<()> {
    let rows = read_results(results).with_context(|| format!("reading {}", results.display()))?;
    let table = report(&rows)?;
    if let Some(p) = out {
        fs::write(p, &table)?;
    }
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Init { preset, out } => init(&preset, out.as_deref()).map(|_| true),
        Command::Simulate { config, out, seed } => simulate(&config, &out, seed).map(|_| true),
        Command::Fit {
            data,
            estimator,
            out,
            config,
            seed,
        } => fit(&data, estimator, &out, config.as_deref(), seed),
        Command::Experiment {
            config,
            out,
            workers,
            seed,
            estimators,
            no_traces,
        } => experiment(&config, &out, workers, seed, estimators, !no_traces).map(|_| true),
        Command::Report { results, out } => report_cmd(&results, out.as_deref()).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_MAX_ITER),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
