//! Run configuration, experiment driver, stepsize sweeps and trace output.
//!
//! A run is described by a flat [`RunConfig`] (parsed from `key=value` text
//! and/or CLI flags). `run_experiment` resolves the dataset, builds the
//! distributed problem, dispatches to the requested method and writes two
//! artifacts per run:
//!
//! - `<base>.csv` with the exact header
//!   `t,f,grad_sq_norm,G,bits_per_client_cum,dcgd_fraction,psi`
//!   (one schema for every method; absent metrics stay empty), and
//! - `<base>.json`, a sidecar echoing the resolved configuration together
//!   with the derived constants (L, L̃, α, θ, β, γ, μ, f*).
//!
//! Dataset names resolve in order: an existing path, a file under
//! `$EF21_DATA_DIR`, then the builtin seeded fixtures (`mushrooms`, `a9a`
//! and `a9a-sub2000` fall back to their synthetic stand-ins when no real
//! file is found). Divergent runs still write their partial CSV and sidecar
//! before the error propagates.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressors::Compressor;
use crate::data::{fixtures, load_libsvm, DataError, Dataset};
use crate::methods::{
    run_dcgd, run_ef, run_ef21, run_ef21_plus, run_ef21_sgd, run_gd, InitScheme, RunError, RunTrace,
};
use crate::problems::{GlobalProblem, ProblemError, ProblemKind};
use crate::theory::{optimal_s, stepsize_nonconvex, stepsize_pl};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("unknown dataset {0:?} (not a path, not under EF21_DATA_DIR, not a builtin fixture)")]
    UnknownDataset(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    LogisticNonconvex,
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gd,
    Dcgd,
    Ef,
    Ef21,
    Ef21Plus,
    Ef21Sgd,
}

impl Method {
    fn as_str(self) -> &'static str {
        match self {
            Method::Gd => "gd",
            Method::Dcgd => "dcgd",
            Method::Ef => "ef",
            Method::Ef21 => "ef21",
            Method::Ef21Plus => "ef21_plus",
            Method::Ef21Sgd => "ef21_sgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompressorSpec {
    TopK { k: usize },
    RandKScaled { k: usize },
    ScaledLinear { c: f64 },
    Identity,
}

impl CompressorSpec {
    pub fn build(&self, d: usize, value_bits: u32) -> Result<Compressor, HarnessError> {
        let comp = match *self {
            CompressorSpec::TopK { k } => Compressor::top_k(k, d),
            CompressorSpec::RandKScaled { k } => Compressor::rand_k_scaled(k, d),
            CompressorSpec::ScaledLinear { c } => Compressor::scaled_linear(c, d),
            CompressorSpec::Identity => Ok(Compressor::identity(d)),
        }
        .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(comp.with_value_bits(value_bits))
    }

    fn tag(&self) -> String {
        match *self {
            CompressorSpec::TopK { k } => format!("top{k}"),
            CompressorSpec::RandKScaled { k } => format!("randk{k}"),
            CompressorSpec::ScaledLinear { c } => format!("lin{c}"),
            CompressorSpec::Identity => "identity".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum GammaMode {
    Theory,
    Multiple(f64),
    Absolute(f64),
}

impl GammaMode {
    fn tag(&self) -> String {
        match *self {
            GammaMode::Theory => "theory".into(),
            GammaMode::Multiple(m) => format!("x{m}"),
            GammaMode::Absolute(g) => format!("abs{g}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    CompressG0,
    ExactG0,
}

impl From<InitMode> for InitScheme {
    fn from(m: InitMode) -> Self {
        match m {
            InitMode::CompressG0 => InitScheme::CompressG0,
            InitMode::ExactG0 => InitScheme::ExactG0,
        }
    }
}

/// A fully specified run. Field defaults follow the experiment protocol:
/// `λ = 0.1`, 20 clients, 32-bit values, compressed initial estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: String,
    pub problem: Problem,
    pub lambda: f64,
    pub n_clients: usize,
    pub method: Method,
    pub compressor: CompressorSpec,
    pub gamma_mode: GammaMode,
    #[serde(rename = "T")]
    pub t_rounds: usize,
    pub seed: u64,
    pub batch_size: Option<usize>,
    pub init: InitMode,
    pub value_bits: u32,
    /// Optional fixed feature dimension (for file subsets that drop trailing
    /// features).
    pub dim: Option<usize>,
    /// EF21+ with a randomized compressor is unanalyzed; it runs only behind
    /// this flag.
    pub allow_randomized_plus: bool,
}

impl RunConfig {
    pub fn new(dataset: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            problem: Problem::LogisticNonconvex,
            lambda: 0.1,
            n_clients: 20,
            method: Method::Ef21,
            compressor: CompressorSpec::TopK { k: 1 },
            gamma_mode: GammaMode::Theory,
            t_rounds: 1000,
            seed: 0,
            batch_size: None,
            init: InitMode::CompressG0,
            value_bits: 32,
            dim: None,
            allow_randomized_plus: false,
        }
    }

    pub fn problem_kind(&self) -> ProblemKind {
        match self.problem {
            Problem::LogisticNonconvex => ProblemKind::LogisticNonconvex {
                lambda: self.lambda,
            },
            Problem::LeastSquares => ProblemKind::LeastSquares,
        }
    }

    /// Canonical output stem for this run's artifacts.
    pub fn output_basename(&self) -> String {
        let ds: String = self
            .dataset
            .chars()
            .map(|c| {
                if c.is_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '-'
                }
            })
            .collect();
        format!(
            "{}_{}_{}_{}_T{}_s{}",
            self.method.as_str(),
            ds,
            self.compressor.tag(),
            self.gamma_mode.tag(),
            self.t_rounds,
            self.seed
        )
    }
}

/// Applies `key=value` lines (with `#` comments) on top of a config.
/// Every key has exactly one spelling; unknown keys are errors.
pub fn apply_config_text(cfg: &mut RunConfig, text: &str) -> Result<(), HarnessError> {
    for (lineno0, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            HarnessError::Config(format!("line {}: expected key=value", lineno0 + 1))
        })?;
        apply_key(cfg, key.trim(), value.trim())
            .map_err(|e| HarnessError::Config(format!("line {}: {e}", lineno0 + 1)))?;
    }
    Ok(())
}

/// Applies one configuration key. Shared by the config-file parser and the
/// CLI flag handling.
pub fn apply_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), String> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
        value
            .parse()
            .map_err(|_| format!("invalid value {value:?} for {key}"))
    }
    match key {
        "dataset" => cfg.dataset = value.to_string(),
        "problem" => {
            cfg.problem = match value {
                "logistic_nonconvex" => Problem::LogisticNonconvex,
                "least_squares" => Problem::LeastSquares,
                _ => return Err(format!("unknown problem {value:?}")),
            }
        }
        "lambda" => cfg.lambda = parse(key, value)?,
        "n_clients" => cfg.n_clients = parse(key, value)?,
        "method" => {
            cfg.method = match value {
                "gd" => Method::Gd,
                "dcgd" => Method::Dcgd,
                "ef" => Method::Ef,
                "ef21" => Method::Ef21,
                "ef21_plus" => Method::Ef21Plus,
                "ef21_sgd" => Method::Ef21Sgd,
                _ => return Err(format!("unknown method {value:?}")),
            }
        }
        "compressor" => {
            cfg.compressor = match value {
                "topk" => CompressorSpec::TopK {
                    k: default_k(&cfg.compressor),
                },
                "randk" => CompressorSpec::RandKScaled {
                    k: default_k(&cfg.compressor),
                },
                "scaled_linear" => CompressorSpec::ScaledLinear {
                    c: default_c(&cfg.compressor),
                },
                "identity" => CompressorSpec::Identity,
                _ => return Err(format!("unknown compressor {value:?}")),
            }
        }
        "k" => {
            let k = parse(key, value)?;
            cfg.compressor = match cfg.compressor {
                CompressorSpec::RandKScaled { .. } => CompressorSpec::RandKScaled { k },
                _ => CompressorSpec::TopK { k },
            };
        }
        "c" => {
            cfg.compressor = CompressorSpec::ScaledLinear {
                c: parse(key, value)?,
            }
        }
        "gamma_multiple" => cfg.gamma_mode = GammaMode::Multiple(parse(key, value)?),
        "gamma_absolute" => cfg.gamma_mode = GammaMode::Absolute(parse(key, value)?),
        "T" => cfg.t_rounds = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "batch_size" => cfg.batch_size = Some(parse(key, value)?),
        "init" => {
            cfg.init = match value {
                "compress_g0" => InitMode::CompressG0,
                "exact_g0" => InitMode::ExactG0,
                _ => return Err(format!("unknown init {value:?}")),
            }
        }
        "value_bits" => cfg.value_bits = parse(key, value)?,
        "dim" => cfg.dim = Some(parse(key, value)?),
        "allow_randomized_plus" => cfg.allow_randomized_plus = parse(key, value)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

fn default_k(spec: &CompressorSpec) -> usize {
    match *spec {
        CompressorSpec::TopK { k } | CompressorSpec::RandKScaled { k } => k,
        _ => 1,
    }
}

fn default_c(spec: &CompressorSpec) -> f64 {
    match *spec {
        CompressorSpec::ScaledLinear { c } => c,
        _ => 0.5,
    }
}

/// Bits one worker sends to the master per round with this compressor.
pub fn bits_per_round(comp: &Compressor) -> f64 {
    comp.payload_bits()
}

/// Derived constants echoed into the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub dataset_source: String,
    pub n_rows: usize,
    pub dim: usize,
    pub alpha: f64,
    pub theta: f64,
    pub beta: f64,
    pub l: f64,
    pub l_tilde: f64,
    pub gamma: f64,
    pub mu: Option<f64>,
    pub f_star_estimate: Option<f64>,
}

/// The configuration as actually executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub run: RunConfig,
    pub derived: DerivedConstants,
}

/// Loads a dataset by path, `$EF21_DATA_DIR` entry, or builtin fixture name.
/// Returns the dataset and a provenance string for the sidecar.
pub fn resolve_dataset(
    spec: &str,
    dim_override: Option<usize>,
) -> Result<(Dataset, String), HarnessError> {
    let direct = Path::new(spec);
    if direct.is_file() {
        return Ok((load_libsvm(direct, dim_override)?, format!("file:{spec}")));
    }
    if let Ok(dir) = std::env::var("EF21_DATA_DIR") {
        let candidate = PathBuf::from(dir).join(spec);
        if candidate.is_file() {
            let source = format!("file:{}", candidate.display());
            return Ok((load_libsvm(&candidate, dim_override)?, source));
        }
    }
    let builtin = match spec {
        "synthetic-ls-small" => Some(fixtures::ls_small()),
        "synthetic-mushrooms" | "mushrooms" => Some(fixtures::mushrooms_like()),
        "synthetic-a9a-sub2000" | "a9a-sub2000" | "a9a" => Some(fixtures::a9a_subsample()),
        "dcgd-stall-ls" => Some(fixtures::dcgd_stall()),
        "dcgd-diverge-ls" => Some(fixtures::dcgd_divergence()),
        _ => None,
    };
    match builtin {
        Some(ds) => {
            let source = format!("builtin:{}", ds.name);
            Ok((ds, source))
        }
        None => Err(HarnessError::UnknownDataset(spec.to_string())),
    }
}

/// Theoretical or user-chosen stepsize for this configuration.
pub fn resolve_gamma(cfg: &RunConfig, gp: &GlobalProblem, alpha: f64) -> Result<f64, HarnessError> {
    let theory = || -> Result<f64, HarnessError> {
        match cfg.problem {
            Problem::LogisticNonconvex => Ok(stepsize_nonconvex(
                gp.smoothness(),
                gp.smoothness_quadratic_mean(),
                alpha,
            )),
            Problem::LeastSquares => {
                let mu = gp.mu_estimate().ok_or_else(|| {
                    HarnessError::Config(
                        "theory stepsize for least squares needs the PL constant".into(),
                    )
                })?;
                Ok(stepsize_pl(
                    gp.smoothness(),
                    gp.smoothness_quadratic_mean(),
                    alpha,
                    mu,
                ))
            }
        }
    };
    match cfg.gamma_mode {
        GammaMode::Theory => theory(),
        GammaMode::Multiple(m) => {
            if m <= 0.0 {
                return Err(HarnessError::Config(format!(
                    "gamma multiple must be > 0, got {m}"
                )));
            }
            Ok(m * theory()?)
        }
        GammaMode::Absolute(g) => {
            if g <= 0.0 {
                return Err(HarnessError::Config(format!("gamma must be > 0, got {g}")));
            }
            Ok(g)
        }
    }
}

/// Builds the distributed problem for a config (with `f*`/`μ` estimates for
/// least squares, which the Lyapunov column and the PL stepsize need).
pub fn build_problem(cfg: &RunConfig, ds: &Dataset) -> Result<GlobalProblem, HarnessError> {
    let gp = GlobalProblem::from_dataset(ds, cfg.problem_kind(), cfg.n_clients)?;
    match cfg.problem {
        Problem::LeastSquares => Ok(gp.with_estimates()?),
        Problem::LogisticNonconvex => Ok(gp),
    }
}

fn dispatch(
    cfg: &RunConfig,
    gp: &GlobalProblem,
    comp: &Compressor,
    gamma: f64,
) -> Result<RunTrace, RunError> {
    let x0 = vec![0.0; gp.dim()];
    match cfg.method {
        Method::Gd => run_gd(gp, &x0, gamma, cfg.t_rounds),
        Method::Dcgd => run_dcgd(gp, &x0, gamma, comp, cfg.t_rounds, cfg.seed),
        Method::Ef => run_ef(gp, &x0, gamma, comp, cfg.t_rounds, cfg.seed),
        Method::Ef21 => run_ef21(
            gp,
            &x0,
            gamma,
            comp,
            cfg.t_rounds,
            cfg.seed,
            cfg.init.into(),
        ),
        Method::Ef21Plus => run_ef21_plus(
            gp,
            &x0,
            gamma,
            comp,
            cfg.t_rounds,
            cfg.seed,
            cfg.allow_randomized_plus,
        ),
        Method::Ef21Sgd => {
            let batch = cfg
                .batch_size
                .unwrap_or_else(|| gp.clients().iter().map(|c| c.num_samples()).min().unwrap());
            run_ef21_sgd(gp, &x0, gamma, comp, cfg.t_rounds, batch, cfg.seed)
        }
    }
}

/// Runs a configuration against an already-built problem, attaching the
/// resolved echo. Divergence errors carry the partial trace with the echo
/// attached, so callers can still persist it.
pub fn run_on_problem(
    cfg: &RunConfig,
    gp: &GlobalProblem,
    dataset_source: &str,
    n_rows: usize,
) -> Result<(RunTrace, ResolvedConfig), HarnessError> {
    let comp = cfg.compressor.build(gp.dim(), cfg.value_bits)?;
    let alpha = comp.alpha();
    let gamma = resolve_gamma(cfg, gp, alpha)?;
    let oc = optimal_s(alpha);
    let resolved = ResolvedConfig {
        run: cfg.clone(),
        derived: DerivedConstants {
            dataset_source: dataset_source.to_string(),
            n_rows,
            dim: gp.dim(),
            alpha,
            theta: oc.theta,
            beta: oc.beta,
            l: gp.smoothness(),
            l_tilde: gp.smoothness_quadratic_mean(),
            gamma,
            mu: gp.mu_estimate(),
            f_star_estimate: gp.f_star_estimate(),
        },
    };
    let echo = serde_json::to_string_pretty(&resolved).expect("config serializes");
    match dispatch(cfg, gp, &comp, gamma) {
        Ok(mut trace) => {
            trace.config_echo = Some(echo);
            Ok((trace, resolved))
        }
        Err(RunError::Divergence { round, mut trace }) => {
            trace.config_echo = Some(echo);
            Err(HarnessError::Run(RunError::Divergence { round, trace }))
        }
        Err(e) => Err(HarnessError::Run(e)),
    }
}

/// Exact CSV serialization of a trace. One schema for all methods; absent
/// metrics are empty fields.
pub fn trace_to_csv(trace: &RunTrace) -> String {
    let mut out = String::from("t,f,grad_sq_norm,G,bits_per_client_cum,dcgd_fraction,psi\n");
    for r in &trace.records {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.t, r.f_value, r.grad_sq_norm, r.est_err, r.bits_per_client_cum
        );
        match r.dcgd_fraction {
            Some(v) => {
                let _ = write!(out, ",{v}");
            }
            None => out.push(','),
        }
        match r.psi {
            Some(v) => {
                let _ = write!(out, ",{v}");
            }
            None => out.push(','),
        }
        out.push('\n');
    }
    out
}

fn persist(
    trace: &RunTrace,
    resolved: &ResolvedConfig,
    out_dir: &Path,
) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let base = resolved.run.output_basename();
    let csv_path = out_dir.join(format!("{base}.csv"));
    std::fs::write(&csv_path, trace_to_csv(trace))?;
    let json_path = out_dir.join(format!("{base}.json"));
    std::fs::write(
        &json_path,
        trace
            .config_echo
            .as_deref()
            .expect("echo attached before persisting"),
    )?;
    Ok(csv_path)
}

/// Loads the dataset, runs the configuration and writes `<base>.csv` plus
/// `<base>.json` under `out_dir`. A divergent run writes its partial trace
/// before the error is returned.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<RunTrace, HarnessError> {
    let (ds, source) = resolve_dataset(&cfg.dataset, cfg.dim)?;
    let gp = build_problem(cfg, &ds)?;
    match run_on_problem(cfg, &gp, &source, ds.num_samples()) {
        Ok((trace, resolved)) => {
            persist(&trace, &resolved, out_dir)?;
            Ok(trace)
        }
        Err(HarnessError::Run(RunError::Divergence { round, trace })) => {
            let resolved: ResolvedConfig = serde_json::from_str(
                trace
                    .config_echo
                    .as_deref()
                    .expect("divergent trace carries echo"),
            )
            .expect("echo parses");
            persist(&trace, &resolved, out_dir)?;
            Err(HarnessError::Run(RunError::Divergence { round, trace }))
        }
        Err(e) => Err(e),
    }
}

/// One row of the sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub multiplier: f64,
    pub final_grad_sq_norm: f64,
    pub min_grad_sq_norm: f64,
    pub diverged: bool,
    pub rounds_completed: usize,
}

/// Runs the template at every stepsize multiplier (identical seed), writing
/// one trace CSV per multiplier and a `sweep_summary.csv`. Individual
/// divergences are recorded and the sweep continues.
pub fn sweep(
    template: &RunConfig,
    multipliers: &[f64],
    out_dir: &Path,
) -> Result<Vec<SweepRow>, HarnessError> {
    if multipliers.is_empty() {
        return Err(HarnessError::Config(
            "sweep needs at least one multiplier".into(),
        ));
    }
    if multipliers.iter().any(|&m| m <= 0.0) {
        return Err(HarnessError::Config(
            "sweep multipliers must be positive".into(),
        ));
    }
    let (ds, source) = resolve_dataset(&template.dataset, template.dim)?;
    let gp = build_problem(template, &ds)?;
    std::fs::create_dir_all(out_dir)?;

    // Runs are independent and write to distinct paths, so they may fan out.
    let outcomes = crate::par::map_indexed(multipliers.len(), |i| {
        let mut cfg = template.clone();
        cfg.gamma_mode = GammaMode::Multiple(multipliers[i]);
        let outcome = run_on_problem(&cfg, &gp, &source, ds.num_samples());
        (cfg, outcome)
    });

    let mut rows = Vec::with_capacity(multipliers.len());
    for (i, (_cfg, outcome)) in outcomes.into_iter().enumerate() {
        let (trace, resolved, diverged) = match outcome {
            Ok((trace, resolved)) => (trace, resolved, false),
            Err(HarnessError::Run(RunError::Divergence { trace, .. })) => {
                let resolved: ResolvedConfig = serde_json::from_str(
                    trace
                        .config_echo
                        .as_deref()
                        .expect("divergent trace carries echo"),
                )
                .expect("echo parses");
                (*trace, resolved, true)
            }
            Err(e) => return Err(e),
        };
        persist(&trace, &resolved, out_dir)?;
        let min_grad = trace
            .records
            .iter()
            .map(|r| r.grad_sq_norm)
            .fold(f64::INFINITY, f64::min);
        let last = trace.records.last().expect("at least the initial record");
        rows.push(SweepRow {
            multiplier: multipliers[i],
            final_grad_sq_norm: last.grad_sq_norm,
            min_grad_sq_norm: min_grad,
            diverged,
            rounds_completed: trace.records.len() - 1,
        });
    }

    let mut summary =
        String::from("multiplier,final_grad_sq_norm,min_grad_sq_norm,diverged,rounds_completed\n");
    for r in &rows {
        let _ = writeln!(
            summary,
            "{},{},{},{},{}",
            r.multiplier, r.final_grad_sq_norm, r.min_grad_sq_norm, r.diverged, r.rounds_completed
        );
    }
    std::fs::write(out_dir.join("sweep_summary.csv"), summary)?;
    Ok(rows)
}
