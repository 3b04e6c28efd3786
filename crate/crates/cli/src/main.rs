//! `ef21` — run and sweep communication-compressed distributed gradient
//! methods on LibSVM data or the builtin synthetic fixtures.
//!
//! Examples:
//!
//! ```text
//! ef21 run --data mushrooms --method ef21 --k 1 --T 1000 --seed 7 --out out/
//! ef21 run --data synthetic-ls-small --problem least_squares --method ef21 \
//!          --k 2 --T 500 --out out/
//! ef21 sweep --data a9a --method ef --k 1 --T 2000 --multipliers 1,2,4,8,16 --out out/
//! ```

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ef21_core::harness::{
    apply_config_text, apply_key, run_experiment, sweep, HarnessError, RunConfig,
};
use ef21_core::methods::RunError;

#[derive(Parser)]
#[command(
    name = "ef21",
    about = "Compressed distributed gradient methods",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write its trace CSV + JSON sidecar.
    Run(RunArgs),
    /// Run a stepsize-multiplier grid with a shared seed and write a summary.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file with key=value lines; CLI flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset: a LibSVM file path, a name under $EF21_DATA_DIR, or a
    /// builtin fixture (mushrooms, a9a, a9a-sub2000, synthetic-ls-small,
    /// dcgd-stall-ls, dcgd-diverge-ls).
    #[arg(long)]
    data: Option<String>,
    /// Objective: logistic_nonconvex | least_squares.
    #[arg(long)]
    problem: Option<String>,
    /// Regularizer weight for the logistic objective.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n_clients: Option<usize>,
    /// gd | dcgd | ef | ef21 | ef21_plus | ef21_sgd.
    #[arg(long)]
    method: Option<String>,
    /// topk | randk | scaled_linear | identity.
    #[arg(long)]
    compressor: Option<String>,
    /// Sparsity level for topk/randk.
    #[arg(long)]
    k: Option<usize>,
    /// Scale for scaled_linear.
    #[arg(long)]
    c: Option<f64>,
    /// Stepsize as a multiple of the theoretical one.
    #[arg(long, conflicts_with = "gamma_absolute")]
    gamma_multiple: Option<f64>,
    /// Absolute stepsize.
    #[arg(long)]
    gamma_absolute: Option<f64>,
    /// Number of communication rounds.
    #[arg(long = "T")]
    t_rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Minibatch size for ef21_sgd (defaults to the full shard).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial estimates: compress_g0 | exact_g0.
    #[arg(long)]
    init: Option<String>,
    /// Payload bits per transmitted value (bit accounting only).
    #[arg(long)]
    value_bits: Option<u32>,
    /// Fix the feature dimension instead of taking the max observed index.
    #[arg(long)]
    dim: Option<usize>,
    /// Allow EF21+ with a randomized compressor (unanalyzed regime).
    #[arg(long)]
    allow_randomized_plus: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated stepsize multipliers, e.g. 1,2,4,8.
    #[arg(long, value_delimiter = ',')]
    multipliers: Vec<f64>,
}

fn build_config(common: &CommonArgs) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::new("");
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        apply_config_text(&mut cfg, &text).map_err(|e| e.to_string())?;
    }
    let mut set = |key: &str, value: Option<String>| -> Result<(), String> {
        if let Some(v) = value {
            apply_key(&mut cfg, key, &v)?;
        }
        Ok(())
    };
    set("dataset", common.data.clone())?;
    set("problem", common.problem.clone())?;
    set("lambda", common.lambda.map(|v| v.to_string()))?;
    set("n_clients", common.n_clients.map(|v| v.to_string()))?;
    set("method", common.method.clone())?;
    set("compressor", common.compressor.clone())?;
    set("k", common.k.map(|v| v.to_string()))?;
    set("c", common.c.map(|v| v.to_string()))?;
    set(
        "gamma_multiple",
        common.gamma_multiple.map(|v| v.to_string()),
    )?;
    set(
        "gamma_absolute",
        common.gamma_absolute.map(|v| v.to_string()),
    )?;
    set("T", common.t_rounds.map(|v| v.to_string()))?;
    set("seed", common.seed.map(|v| v.to_string()))?;
    set("batch_size", common.batch_size.map(|v| v.to_string()))?;
    set("init", common.init.clone())?;
    set("value_bits", common.value_bits.map(|v| v.to_string()))?;
    set("dim", common.dim.map(|v| v.to_string()))?;
    if common.allow_randomized_plus {
        apply_key(&mut cfg, "allow_randomized_plus", "true")?;
    }
    if cfg.dataset.is_empty() {
        return Err("no dataset: pass --data or set dataset= in the config file".into());
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let cfg = match build_config(&args.common) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            match run_experiment(&cfg, &args.common.out) {
                Ok(trace) => {
                    let last = trace.records.last().expect("trace has rounds");
                    println!(
                        "{}: {} rounds, f={:.6e}, |grad|^2={:.6e} -> {}",
                        cfg.output_basename(),
                        trace.records.len() - 1,
                        last.f_value,
                        last.grad_sq_norm,
                        args.common.out.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(HarnessError::Run(RunError::Divergence { round, .. })) => {
                    eprintln!(
                        "{}: diverged at round {round}; partial trace written to {}",
                        cfg.output_basename(),
                        args.common.out.display()
                    );
                    ExitCode::FAILURE
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Sweep(args) => {
            let cfg = match build_config(&args.common) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            match sweep(&cfg, &args.multipliers, &args.common.out) {
                Ok(rows) => {
                    for r in &rows {
                        println!(
                            "x{}: final |grad|^2={:.6e}, min={:.6e}, diverged={}, rounds={}",
                            r.multiplier,
                            r.final_grad_sq_norm,
                            r.min_grad_sq_norm,
                            r.diverged,
                            r.rounds_completed
                        );
                    }
                    println!(
                        "summary -> {}",
                        args.common.out.join("sweep_summary.csv").display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
