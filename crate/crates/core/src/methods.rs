//! The optimization loops, with per-round metric capture.
//!
//! All methods simulate one master and `n` workers. Within a round the
//! per-worker work (gradient, compression, state update) runs concurrently —
//! each worker owns its state exclusively — while the round barrier (master
//! aggregation, iterate update, metric capture) is sequential. Aggregates
//! are summed in ascending worker order, so a `(config, seed)` pair fully
//! determines the trace.
//!
//! Per-round stream discipline for randomized compressors and minibatch
//! sampling: the stream for worker `i` at round `r` is seeded with
//! `base_seed ⊕ i ⊕ r`, where `r` is the round index of the iterate whose
//! gradient is being processed. Runs are replayable and workers draw
//! independently within a round.
//!
//! Metrics always use exact full gradients, even in stochastic runs: the
//! measurement draws nothing from the algorithm's streams and therefore
//! cannot perturb it.
//!
//! Each runner also evaluates, every round, the two inequalities that the
//! convergence proofs chain together — the estimate-distortion recursion
//! (for the methods that maintain a local estimate) and the smoothness
//! descent bound — and stores them in the trace for the test suites to
//! assert.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compressors::Compressor;
use crate::linalg::{all_finite, average, max_abs_diff, sq_dist, sq_norm};
use crate::par;
use crate::problems::GlobalProblem;
use crate::theory::{lyapunov, optimal_s};

/// How the local estimates start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// `gᵢ⁰ = C(∇fᵢ(x⁰))` — the default.
    CompressG0,
    /// `gᵢ⁰ = ∇fᵢ(x⁰)` — makes the initial estimate error vanish.
    ExactG0,
}

/// Per-round measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub t: usize,
    pub f_value: f64,
    /// `‖∇f(xᵗ)‖²`, from exact gradients.
    pub grad_sq_norm: f64,
    /// Mean squared error of the local gradient estimates (the `G` column):
    /// `(1/n) Σ ‖gᵢᵗ − ∇fᵢ(xᵗ)‖²`, with the method's natural estimate
    /// substituted for `gᵢᵗ` (messages divided by the stepsize for classical
    /// error feedback, fresh compressions for DCGD, zero error for GD).
    pub est_err: f64,
    /// Cumulative bits sent per client: `t · bits_per_round`.
    pub bits_per_client_cum: f64,
    /// EF21+ only: share of workers whose plain compression beat the Markov
    /// estimate this round.
    pub dcgd_fraction: Option<f64>,
    /// Lyapunov value, present when an `f(x*)` estimate is available.
    pub psi: Option<f64>,
}

/// Per-step inequality evaluations, recorded at the round they complete.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCheck {
    /// Round index reached by this step (1-based).
    pub t: usize,
    /// Estimate-distortion recursion `(lhs, rhs)`:
    /// `Gᵗ⁺¹ ≤ (1−θ*)Gᵗ + β*·(1/n)Σ‖∇fᵢ(xᵗ⁺¹)−∇fᵢ(xᵗ)‖²`.
    /// Present for the methods that maintain Markov-style estimates;
    /// guaranteed to hold only for deterministic compressors.
    pub estimate_recursion: Option<(f64, f64)>,
    /// Descent bound `(f(xᵗ⁺¹), rhs)`:
    /// `f(xᵗ⁺¹) ≤ f(xᵗ) − (γ/2)‖∇f(xᵗ)‖² − (1/(2γ)−L/2)‖Δx‖²
    ///            + (γ/2)‖dᵗ−∇f(xᵗ)‖²`
    /// with `dᵗ` the direction actually applied.
    pub descent: (f64, f64),
    /// Max-norm drift of the incrementally maintained master aggregate from
    /// the directly averaged worker states, relative to the aggregate scale.
    pub master_drift: f64,
}

/// A completed (or aborted) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub records: Vec<RoundRecord>,
    pub checks: Vec<StepCheck>,
    pub final_x: Vec<f64>,
    /// Resolved configuration echo (JSON), attached by the harness.
    pub config_echo: Option<String>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("divergence detected at round {round}")]
    Divergence { round: usize, trace: Box<RunTrace> },
    #[error("invalid run setup: {0}")]
    InvalidArgument(String),
    #[error(
        "internal consistency failure at round {round}: master aggregate drifted {drift:e} \
         from the direct worker average"
    )]
    MasterDrift { round: usize, drift: f64 },
}

// Tolerated relative gap between the incremental master aggregate and the
// direct worker average.
const MASTER_DRIFT_TOL: f64 = 1e-12;

// A run is declared divergent when an iterate goes non-finite or the
// objective exceeds this multiple of (1 + f(x0)).
const DIVERGENCE_FACTOR: f64 = 1e12;

enum StepFailure {
    Diverged,
    MasterDrift(f64),
}

fn worker_stream(base_seed: u64, worker: usize, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(base_seed ^ worker as u64 ^ round as u64)
}

// Shared record construction: bits accounting and the optional Lyapunov
// column.
struct Recorder {
    bits_per_round: f64,
    gamma: f64,
    theta: f64,
    f_star: Option<f64>,
}

impl Recorder {
    fn new(gp: &GlobalProblem, comp: &Compressor, gamma: f64) -> Self {
        Self {
            bits_per_round: comp.payload_bits(),
            gamma,
            theta: optimal_s(comp.alpha()).theta,
            f_star: gp.f_star_estimate(),
        }
    }

    fn record(
        &self,
        t: usize,
        f_value: f64,
        grad_sq_norm: f64,
        est_err: f64,
        dcgd_fraction: Option<f64>,
    ) -> RoundRecord {
        let psi = self
            .f_star
            .map(|fs| lyapunov(f_value - fs, est_err, self.gamma, self.theta));
        RoundRecord {
            t,
            f_value,
            grad_sq_norm,
            est_err,
            bits_per_client_cum: t as f64 * self.bits_per_round,
            dcgd_fraction,
            psi,
        }
    }
}

fn validate_setup(
    gp: &GlobalProblem,
    x0: &[f64],
    gamma: f64,
    comp: &Compressor,
) -> Result<(), RunError> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(RunError::InvalidArgument(format!(
            "stepsize must be positive, got {gamma}"
        )));
    }
    if x0.len() != gp.dim() {
        return Err(RunError::InvalidArgument(format!(
            "starting point has dimension {}, problem has {}",
            x0.len(),
            gp.dim()
        )));
    }
    if comp.dim() != gp.dim() {
        return Err(RunError::InvalidArgument(format!(
            "compressor built for dimension {}, problem has {}",
            comp.dim(),
            gp.dim()
        )));
    }
    Ok(())
}

fn relative_drift(incremental: &[f64], direct: &[f64]) -> f64 {
    let scale = direct.iter().fold(1.0f64, |m, &v| m.max(v.abs()));
    max_abs_diff(incremental, direct) / scale
}

/// The EF21 loop as a stepping state machine. One `step` advances one
/// communication round.
pub struct Ef21Runner<'a> {
    gp: &'a GlobalProblem,
    comp: &'a Compressor,
    gamma: f64,
    base_seed: u64,
    t: usize,
    x: Vec<f64>,
    /// Per-worker local estimates `gᵢᵗ`.
    estimates: Vec<Vec<f64>>,
    /// Master-side aggregate, maintained incrementally from the payloads —
    /// exactly what a real master would hold.
    master: Vec<f64>,
    grads: Vec<Vec<f64>>,
    grad_avg: Vec<f64>,
    f_value: f64,
    f0: f64,
    est_err: f64,
    theta: f64,
    beta: f64,
}

impl<'a> Ef21Runner<'a> {
    pub fn new(
        gp: &'a GlobalProblem,
        x0: &[f64],
        gamma: f64,
        comp: &'a Compressor,
        seed: u64,
        init: InitScheme,
    ) -> Result<Self, RunError> {
        validate_setup(gp, x0, gamma, comp)?;
        let n = gp.n_clients();
        let grads = gp.client_gradients(x0);
        let estimates: Vec<Vec<f64>> = match init {
            InitScheme::CompressG0 => par::map_indexed(n, |i| {
                let mut rng = worker_stream(seed, i, 0);
                comp.compress(&grads[i], &mut rng)
            }),
            InitScheme::ExactG0 => grads.clone(),
        };
        let master = average(&estimates);
        let grad_avg = average(&grads);
        let f_value = gp.value(x0);
        let est_err = mean_sq_dist(&estimates, &grads);
        let oc = optimal_s(comp.alpha());
        Ok(Self {
            gp,
            comp,
            gamma,
            base_seed: seed,
            t: 0,
            x: x0.to_vec(),
            estimates,
            master,
            grads,
            grad_avg,
            f_value,
            f0: f_value,
            est_err,
            theta: oc.theta,
            beta: oc.beta,
        })
    }

    pub fn round(&self) -> usize {
        self.t
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn worker_estimate(&self, i: usize) -> &[f64] {
        &self.estimates[i]
    }

    pub fn master_aggregate(&self) -> &[f64] {
        &self.master
    }

    pub fn f_value(&self) -> f64 {
        self.f_value
    }

    pub fn grad_sq_norm(&self) -> f64 {
        sq_norm(&self.grad_avg)
    }

    pub fn est_err(&self) -> f64 {
        self.est_err
    }

    /// Advances one round, surfacing failures as [`RunError`]. Used by the
    /// verification oracles that drive two loops in lockstep.
    pub fn step_for_oracle(&mut self) -> Result<StepCheck, RunError> {
        let round = self.t + 1;
        self.step().map_err(|e| match e {
            StepFailure::Diverged => RunError::Divergence {
                round,
                trace: Box::new(RunTrace {
                    records: Vec::new(),
                    checks: Vec::new(),
                    final_x: self.x.clone(),
                    config_echo: None,
                }),
            },
            StepFailure::MasterDrift(drift) => RunError::MasterDrift { round, drift },
        })
    }

    fn step(&mut self) -> Result<StepCheck, StepFailure> {
        let n = self.gp.n_clients();
        let next_round = self.t + 1;
        let dir = self.master.clone();
        let x_new: Vec<f64> = (0..self.x.len())
            .map(|j| self.x[j] - self.gamma * dir[j])
            .collect();
        if !all_finite(&x_new) {
            return Err(StepFailure::Diverged);
        }
        let grads_new = self.gp.client_gradients(&x_new);
        let f_new = self.gp.value(&x_new);
        if !f_new.is_finite() || f_new > DIVERGENCE_FACTOR * (1.0 + self.f0) {
            return Err(StepFailure::Diverged);
        }

        // Workers compress the estimate correction; only the payload would
        // cross the wire.
        let estimates = &self.estimates;
        let comp = self.comp;
        let seed = self.base_seed;
        let payloads: Vec<Vec<f64>> = par::map_indexed(n, |i| {
            let mut rng = worker_stream(seed, i, next_round);
            let diff: Vec<f64> = (0..grads_new[i].len())
                .map(|j| grads_new[i][j] - estimates[i][j])
                .collect();
            comp.compress(&diff, &mut rng)
        });
        for (i, payload) in payloads.iter().enumerate() {
            crate::linalg::add_assign(&mut self.estimates[i], payload);
        }
        let payload_avg = average(&payloads);
        crate::linalg::add_assign(&mut self.master, &payload_avg);

        let direct = average(&self.estimates);
        let drift = relative_drift(&self.master, &direct);
        if drift > MASTER_DRIFT_TOL {
            return Err(StepFailure::MasterDrift(drift));
        }

        let est_err_new = mean_sq_dist(&self.estimates, &grads_new);
        let grad_shift = mean_sq_shift(&grads_new, &self.grads);
        let check = StepCheck {
            t: next_round,
            estimate_recursion: Some((
                est_err_new,
                (1.0 - self.theta) * self.est_err + self.beta * grad_shift,
            )),
            descent: (f_new, descent_rhs(self, &dir, &x_new)),
            master_drift: drift,
        };

        self.x = x_new;
        self.grads = grads_new;
        self.grad_avg = average(&self.grads);
        self.f_value = f_new;
        self.est_err = est_err_new;
        self.t = next_round;
        Ok(check)
    }
}

// Descent bound right-hand side, generic over the runner state it reads.
fn descent_rhs_parts(
    f_prev: f64,
    grad_avg_prev: &[f64],
    dir: &[f64],
    x_prev: &[f64],
    x_new: &[f64],
    gamma: f64,
    l: f64,
) -> f64 {
    let grad_sq = sq_norm(grad_avg_prev);
    let move_sq = sq_dist(x_new, x_prev);
    let dir_err = sq_dist(dir, grad_avg_prev);
    f_prev - 0.5 * gamma * grad_sq - (0.5 / gamma - 0.5 * l) * move_sq + 0.5 * gamma * dir_err
}

fn descent_rhs(r: &Ef21Runner, dir: &[f64], x_new: &[f64]) -> f64 {
    descent_rhs_parts(
        r.f_value,
        &r.grad_avg,
        dir,
        &r.x,
        x_new,
        r.gamma,
        r.gp.smoothness(),
    )
}

fn mean_sq_dist(estimates: &[Vec<f64>], grads: &[Vec<f64>]) -> f64 {
    let n = estimates.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc += sq_dist(&estimates[i], &grads[i]);
    }
    acc / n as f64
}

fn mean_sq_shift(new: &[Vec<f64>], old: &[Vec<f64>]) -> f64 {
    mean_sq_dist(new, old)
}

/// Runs EF21 for `t_rounds` rounds and captures the trace.
pub fn run_ef21(
    gp: &GlobalProblem,
    x0: &[f64],
    gamma: f64,
    comp: &Compressor,
    t_rounds: usize,
    seed: u64,
    init: InitScheme,
) -> Result<RunTrace, RunError> {
    let mut runner = Ef21Runner::new(gp, x0, gamma, comp, seed, init)?;
    let recorder = Recorder::new(gp, comp, gamma);
    let mut records = Vec::with_capacity(t_rounds + 1);
    let mut checks = Vec::with_capacity(t_rounds);
    records.push(recorder.record(
        0,
        runner.f_value,
        runner.grad_sq_norm(),
        runner.est_err,
        None,
    ));
    for t in 0..t_rounds {
        match runner.step() {
            Ok(check) => {
                checks.push(check);
                records.push(recorder.record(
                    t + 1,
                    runner.f_value,
                    runner.grad_sq_norm(),
                    runner.est_err,
                    None,
                ));
            }
            Err(StepFailure::Diverged) => {
                return Err(RunError::Divergence {
                    round: t + 1,
                    trace: Box::new(RunTrace {
                        records,
                        checks,
                        final_x: runner.x.clone(),
                        config_echo: None,
                    }),
                });
            }
            Err(StepFailure::MasterDrift(drift)) => {
                return Err(RunError::MasterDrift {
                    round: t + 1,
                    drift,
                });
            }
        }
    }
    Ok(RunTrace {
        records,
        checks,
        final_x: runner.x,
        config_echo: None,
    })
}

/// Plain distributed gradient descent: EF21 with the lossless compressor.
pub fn run_gd(
    gp: &GlobalProblem,
    x0: &[f64],
    gamma: f64,
    t_rounds: usize,
) -> Result<RunTrace, RunError> {
    let comp = Compressor::identity(gp.dim());
    run_ef21(gp, x0, gamma, &comp, t_rounds, 0, InitScheme::ExactG0)
}

/// Distributed compressed gradient descent: per-round fresh compression of
/// the local gradients, no memory. Known to stall or diverge for biased
/// compressors on heterogeneous data.
pub fn run_dcgd(
    gp: &GlobalProblem,
    x0: &[f64],
    gamma: f64,
    comp: &Compressor,
    t_rounds: usize,
    seed: u64,
) -> Result<RunTrace, RunError> {
    validate_setup(gp, x0, gamma, comp)?;
    let n = gp.n_clients();
    let l = gp.smoothness();
    let recorder = Recorder::new(gp, comp, gamma);

    let compress_round = |grads: &Vec<Vec<f64>>, round: usize| -> Vec<Vec<f64>> {
        par::map_indexed(n, |i| {
            let mut rng = worker_stream(seed, i, round);
            comp.compress(&grads[i], &mut rng)
        })
    };

    let mut x = x0.to_vec();
    let mut grads = gp.client_gradients(&x);
    let mut payloads = compress_round(&grads, 0);
    let mut f_value = gp.value(&x);
    let f0 = f_value;

    let mut records = Vec::with_capacity(t_rounds + 1);
    let mut checks = Vec::with_capacity(t_rounds);
    let make_record = |t: usize, f: f64, grads: &Vec<Vec<f64>>, payloads: &Vec<Vec<f64>>| {
        let grad_avg = average(grads);
        recorder.record(
            t,
            f,
            sq_norm(&grad_avg),
            mean_sq_dist(payloads, grads),
            None,
        )
    };
    records.push(make_record(0, f_value, &grads, &payloads));

    for t in 0..t_rounds {
        let dir = average(&payloads);
        let grad_avg = average(&grads);
        let x_new: Vec<f64> = (0..x.len()).map(|j| x[j] - gamma * dir[j]).collect();
        let diverged = !all_finite(&x_new);
        let f_new = if diverged { f64::NAN } else { gp.value(&x_new) };
        if diverged || !f_new.is_finite() || f_new > DIVERGENCE_FACTOR * (1.0 + f0) {
            return Err(RunError::Divergence {
                round: t + 1,
                trace: Box::new(RunTrace {
                    records,
                    checks,
                    final_x: x,
                    config_echo: None,
                }),
            });
        }
        checks.push(StepCheck {
            t: t + 1,
            estimate_recursion: None,
            descent: (
                f_new,
                descent_rhs_parts(f_value, &grad_avg, &dir, &x, &x_new, gamma, l),
            ),
            master_drift: 0.0,
        });
        x = x_new;
        grads = gp.client_gradients(&x);
        payloads = compress_round(&grads, t + 1);
        f_value = f_new;
        records.push(make_record(t + 1, f_value, &grads, &payloads));
    }
    Ok(RunTrace {
        records,
        checks,
        final_x: x,
        config_echo: None,
    })
}

/// Classical error feedback as a stepping state machine.
pub struct EfRunner<'a> {
    gp: &'a GlobalProblem,
    comp: &'a Compressor,
    gamma: f64,
    base_seed: u64,
    t: usize,
    x: Vec<f64>,
    /// Per-worker accumulated errors `eᵢᵗ`.
    residuals: Vec<Vec<f64>>,
    /// Per-worker last sent messages `wᵢᵗ` (stepsize-scaled).
    messages: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    grad_avg: Vec<f64>,
    f_value: f64,
    f0: f64,
}

impl<'a> EfRunner<'a> {
    pub fn new(
        gp: &'a GlobalProblem,
        x0: &[f64],
        gamma: f64,
        comp: &'a Compressor,
        seed: u64,
    ) -> Result<Self, RunError> {
        validate_setup(gp, x0, gamma, comp)?;
        let n = gp.n_clients();
        let grads = gp.client_gradients(x0);
        let messages: Vec<Vec<f64>> = par::map_indexed(n, |i| {
            let mut rng = worker_stream(seed, i, 0);
            let scaled: Vec<f64> = grads[i].iter().map(|&g| gamma * g).collect();
            comp.compress(&scaled, &mut rng)
        });
        let residuals = vec![vec![0.0; gp.dim()]; n];
        let grad_avg = average(&grads);
        let f_value = gp.value(x0);
        Ok(Self {
            gp,
            comp,
            gamma,
            base_seed: seed,
            t: 0,
            x: x0.to_vec(),
            residuals,
            messages,
            grads,
            grad_avg,
            f_value,
            f0: f_value,
        })
    }

    pub fn round(&self) -> usize {
        self.t
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn worker_message(&self, i: usize) -> &[f64] {
        &self.messages[i]
    }

    pub fn worker_residual(&self, i: usize) -> &[f64] {
        &self.residuals[i]
    }

    pub fn f_value(&self) -> f64 {
        self.f_value
    }

    pub fn grad_sq_norm(&self) -> f64 {
        sq_norm(&self.grad_avg)
    }

    /// `(1/n) Σ ‖wᵢᵗ/γ − ∇fᵢ(xᵗ)‖²` — the estimate-error metric in the same
    /// units as the EF21 family, so the traces are directly comparable.
    pub fn est_err(&self) -> f64 {
        let n = self.messages.len();
        let mut acc = 0.0;
        for i in 0..n {
            let scaled: Vec<f64> = self.messages[i].iter().map(|&w| w / self.gamma).collect();
            acc += sq_dist(&scaled, &self.grads[i]);
        }
        acc / n as f64
    }

    /// Advances one round, surfacing failures as [`RunError`].
    pub fn step_for_oracle(&mut self) -> Result<StepCheck, RunError> {
        let round = self.t + 1;
        self.step().map_err(|e| match e {
            StepFailure::Diverged => RunError::Divergence {
                round,
                trace: Box::new(RunTrace {
                    records: Vec::new(),
                    checks: Vec::new(),
                    final_x: self.x.clone(),
                    config_echo: None,
                }),
            },
            StepFailure::MasterDrift(drift) => RunError::MasterDrift { round, drift },
        })
    }

    fn step(&mut self) -> Result<StepCheck, StepFailure> {
        let n = self.gp.n_clients();
        let next_round = self.t + 1;
        let msg_avg = average(&self.messages);
        let x_new: Vec<f64> = (0..self.x.len()).map(|j| self.x[j] - msg_avg[j]).collect();
        if !all_finite(&x_new) {
            return Err(StepFailure::Diverged);
        }
        // Error update uses the old gradient; the new message compensates
        // with the fresh one.
        for i in 0..n {
            for j in 0..self.x.len() {
                self.residuals[i][j] += self.gamma * self.grads[i][j] - self.messages[i][j];
            }
        }
        let grads_new = self.gp.client_gradients(&x_new);
        let f_new = self.gp.value(&x_new);
        if !f_new.is_finite() || f_new > DIVERGENCE_FACTOR * (1.0 + self.f0) {
            return Err(StepFailure::Diverged);
        }
        let residuals = &self.residuals;
        let comp = self.comp;
        let gamma = self.gamma;
        let seed = self.base_seed;
        let messages_new: Vec<Vec<f64>> = par::map_indexed(n, |i| {
            let mut rng = worker_stream(seed, i, next_round);
            let to_send: Vec<f64> = (0..grads_new[i].len())
                .map(|j| residuals[i][j] + gamma * grads_new[i][j])
                .collect();
            comp.compress(&to_send, &mut rng)
        });

        // Direction applied this round, in gradient units.
        let dir: Vec<f64> = msg_avg.iter().map(|&w| w / self.gamma).collect();
        let check = StepCheck {
            t: next_round,
            estimate_recursion: None,
            descent: (
                f_new,
                descent_rhs_parts(
                    self.f_value,
                    &self.grad_avg,
                    &dir,
                    &self.x,
                    &x_new,
                    self.gamma,
                    self.gp.smoothness(),
                ),
            ),
            master_drift: 0.0,
        };

        self.x = x_new;
        self.messages = messages_new;
        self.grads = grads_new;
        self.grad_avg = average(&self.grads);
        self.f_value = f_new;
        self.t = next_round;
        Ok(check)
    }
}

/// Runs classical error feedback for `t_rounds` rounds.
pub fn run_ef(
    gp: &GlobalProblem,
    x0: &[f64],
    gamma: f64,
    comp: &Compressor,
    t_rounds: usize,
    seed: u64,
) -> Result<RunTrace, RunError> {
    let mut runner = EfRunner::new(gp, x0, gamma, comp, seed)?;
    let recorder = Recorder::new(gp, comp, gamma);
    let mut records = Vec::with_capacity(t_rounds + 1);
    let mut checks = Vec::with_capacity(t_rounds);
    records.push(recorder.record(
        0,
        runner.f_value,
        runner.grad_sq_norm(),
        runner.est_err(),
        None,
    ));
    for t in 0..t_rounds {
        match runner.step() {
            Ok(check) => {
                checks.push(check);
                records.push(recorder.record(
                    t + 1,
                    runner.f_value,
                    runner.grad_sq_norm(),
                    runner.est_err(),
                    None,
                ));
            }
            Err(StepFailure::Diverged) => {
                return Err(RunError::Divergence {
                    round: t + 1,
                    trace: Box::new(RunTrace {
                        records,
                        checks,
                        final_x: runner.x.clone(),
                        config_echo: None,
                    }),
                });
            }
            Err(StepFailure::MasterDrift(_)) => unreachable!("EF maintains no master aggregate"),
        }
    }
    Ok(RunTrace {
        records,
        checks,
        final_x: runner.x,
        config_echo: None,
    })
}

/// EF21+: each worker picks, per round, whichever of the plain compression
/// and the Markov estimate distorts its fresh gradient less.
pub fn run_ef21_plus(
    gp: &GlobalProblem,
    x0: &[f64],
    gamma: f64,
    comp: &Compressor,
    t_rounds: usize,
    seed: u64,
    allow_randomized: bool,
) -> Result<RunTrace, RunError> {
    validate_setup(gp, x0, gamma, comp)?;
    if !comp.is_deterministic() && !allow_randomized {
        return Err(RunError::InvalidArgument(
            "EF21+ requires a deterministic compressor; pass allow_randomized to override".into(),
        ));
    }
    let n = gp.n_clients();
    let l = gp.smoothness();
    let oc = optimal_s(comp.alpha());
    let recorder = Recorder::new(gp, comp, gamma);

    let mut x = x0.to_vec();
    let mut grads = gp.client_gradients(&x);
    let mut estimates: Vec<Vec<f64>> = par::map_indexed(n, |i| {
        let mut rng = worker_stream(seed, i, 0);
        comp.compress(&grads[i], &mut rng)
    });
    let mut f_value = gp.value(&x);
    let f0 = f_value;
    let mut est_err = mean_sq_dist(&estimates, &grads);

    let mut records = Vec::with_capacity(t_rounds + 1);
    let mut checks = Vec::with_capacity(t_rounds);
    records.push(recorder.record(0, f_value, sq_norm(&average(&grads)), est_err, None));

    for t in 0..t_rounds {
        // The master can reconstruct the average because it knows every
        // worker's branch choice; simulate it as the direct average.
        let dir = average(&estimates);
        let grad_avg = average(&grads);
        let x_new: Vec<f64> = (0..x.len()).map(|j| x[j] - gamma * dir[j]).collect();
        if !all_finite(&x_new) {
            return Err(RunError::Divergence {
                round: t + 1,
                trace: Box::new(RunTrace {
                    records,
                    checks,
                    final_x: x,
                    config_echo: None,
                }),
            });
        }
        let grads_new = gp.client_gradients(&x_new);
        let f_new = gp.value(&x_new);
        if !f_new.is_finite() || f_new > DIVERGENCE_FACTOR * (1.0 + f0) {
            return Err(RunError::Divergence {
                round: t + 1,
                trace: Box::new(RunTrace {
                    records,
                    checks,
                    final_x: x,
                    config_echo: None,
                }),
            });
        }

        let estimates_ref = &estimates;
        // Per worker: both candidates, then the smaller distortion wins;
        // ties go to the Markov branch. One stream per worker per round,
        // plain branch drawn first.
        let choices: Vec<(Vec<f64>, f64, bool)> = par::map_indexed(n, |i| {
            let mut rng = worker_stream(seed, i, t + 1);
            let plain = comp.compress(&grads_new[i], &mut rng);
            let diff: Vec<f64> = (0..grads_new[i].len())
                .map(|j| grads_new[i][j] - estimates_ref[i][j])
                .collect();
            let payload = comp.compress(&diff, &mut rng);
            let markov: Vec<f64> = (0..payload.len())
                .map(|j| estimates_ref[i][j] + payload[j])
                .collect();
            let plain_dist = sq_dist(&plain, &grads_new[i]);
            let markov_dist = sq_dist(&markov, &grads_new[i]);
            if markov_dist <= plain_dist {
                (markov, markov_dist, false)
            } else {
                (plain, plain_dist, true)
            }
        });

        let mut dcgd_count = 0usize;
        let mut est_err_new = 0.0;
        for (i, (chosen, dist, took_plain)) in choices.into_iter().enumerate() {
            estimates[i] = chosen;
            est_err_new += dist;
            if took_plain {
                dcgd_count += 1;
            }
        }
        est_err_new /= n as f64;
        let grad_shift = mean_sq_shift(&grads_new, &grads);

        checks.push(StepCheck {
            t: t + 1,
            estimate_recursion: Some((
                est_err_new,
                (1.0 - oc.theta) * est_err + oc.beta * grad_shift,
            )),
            descent: (
                f_new,
                descent_rhs_parts(f_value, &grad_avg, &dir, &x, &x_new, gamma, l),
            ),
            master_drift: 0.0,
        });

        x = x_new;
        grads = grads_new;
        f_value = f_new;
        est_err = est_err_new;
        records.push(recorder.record(
            t + 1,
            f_value,
            sq_norm(&average(&grads)),
            est_err,
            Some(dcgd_count as f64 / n as f64),
        ));
    }
    Ok(RunTrace {
        records,
        checks,
        final_x: x,
        config_echo: None,
    })
}

/// EF21 with minibatch stochastic gradients in place of full gradients.
/// Metrics still report exact quantities, computed outside the algorithm's
/// sampling streams.
pub fn run_ef21_sgd(
    gp: &GlobalProblem,
    x0: &[f64],
    gamma: f64,
    comp: &Compressor,
    t_rounds: usize,
    batch_size: usize,
    seed: u64,
) -> Result<RunTrace, RunError> {
    validate_setup(gp, x0, gamma, comp)?;
    let n = gp.n_clients();
    let min_n = gp.clients().iter().map(|c| c.num_samples()).min().unwrap();
    if batch_size == 0 || batch_size > min_n {
        return Err(RunError::InvalidArgument(format!(
            "batch size must satisfy 1 <= b <= {min_n}, got {batch_size}"
        )));
    }
    let l = gp.smoothness();
    let recorder = Recorder::new(gp, comp, gamma);

    let mut x = x0.to_vec();
    let mut exact_grads = gp.client_gradients(&x);
    let clients = gp.clients();
    let mut estimates: Vec<Vec<f64>> = par::map_indexed(n, |i| {
        let mut rng = worker_stream(seed, i, 0);
        let ghat = clients[i]
            .stochastic_gradient(&x, batch_size, &mut rng)
            .expect("batch size validated");
        comp.compress(&ghat, &mut rng)
    });
    let mut master = average(&estimates);
    let mut f_value = gp.value(&x);
    let f0 = f_value;

    let mut records = Vec::with_capacity(t_rounds + 1);
    let mut checks = Vec::with_capacity(t_rounds);
    let mut est_err = mean_sq_dist(&estimates, &exact_grads);
    records.push(recorder.record(0, f_value, sq_norm(&average(&exact_grads)), est_err, None));

    for t in 0..t_rounds {
        let dir = master.clone();
        let grad_avg = average(&exact_grads);
        let x_new: Vec<f64> = (0..x.len()).map(|j| x[j] - gamma * dir[j]).collect();
        if !all_finite(&x_new) {
            return Err(RunError::Divergence {
                round: t + 1,
                trace: Box::new(RunTrace {
                    records,
                    checks,
                    final_x: x,
                    config_echo: None,
                }),
            });
        }
        let f_new = gp.value(&x_new);
        if !f_new.is_finite() || f_new > DIVERGENCE_FACTOR * (1.0 + f0) {
            return Err(RunError::Divergence {
                round: t + 1,
                trace: Box::new(RunTrace {
                    records,
                    checks,
                    final_x: x,
                    config_echo: None,
                }),
            });
        }
        let estimates_ref = &estimates;
        let payloads: Vec<Vec<f64>> = par::map_indexed(n, |i| {
            let mut rng = worker_stream(seed, i, t + 1);
            let ghat = clients[i]
                .stochastic_gradient(&x_new, batch_size, &mut rng)
                .expect("batch size validated");
            let diff: Vec<f64> = (0..ghat.len())
                .map(|j| ghat[j] - estimates_ref[i][j])
                .collect();
            comp.compress(&diff, &mut rng)
        });
        for i in 0..n {
            crate::linalg::add_assign(&mut estimates[i], &payloads[i]);
        }
        let payload_avg = average(&payloads);
        crate::linalg::add_assign(&mut master, &payload_avg);
        let direct = average(&estimates);
        let drift = relative_drift(&master, &direct);
        if drift > MASTER_DRIFT_TOL {
            return Err(RunError::MasterDrift {
                round: t + 1,
                drift,
            });
        }

        // Measurement path: exact gradients, no stream involvement.
        let exact_new = gp.client_gradients(&x_new);
        let est_err_new = mean_sq_dist(&estimates, &exact_new);
        checks.push(StepCheck {
            t: t + 1,
            estimate_recursion: None,
            descent: (
                f_new,
                descent_rhs_parts(f_value, &grad_avg, &dir, &x, &x_new, gamma, l),
            ),
            master_drift: drift,
        });

        x = x_new;
        exact_grads = exact_new;
        f_value = f_new;
        est_err = est_err_new;
        records.push(recorder.record(
            t + 1,
            f_value,
            sq_norm(&average(&exact_grads)),
            est_err,
            None,
        ));
    }
    Ok(RunTrace {
        records,
        checks,
        final_x: x,
        config_echo: None,
    })
}
