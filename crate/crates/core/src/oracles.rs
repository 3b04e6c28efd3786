//! Independent verification machinery.
//!
//! Everything here checks the main implementation from the outside:
//! finite differences validate analytic gradients, the equivalence check
//! drives the classical error-feedback loop and EF21 side by side under an
//! additive compressor, and the Markov distortion experiment feeds the
//! stateful compressor a synthetic linearly convergent sequence and compares
//! the measured distortion against its unrolled bound.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compressors::{markov_step, Compressor, MarkovState};
use crate::linalg::{max_abs_diff, sq_dist};
use crate::methods::{Ef21Runner, EfRunner, InitScheme, RunError};
use crate::problems::GlobalProblem;
use crate::theory::optimal_s;

/// Outcome of a side-by-side trajectory comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    /// Largest absolute deviation seen across rounds, workers and
    /// coordinates (iterates and the message/estimate identity combined).
    pub max_abs_deviation: f64,
    /// First round whose deviation exceeded the agreement threshold, if any.
    pub first_divergent_round: Option<usize>,
    pub rounds_checked: usize,
}

// The two loops order floating-point work differently, so agreement means
// "within noise", not bit equality. 1e-9 matches the acceptance tolerance.
const AGREEMENT_TOL: f64 = 1e-9;

/// Central-difference gradient with per-coordinate step
/// `hₖ = h_scale·(1+|xₖ|)`.
pub fn finite_diff_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h_scale: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        let h = h_scale * (1.0 + x[k].abs());
        probe[k] = x[k] + h;
        let up = f(&probe);
        probe[k] = x[k] - h;
        let down = f(&probe);
        probe[k] = x[k];
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Drives classical error feedback and EF21 side by side with the same
/// compressor and inputs, tracking both the iterate gap and the proof's
/// induction identity `wᵢᵗ = γ·gᵢᵗ`.
///
/// For a deterministic, positively homogeneous, additive compressor the two
/// trajectories coincide; a non-additive compressor (Top-k) makes this a
/// negative control with a finite first divergent round.
pub fn ef_vs_ef21_deviation(
    gp: &GlobalProblem,
    x0: &[f64],
    gamma: f64,
    comp: &Compressor,
    t_rounds: usize,
) -> Result<DeviationReport, RunError> {
    let seed = 0x0e2_1e21;
    let mut ef = EfRunner::new(gp, x0, gamma, comp, seed)?;
    let mut ef21 = Ef21Runner::new(gp, x0, gamma, comp, seed, InitScheme::CompressG0)?;
    let n = gp.n_clients();

    let mut report = DeviationReport {
        max_abs_deviation: 0.0,
        first_divergent_round: None,
        rounds_checked: t_rounds,
    };
    let note = |round: usize, dev: f64, report: &mut DeviationReport| {
        report.max_abs_deviation = report.max_abs_deviation.max(dev);
        if dev > AGREEMENT_TOL && report.first_divergent_round.is_none() {
            report.first_divergent_round = Some(round);
        }
    };

    for round in 0..=t_rounds {
        let mut dev = max_abs_diff(ef.x(), ef21.x());
        for i in 0..n {
            let scaled: Vec<f64> = ef21.worker_estimate(i).iter().map(|&g| gamma * g).collect();
            dev = dev.max(max_abs_diff(ef.worker_message(i), &scaled));
        }
        note(round, dev, &mut report);
        if round < t_rounds {
            ef.step_for_oracle()?;
            ef21.step_for_oracle()?;
        }
    }
    Ok(report)
}

/// [`ef_vs_ef21_deviation`] specialized to the scaled linear compressor,
/// the canonical map satisfying all three equivalence hypotheses.
pub fn check_equivalence(
    gp: &GlobalProblem,
    x0: &[f64],
    gamma: f64,
    c: f64,
    t_rounds: usize,
) -> Result<DeviationReport, RunError> {
    let comp = Compressor::scaled_linear(c, gp.dim())
        .map_err(|e| RunError::InvalidArgument(e.to_string()))?;
    ef_vs_ef21_deviation(gp, x0, gamma, &comp, t_rounds)
}

/// Feeds the Markov compressor the linearly convergent sequence
/// `vᵗ = v* + (1−φ)ᵗ(v⁰−v*)` and returns the distortions
/// `Dᵗ = ‖estimate − vᵗ‖²` for `t = 0..=t_rounds`.
///
/// For deterministic compressors the unrolled distortion bound
/// `Dᵗ ≤ (1−θ*)ᵗ D⁰ + β*·Σᵢ (1−θ*)ⁱ Δᵗ⁻¹⁻ⁱ` (with `Δᵗ = ‖vᵗ⁺¹−vᵗ‖²`) is
/// asserted at every step; randomized compressors satisfy it only in
/// expectation, so the caller averages over seeds instead.
pub fn markov_distortion_experiment(
    v0: &[f64],
    v_star: &[f64],
    phi: f64,
    comp: &Compressor,
    t_rounds: usize,
    seed: u64,
) -> Vec<f64> {
    assert!(phi > 0.0 && phi < 1.0, "phi must lie in (0,1)");
    assert_eq!(v0.len(), v_star.len());
    let d = v0.len();
    let oc = optimal_s(comp.alpha());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = MarkovState::zeros(d);
    let mut distortions = Vec::with_capacity(t_rounds + 1);
    let mut bound = 0.0;
    let mut prev_v: Option<Vec<f64>> = None;
    for t in 0..=t_rounds {
        let decay = (1.0 - phi).powi(t as i32);
        let v: Vec<f64> = (0..d)
            .map(|j| v_star[j] + decay * (v0[j] - v_star[j]))
            .collect();
        markov_step(&mut state, &v, comp, &mut rng).expect("dimensions fixed");
        let dist = sq_dist(state.estimate(), &v);
        if t == 0 {
            bound = dist;
        } else {
            // Unrolled recursion advances as bound' = (1-θ)·bound + β·Δ.
            let delta = sq_dist(&v, prev_v.as_ref().unwrap());
            bound = (1.0 - oc.theta) * bound + oc.beta * delta;
        }
        if comp.is_deterministic() {
            assert!(
                dist <= bound + 1e-12 * bound.max(1.0),
                "distortion bound violated at t={t}: {dist} > {bound}"
            );
        }
        distortions.push(dist);
        prev_v = Some(v);
    }
    distortions
}
