//! Contractive compressors and the stateful Markov compressor.
//!
//! A compressor is a map `C` on d-vectors whose squared distortion contracts:
//! `E‖C(x) − x‖² ≤ (1−α)‖x‖²` for some `α ∈ (0,1]`. The kinds provided here:
//!
//! - **Top-k**: keeps the k largest-magnitude coordinates, `α = k/d`.
//!   Deterministic, positively homogeneous, not additive.
//! - **Scaled Rand-k**: keeps a uniformly random k-subset. The unbiased
//!   Rand-k compressor scales kept entries by `d/k` and has variance factor
//!   `ω = d/k − 1`; dividing by `1+ω` cancels the scaling exactly, so the
//!   contractive version simply masks. `α = k/d` in expectation.
//! - **Scaled linear**: `x ↦ c·x` for `c ∈ (0,1]`, with `α = c(2−c)` since
//!   `‖cx − x‖² = (1−c)²‖x‖²`. Deterministic, positively homogeneous and
//!   additive — the canonical compressor under which classical error
//!   feedback and EF21 produce identical iterates.
//! - **Identity**: lossless, `α = 1`.
//!
//! The Markov compressor turns any of these into a stateful estimator of a
//! vector sequence: it keeps the running estimate `g` and, fed a new target
//! `v`, transmits only `C(v − g)`, then advances `g` by that payload.
//!
//! Compressors are stateless and safe to call from concurrent workers.
//! Randomized kinds take an explicit random stream per call; there is no
//! hidden global randomness.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::{add_assign, sq_dist, sq_norm, sub};

/// Errors for compressor construction and application.
#[derive(Debug, Error)]
pub enum CompressorError {
    #[error("k must satisfy 1 <= k <= d, got k={k} with d={d}")]
    KOutOfRange { k: usize, d: usize },
    #[error("scaling factor must lie in (0, 1], got {0}")]
    ScaleOutOfRange(f64),
    #[error("dimension mismatch: compressor built for d={expected}, input has d={got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Which compression map a [`Compressor`] applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompressorKind {
    TopK { k: usize },
    RandKScaled { k: usize },
    ScaledLinear { c: f64 },
    Identity,
}

/// A contractive compressor bound to a fixed input dimension.
///
/// `value_bits` is the payload width per transmitted value used by the bit
/// accounting in the harness (default 32).
#[derive(Debug, Clone)]
pub struct Compressor {
    kind: CompressorKind,
    dim: usize,
    value_bits: u32,
}

impl Compressor {
    pub fn top_k(k: usize, d: usize) -> Result<Self, CompressorError> {
        if k == 0 || k > d {
            return Err(CompressorError::KOutOfRange { k, d });
        }
        Ok(Self {
            kind: CompressorKind::TopK { k },
            dim: d,
            value_bits: 32,
        })
    }

    pub fn rand_k_scaled(k: usize, d: usize) -> Result<Self, CompressorError> {
        if k == 0 || k > d {
            return Err(CompressorError::KOutOfRange { k, d });
        }
        Ok(Self {
            kind: CompressorKind::RandKScaled { k },
            dim: d,
            value_bits: 32,
        })
    }

    pub fn scaled_linear(c: f64, d: usize) -> Result<Self, CompressorError> {
        if !(c > 0.0 && c <= 1.0) {
            return Err(CompressorError::ScaleOutOfRange(c));
        }
        Ok(Self {
            kind: CompressorKind::ScaledLinear { c },
            dim: d,
            value_bits: 32,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            kind: CompressorKind::Identity,
            dim: d,
            value_bits: 32,
        }
    }

    pub fn with_value_bits(mut self, bits: u32) -> Self {
        self.value_bits = bits;
        self
    }

    pub fn kind(&self) -> CompressorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value_bits(&self) -> u32 {
        self.value_bits
    }

    /// Claimed contraction parameter `α ∈ (0,1]`.
    pub fn alpha(&self) -> f64 {
        match self.kind {
            CompressorKind::TopK { k } | CompressorKind::RandKScaled { k } => {
                k as f64 / self.dim as f64
            }
            CompressorKind::ScaledLinear { c } => c * (2.0 - c),
            CompressorKind::Identity => 1.0,
        }
    }

    /// True for the kinds whose output carries no randomness.
    pub fn is_deterministic(&self) -> bool {
        !matches!(self.kind, CompressorKind::RandKScaled { .. })
    }

    /// Bits a worker sends per application of this compressor.
    ///
    /// Sparse kinds ship k `(index, value)` pairs, an index costing
    /// `ceil(log2 d)` bits; dense kinds ship all d values. The accounting is
    /// per-representation, so Top-d is charged more than a dense send.
    pub fn payload_bits(&self) -> f64 {
        let idx_bits = ceil_log2(self.dim);
        match self.kind {
            CompressorKind::TopK { k } | CompressorKind::RandKScaled { k } => {
                (k as u64 * (self.value_bits as u64 + idx_bits as u64)) as f64
            }
            CompressorKind::ScaledLinear { .. } | CompressorKind::Identity => {
                (self.dim as u64 * self.value_bits as u64) as f64
            }
        }
    }

    /// Applies the compressor. Randomized kinds draw from `rng`; deterministic
    /// kinds leave it untouched. Panics if `x` does not match the compressor's
    /// dimension (use the free functions for fallible one-off calls).
    pub fn compress(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "compress: dimension mismatch");
        match self.kind {
            CompressorKind::TopK { k } => top_k(x, k).expect("k validated at construction"),
            CompressorKind::RandKScaled { k } => {
                rand_k_scaled(x, k, rng).expect("k validated at construction")
            }
            CompressorKind::ScaledLinear { c } => {
                scaled_linear(x, c).expect("c validated at construction")
            }
            CompressorKind::Identity => x.to_vec(),
        }
    }
}

fn ceil_log2(d: usize) -> u32 {
    debug_assert!(d >= 1);
    if d <= 1 {
        0
    } else {
        usize::BITS - (d - 1).leading_zeros()
    }
}

/// Keeps the k largest-magnitude coordinates of `x`, zeroing the rest.
///
/// The retained index set maximizes retained squared mass; among equal
/// magnitudes the lower index wins, so the output is deterministic.
pub fn top_k(x: &[f64], k: usize) -> Result<Vec<f64>, CompressorError> {
    let d = x.len();
    if k == 0 || k > d {
        return Err(CompressorError::KOutOfRange { k, d });
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_unstable_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; d];
    for &i in &order[..k] {
        out[i] = x[i];
    }
    Ok(out)
}

/// Unbiased Rand-k: keeps a uniformly random k-subset (without replacement)
/// scaled by `d/k`, zeroing the rest. Satisfies `E C(x) = x` with variance
/// factor `ω = d/k − 1`.
pub fn rand_k(x: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, CompressorError> {
    let d = x.len();
    let support = rand_k_support(d, k, rng)?;
    let scale = d as f64 / k as f64;
    let mut out = vec![0.0; d];
    for i in support {
        out[i] = scale * x[i];
    }
    Ok(out)
}

/// Contractive Rand-k: the unbiased Rand-k output divided by `1 + ω` with
/// `ω = d/k − 1`. The `d/k` blow-up and the `k/d` shrink cancel exactly, so
/// the kept coordinates equal the input bit-for-bit.
pub fn rand_k_scaled(
    x: &[f64],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, CompressorError> {
    let d = x.len();
    let support = rand_k_support(d, k, rng)?;
    let mut out = vec![0.0; d];
    for i in support {
        out[i] = x[i];
    }
    Ok(out)
}

// Uniform k-subset of 0..d via a partial Fisher–Yates shuffle.
fn rand_k_support(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, CompressorError> {
    if k == 0 || k > d {
        return Err(CompressorError::KOutOfRange { k, d });
    }
    let mut perm: Vec<usize> = (0..d).collect();
    for i in 0..k {
        let j = rng.random_range(i..d);
        perm.swap(i, j);
    }
    perm.truncate(k);
    Ok(perm)
}

/// `x ↦ c·x` for `c ∈ (0,1]`. Deterministic, positively homogeneous and
/// additive, with contraction `α = c(2−c)`.
pub fn scaled_linear(x: &[f64], c: f64) -> Result<Vec<f64>, CompressorError> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(CompressorError::ScaleOutOfRange(c));
    }
    Ok(x.iter().map(|&v| c * v).collect())
}

/// Per-worker memory of the Markov compressor: the current estimate of the
/// tracked vector sequence. Owned by exactly one worker; its dimension never
/// changes across rounds.
#[derive(Debug, Clone)]
pub struct MarkovState {
    g: Vec<f64>,
}

impl MarkovState {
    /// Fresh state with a zero estimate. Stepping from here reproduces the
    /// initialization `g = C(v)` since `C(v − 0) = C(v)`.
    pub fn zeros(d: usize) -> Self {
        Self { g: vec![0.0; d] }
    }

    pub fn from_estimate(g: Vec<f64>) -> Self {
        Self { g }
    }

    pub fn estimate(&self) -> &[f64] {
        &self.g
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }
}

/// Advances the Markov compressor one step toward target `v`.
///
/// Returns the payload `C(v − g)` — the only quantity that would cross the
/// wire — and updates the state to `g + payload`.
pub fn markov_step(
    state: &mut MarkovState,
    v: &[f64],
    comp: &Compressor,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, CompressorError> {
    if v.len() != state.g.len() || v.len() != comp.dim() {
        return Err(CompressorError::DimensionMismatch {
            expected: comp.dim(),
            got: v.len(),
        });
    }
    let payload = comp.compress(&sub(v, &state.g), rng);
    add_assign(&mut state.g, &payload);
    Ok(payload)
}

/// Empirical upper estimate of the distortion ratio `E‖C(x)−x‖²/‖x‖²`.
///
/// Samples `trials` inputs, alternating standard Gaussian vectors with
/// uniform-magnitude random-sign vectors (the latter attain the Top-k bound
/// with equality, which Gaussians alone would under-test), and returns the
/// largest per-input Monte-Carlo ratio. Zero inputs are skipped. The result
/// must not exceed `1 − α` beyond statistical tolerance.
pub fn contraction_estimate(
    comp: &Compressor,
    d: usize,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    assert!(trials >= 1, "contraction_estimate: trials must be >= 1");
    // Draws per input for randomized compressors; deterministic ones need one.
    const INNER_DRAWS: usize = 200;
    let seeds: Vec<u64> = (0..trials).map(|_| rng.next_u64()).collect();
    let deterministic = comp.is_deterministic();
    let ratios = crate::par::map_indexed(trials, move |t| {
        let mut trng = ChaCha8Rng::seed_from_u64(seeds[t]);
        let x: Vec<f64> = if t % 2 == 0 {
            (0..d).map(|_| StandardNormal.sample(&mut trng)).collect()
        } else {
            (0..d)
                .map(|_| if trng.random::<bool>() { 1.0 } else { -1.0 })
                .collect()
        };
        let denom = sq_norm(&x);
        if denom == 0.0 {
            return None;
        }
        let draws = if deterministic { 1 } else { INNER_DRAWS };
        let mut acc = 0.0;
        for _ in 0..draws {
            let cx = comp.compress(&x, &mut trng);
            acc += sq_dist(&cx, &x);
        }
        Some(acc / draws as f64 / denom)
    });
    ratios.into_iter().flatten().fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn top_k_keeps_largest_magnitude() {
        assert_eq!(top_k(&[1.0, -3.0, 2.0], 1).unwrap(), vec![0.0, -3.0, 0.0]);
    }

    #[test]
    fn top_k_zero_input_is_zero() {
        assert_eq!(top_k(&[0.0, 0.0, 0.0], 2).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn top_k_tie_goes_to_lower_index() {
        // |2| ties |-2|; the lower index wins. Both choices obey the Top-1
        // contraction bound on this input: dropping either pair leaves
        // squared mass 5 <= (1 - 1/3) * 9 = 6.
        let x = [2.0, -2.0, 1.0];
        assert_eq!(top_k(&x, 1).unwrap(), vec![2.0, 0.0, 0.0]);
        for kept in 0..2 {
            let mut out = vec![0.0; 3];
            out[kept] = x[kept];
            assert!(sq_dist(&out, &x) <= (1.0 - 1.0 / 3.0) * sq_norm(&x));
        }
    }

    #[test]
    fn top_k_rejects_bad_k() {
        assert!(top_k(&[1.0], 0).is_err());
        assert!(top_k(&[1.0], 2).is_err());
    }

    #[test]
    fn rand_k_scaled_full_support_is_identity() {
        // k = d keeps everything; omega = 0.
        let out = rand_k_scaled(&[5.0, 7.0], 2, &mut rng(3)).unwrap();
        assert_eq!(out, vec![5.0, 7.0]);
    }

    #[test]
    fn rand_k_scaled_kept_entry_is_exact() {
        // (d/k) * x / (1 + omega) = 3 * 4 / 3 = 4 on the selected index.
        // Find a seed whose first pick is index 0.
        let mut seed = 0;
        loop {
            let mut r = rng(seed);
            if r.random_range(0..3usize) == 0 {
                break;
            }
            seed += 1;
        }
        let out = rand_k_scaled(&[4.0, 0.0, 0.0], 1, &mut rng(seed)).unwrap();
        assert_eq!(out, vec![4.0, 0.0, 0.0]);
    }

    #[test]
    fn rand_k_unscaled_is_unbiased_monte_carlo() {
        // Mean of unscaled Rand-1 over many draws approaches x within
        // 3 standard errors per coordinate.
        let x = [1.0, 2.0, 3.0];
        let n = 100_000usize;
        let mut r = rng(7);
        let mut mean = [0.0f64; 3];
        let mut m2 = [0.0f64; 3];
        for _ in 0..n {
            let y = rand_k(&x, 1, &mut r).unwrap();
            for j in 0..3 {
                mean[j] += y[j];
                m2[j] += y[j] * y[j];
            }
        }
        for j in 0..3 {
            let m = mean[j] / n as f64;
            let var = (m2[j] / n as f64 - m * m).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (m - x[j]).abs() <= 3.0 * se,
                "coordinate {j}: mean {m} vs {} (se {se})",
                x[j]
            );
        }
    }

    #[test]
    fn scaled_linear_basic() {
        assert_eq!(scaled_linear(&[2.0, -4.0], 0.5).unwrap(), vec![1.0, -2.0]);
        let x = [0.3, -1.7, 2.2];
        assert_eq!(scaled_linear(&x, 1.0).unwrap(), x.to_vec());
        assert!(scaled_linear(&x, 0.0).is_err());
        assert!(scaled_linear(&x, 1.5).is_err());
    }

    #[test]
    fn scaled_linear_distortion_matches_alpha() {
        // ||C(x) - x||^2 = (1-c)^2 ||x||^2, so alpha = c(2-c) = 0.75 at c = 0.5.
        let x = [3.0, 0.0];
        let out = scaled_linear(&x, 0.5).unwrap();
        assert_relative_eq!(sq_dist(&out, &x), 2.25);
        assert_relative_eq!(sq_dist(&out, &x), (1.0 - 0.75) * sq_norm(&x));
    }

    #[test]
    fn markov_step_from_zero_compresses_target() {
        // First step from a zero estimate equals plain compression of v.
        let comp = Compressor::top_k(1, 2).unwrap();
        let mut st = MarkovState::zeros(2);
        let v = [1.0, -3.0];
        let payload = markov_step(&mut st, &v, &comp, &mut rng(0)).unwrap();
        assert_eq!(payload, top_k(&v, 1).unwrap());
        assert_eq!(st.estimate(), &[0.0, -3.0]);
    }

    #[test]
    fn markov_step_exact_estimate_is_fixed_point() {
        let comp = Compressor::top_k(2, 3).unwrap();
        let v = vec![1.0, -2.0, 0.5];
        let mut st = MarkovState::from_estimate(v.clone());
        let payload = markov_step(&mut st, &v, &comp, &mut rng(0)).unwrap();
        assert_eq!(payload, vec![0.0; 3]);
        assert_eq!(st.estimate(), v.as_slice());
    }

    #[test]
    fn markov_step_dimension_mismatch() {
        let comp = Compressor::top_k(1, 3).unwrap();
        let mut st = MarkovState::zeros(2);
        assert!(markov_step(&mut st, &[1.0, 2.0], &comp, &mut rng(0)).is_err());
    }

    #[test]
    fn markov_distortion_vanishes_on_linear_sequence() {
        // Feed v^t = v* + (1-phi)^t (v0 - v*): the estimate distortion decays
        // to (numerically) nothing by t = 500.
        let d = 5;
        let comp = Compressor::top_k(1, d).unwrap();
        let phi = 0.1f64;
        let v0: Vec<f64> = vec![1.0, -2.0, 3.0, -4.0, 5.0];
        let v_star: Vec<f64> = vec![0.5, 0.25, -0.125, 2.0, -1.0];
        let mut st = MarkovState::zeros(d);
        let mut r = rng(0);
        let mut d0 = 0.0;
        let mut dt = 0.0;
        for t in 0..=500usize {
            let decay = (1.0 - phi).powi(t as i32);
            let v: Vec<f64> = (0..d)
                .map(|j| v_star[j] + decay * (v0[j] - v_star[j]))
                .collect();
            markov_step(&mut st, &v, &comp, &mut r).unwrap();
            dt = sq_dist(st.estimate(), &v);
            if t == 0 {
                d0 = dt;
            }
        }
        assert!(dt < 1e-6 * d0, "final distortion {dt} vs initial {d0}");
    }

    #[test]
    fn contraction_estimate_identity_is_zero() {
        let comp = Compressor::identity(10);
        assert_eq!(contraction_estimate(&comp, 10, 100, &mut rng(1)), 0.0);
    }

    #[test]
    fn contraction_estimate_top_k_attains_bound() {
        // Uniform-magnitude inputs attain the Top-k bound with equality.
        let comp = Compressor::top_k(1, 4).unwrap();
        let est = contraction_estimate(&comp, 4, 100, &mut rng(2));
        assert_eq!(est, 0.75);
    }

    #[test]
    fn contraction_estimate_scaled_linear_is_input_free() {
        let comp = Compressor::scaled_linear(0.5, 6).unwrap();
        let est = contraction_estimate(&comp, 6, 50, &mut rng(3));
        assert_relative_eq!(est, 0.25, max_relative = 1e-12);
    }

    #[test]
    fn contraction_estimate_rand_k_within_tolerance() {
        // E||C(x)-x||^2 = (1 - k/d)||x||^2 exactly for the masked Rand-k, so
        // the per-input mean over 200 draws stays within a conservative 3-SE
        // band (per-draw ratio lies in [0,1], so SE <= 0.5/sqrt(200)).
        let comp = Compressor::rand_k_scaled(1, 4).unwrap();
        let est = contraction_estimate(&comp, 4, 400, &mut rng(4));
        assert!(est <= 0.75 + 3.0 * 0.5 / (200f64).sqrt(), "estimate {est}");
    }

    #[test]
    fn payload_bits_accounting() {
        assert_eq!(Compressor::top_k(1, 68).unwrap().payload_bits(), 39.0);
        assert_eq!(Compressor::identity(10).payload_bits(), 320.0);
        // Top-d is charged per representation, above the dense cost.
        let top_d = Compressor::top_k(16, 16).unwrap();
        assert_eq!(top_d.payload_bits(), 576.0);
        assert!(top_d.payload_bits() >= 16.0 * 32.0);
    }

    #[test]
    fn top_k_is_not_additive_witness() {
        // Additivity fails: C(a) + C(b) != C(a + b) for Top-1.
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let lhs: Vec<f64> = {
            let ca = top_k(&a, 1).unwrap();
            let cb = top_k(&b, 1).unwrap();
            (0..2).map(|i| ca[i] + cb[i]).collect()
        };
        let sum = [1.0, 1.0];
        let rhs = top_k(&sum, 1).unwrap();
        assert_ne!(lhs, rhs);
    }

    proptest! {
        #[test]
        fn deterministic_compressors_contract_per_sample(
            xs in proptest::collection::vec(-100.0f64..100.0, 1..12),
            k in 1usize..12,
            c in 0.05f64..1.0,
        ) {
            let d = xs.len();
            let k = k.min(d).max(1);
            let norm = sq_norm(&xs);
            prop_assume!(norm > 0.0);

            let tk = top_k(&xs, k).unwrap();
            let alpha_tk = k as f64 / d as f64;
            prop_assert!(sq_dist(&tk, &xs) <= (1.0 - alpha_tk) * norm + 1e-12 * norm);

            let sl = scaled_linear(&xs, c).unwrap();
            let alpha_sl = c * (2.0 - c);
            prop_assert!(sq_dist(&sl, &xs) <= (1.0 - alpha_sl) * norm + 1e-12 * norm);
        }

        #[test]
        fn top_k_and_scaled_linear_positively_homogeneous(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..10),
            k in 1usize..10,
        ) {
            let d = xs.len();
            let k = k.min(d).max(1);
            for gamma in [0.5, 2.0, 10.0] {
                let scaled: Vec<f64> = xs.iter().map(|&v| gamma * v).collect();
                let lhs = top_k(&scaled, k).unwrap();
                let rhs: Vec<f64> = top_k(&xs, k).unwrap().iter().map(|&v| gamma * v).collect();
                prop_assert_eq!(lhs, rhs);

                let lhs = scaled_linear(&scaled, 0.5).unwrap();
                let rhs: Vec<f64> =
                    scaled_linear(&xs, 0.5).unwrap().iter().map(|&v| gamma * v).collect();
                prop_assert_eq!(lhs, rhs);
            }
        }

        #[test]
        fn scaled_linear_additive(
            a in proptest::collection::vec(-50.0f64..50.0, 4),
            b in proptest::collection::vec(-50.0f64..50.0, 4),
        ) {
            let sum: Vec<f64> = (0..4).map(|i| a[i] + b[i]).collect();
            let lhs = scaled_linear(&sum, 0.5).unwrap();
            let rhs: Vec<f64> = {
                let ca = scaled_linear(&a, 0.5).unwrap();
                let cb = scaled_linear(&b, 0.5).unwrap();
                (0..4).map(|i| ca[i] + cb[i]).collect()
            };
            // c*(a+b) vs c*a + c*b agree exactly for c = 0.5 (a power of two).
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn markov_update_obeys_distortion_recursion(
            g in proptest::collection::vec(-10.0f64..10.0, 6),
            v in proptest::collection::vec(-10.0f64..10.0, 6),
            v_next in proptest::collection::vec(-10.0f64..10.0, 6),
            k in 1usize..6,
            s in 0.05f64..5.0,
        ) {
            // One estimate update against a moved target: the new distortion
            // is bounded by the contracted old distortion plus the amplified
            // target shift, for every admissible splitting parameter.
            let alpha = k as f64 / 6.0;
            let (theta, beta) = crate::theory::theta_beta(alpha, s);
            prop_assume!(theta > 0.0);
            let comp = Compressor::top_k(k, 6).unwrap();
            let mut st = MarkovState::from_estimate(g.clone());
            markov_step(&mut st, &v_next, &comp, &mut rng(0)).unwrap();
            let lhs = sq_dist(st.estimate(), &v_next);
            let rhs = (1.0 - theta) * sq_dist(&g, &v) + beta * sq_dist(&v_next, &v);
            prop_assert!(lhs <= rhs + 1e-10 * rhs.max(1.0), "lhs {lhs} rhs {rhs}");
        }

        #[test]
        fn rand_k_scaled_contracts_in_expectation(
            xs in proptest::collection::vec(-20.0f64..20.0, 4..9),
            k in 1usize..4,
            seed in 0u64..1000,
        ) {
            let d = xs.len();
            let norm = sq_norm(&xs);
            prop_assume!(norm > 0.0);
            let mut r = rng(seed);
            let n = 300;
            let mut acc = 0.0;
            for _ in 0..n {
                let y = rand_k_scaled(&xs, k, &mut r).unwrap();
                acc += sq_dist(&y, &xs);
            }
            let mean = acc / n as f64;
            let bound = (1.0 - k as f64 / d as f64) * norm;
            // Per-draw distortion is at most ||x||^2; allow 3 conservative SEs.
            let se = norm * 0.5 / (n as f64).sqrt();
            prop_assert!(mean <= bound + 3.0 * se);
        }
    }
}
