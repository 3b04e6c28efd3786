//! Closed-form constants, theoretical stepsizes and the Lyapunov function.
//!
//! A compressor with contraction `α` induces a one-step distortion recursion
//! for the Markov estimate: for any `s > 0`,
//!
//! ```text
//! G⁺ ≤ (1 − θ(s)) G + β(s) ‖∇f(x⁺) − ∇f(x)‖²,
//! θ(s) = 1 − (1−α)(1+s),   β(s) = (1−α)(1 + 1/s).
//! ```
//!
//! The free parameter is chosen to minimize `β(s)/θ(s)`; the minimizer is
//! `s* = 1/√(1−α) − 1`, giving `θ* = 1 − √(1−α)`, `β* = (1−α)/(1−√(1−α))`,
//! and `√(β*/θ*) = √(1−α)/(1−√(1−α)) ≤ 2/α − 1`. These constants drive both
//! theoretical stepsizes and the linear-rate Lyapunov function
//! `Ψ = (f(x) − f(x*)) + (γ/θ) G`.

use serde::{Deserialize, Serialize};

/// `(θ(s), β(s))` for a user-chosen `s > 0`.
///
/// `θ` may be non-positive when `s ≥ α/(1−α)`; callers check. `α = 1` is
/// handled by the formulas themselves (θ = 1, β = 0).
pub fn theta_beta(alpha: f64, s: f64) -> (f64, f64) {
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0,1]");
    assert!(s > 0.0, "s must be positive");
    let r = 1.0 - alpha;
    (1.0 - r * (1.0 + s), r * (1.0 + 1.0 / s))
}

/// Constants at the optimal choice of `s`.
#[derive(Debug, Clone, Copy)]
pub struct OptimalConstants {
    /// Minimizer of `β(s)/θ(s)` over `(0, α/(1−α))`; `+∞` in the lossless limit.
    pub s_star: f64,
    pub theta: f64,
    pub beta: f64,
    /// `√(β*/θ*)`, the factor multiplying the mean-square smoothness constant
    /// in the stepsize bounds.
    pub ratio: f64,
}

/// Optimal `s` and the constants it induces.
///
/// `α = 1` is treated as an explicit limit branch (θ = 1, β = 0, ratio = 0)
/// rather than evaluating 0/0.
pub fn optimal_s(alpha: f64) -> OptimalConstants {
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0,1]");
    if alpha == 1.0 {
        return OptimalConstants {
            s_star: f64::INFINITY,
            theta: 1.0,
            beta: 0.0,
            ratio: 0.0,
        };
    }
    let u = (1.0 - alpha).sqrt();
    OptimalConstants {
        s_star: 1.0 / u - 1.0,
        theta: 1.0 - u,
        beta: (1.0 - alpha) / (1.0 - u),
        ratio: u / (1.0 - u),
    }
}

/// Largest stepsize certified for the nonconvex rate:
/// `γ = (L + L̃·√(β*/θ*))⁻¹`. Recovers `1/L` at `α = 1`.
pub fn stepsize_nonconvex(l: f64, l_tilde: f64, alpha: f64) -> f64 {
    assert!(
        l > 0.0 && l_tilde > 0.0,
        "smoothness constants must be positive"
    );
    let oc = optimal_s(alpha);
    1.0 / (l + l_tilde * oc.ratio)
}

/// Largest stepsize certified for the linear rate under the PL condition:
/// `γ = min{ (L + L̃·√(2β*/θ*))⁻¹, θ*/(2μ) }`.
pub fn stepsize_pl(l: f64, l_tilde: f64, alpha: f64, mu: f64) -> f64 {
    assert!(
        l > 0.0 && l_tilde > 0.0,
        "smoothness constants must be positive"
    );
    assert!(mu > 0.0, "mu must be positive");
    let oc = optimal_s(alpha);
    let smooth_branch = 1.0 / (l + l_tilde * (2.0 * oc.beta / oc.theta).sqrt());
    let pl_branch = oc.theta / (2.0 * mu);
    smooth_branch.min(pl_branch)
}

/// `γ = 1/(√a + b)`, which guarantees `aγ² + bγ ≤ 1` and is within a factor
/// of two of the largest such `γ`. Zero `a` or `b` are accepted as limits.
pub fn quadratic_stepsize_bound(a: f64, b: f64) -> f64 {
    assert!(a >= 0.0 && b >= 0.0, "coefficients must be nonnegative");
    let denom = a.sqrt() + b;
    assert!(denom > 0.0, "a and b cannot both be zero");
    1.0 / denom
}

/// Lyapunov value `Ψ = max(f_gap, 0) + (γ/θ)·G`.
///
/// `f_gap` uses an estimated `f(x*)` and may dip slightly negative near the
/// optimum; the clamp keeps Ψ nonnegative. Per-step decrease tests work with
/// the unclamped gap, reconstructed from the raw `f` and `G` trace columns.
pub fn lyapunov(f_gap: f64, g: f64, gamma: f64, theta: f64) -> f64 {
    assert!(gamma > 0.0 && theta > 0.0 && theta <= 1.0);
    assert!(g >= 0.0, "estimate error must be nonnegative");
    f_gap.max(0.0) + (gamma / theta) * g
}

/// Contraction and noise constants for compressing a noisy input.
///
/// When a compressor in `B(α)` is applied to `x + ξ` with `ξ` zero-mean,
/// independent of the compressor, and `E‖ξ‖² ≤ σ²`, the compression acts on
/// `x` like a weaker compressor with an additive variance floor:
/// `E‖C(x+ξ) − x‖² ≤ (1−α')‖x‖² + σ'²` where `1−α' = (1−α)(1+s)` and
/// `σ'² = ((1−α)(1+s) + 1 + 1/s)·σ²`.
#[derive(Debug, Clone, Copy)]
pub struct NoisyContraction {
    pub alpha: f64,
    pub noise_floor: f64,
}

/// Constants of the noisy-compression bound for a given splitting `s > 0`.
pub fn noisy_contraction(alpha: f64, s: f64, sigma_sq: f64) -> NoisyContraction {
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0,1]");
    assert!(s > 0.0, "s must be positive");
    assert!(sigma_sq >= 0.0, "variance must be nonnegative");
    let shrink = (1.0 - alpha) * (1.0 + s);
    NoisyContraction {
        alpha: 1.0 - shrink,
        noise_floor: (shrink + 1.0 + 1.0 / s) * sigma_sq,
    }
}

/// All constants derived from `(α, L, L̃, μ)` in one place.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TheoryConstants {
    pub alpha: f64,
    pub s_star: f64,
    pub theta: f64,
    pub beta: f64,
    pub ratio: f64,
    pub l: f64,
    pub l_tilde: f64,
    pub mu: Option<f64>,
    pub gamma_nonconvex: f64,
    pub gamma_pl: Option<f64>,
}

impl TheoryConstants {
    pub fn new(alpha: f64, l: f64, l_tilde: f64, mu: Option<f64>) -> Self {
        let oc = optimal_s(alpha);
        let gamma_pl = mu.map(|m| stepsize_pl(l, l_tilde, alpha, m));
        // The PL stepsize satisfies gamma * mu <= theta/2 <= 1/2 by
        // construction; keep that invariant loud.
        if let (Some(m), Some(g)) = (mu, gamma_pl) {
            debug_assert!(g * m <= oc.theta / 2.0 + 1e-15);
        }
        Self {
            alpha,
            s_star: oc.s_star,
            theta: oc.theta,
            beta: oc.beta,
            ratio: oc.ratio,
            l,
            l_tilde,
            mu,
            gamma_nonconvex: stepsize_nonconvex(l, l_tilde, alpha),
            gamma_pl,
        }
    }
}
