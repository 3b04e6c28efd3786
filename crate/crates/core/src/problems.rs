//! Client objectives, smoothness constants and stochastic gradients.
//!
//! Two problem families over a feature shard `A ∈ R^{N×d}` with labels/targets
//! `y`:
//!
//! - logistic regression with a nonconvex regularizer
//!   `f(x) = (1/N) Σ log(1 + exp(−yⱼ aⱼᵀx)) + λ Σₖ xₖ²/(1+xₖ²)`,
//! - least squares `f(x) = (1/N) Σ (aⱼᵀx − yⱼ)²`.
//!
//! Both are nonnegative, so `0` is a valid global lower bound. Smoothness:
//! the logistic loss Hessian is bounded by `AᵀA/(4N)` and the regularizer's
//! by `2λ·I` (the second derivative of `x²/(1+x²)` is `(2−6x²)/(1+x²)³`,
//! peaking at `2` at the origin), giving `Lᵢ = λ_max(AᵀA)/(4N) + 2λ`; least
//! squares gives `Lᵢ = 2λ_max(AᵀA)/N`. The leading eigenvalue comes from
//! power iteration on the Gram operator, which never densifies the shard.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{partition, Dataset, SparseMatrix};
use crate::linalg::{add_assign, sq_norm};
use crate::par;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("client shard must hold at least one sample")]
    EmptyShard,
    #[error("labels/features disagree: {labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("logistic labels must lie in {{-1,+1}}, found {0}")]
    BadLabel(f64),
    #[error("batch size must satisfy 1 <= b <= {n}, got {got}")]
    BatchSize { n: usize, got: usize },
    #[error("PL constant is defined for least squares only")]
    MuUnsupported,
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Which objective a client minimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProblemKind {
    LogisticNonconvex { lambda: f64 },
    LeastSquares,
}

/// One worker's differentiable objective over its immutable data shard.
#[derive(Debug, Clone)]
pub struct ClientProblem {
    kind: ProblemKind,
    features: SparseMatrix,
    labels: Vec<f64>,
    smoothness: f64,
}

impl ClientProblem {
    pub fn new(
        kind: ProblemKind,
        features: SparseMatrix,
        labels: Vec<f64>,
    ) -> Result<Self, ProblemError> {
        if features.rows() == 0 {
            return Err(ProblemError::EmptyShard);
        }
        if labels.len() != features.rows() {
            return Err(ProblemError::LabelCount {
                labels: labels.len(),
                rows: features.rows(),
            });
        }
        if let ProblemKind::LogisticNonconvex { .. } = kind {
            for &y in &labels {
                if y != 1.0 && y != -1.0 {
                    return Err(ProblemError::BadLabel(y));
                }
            }
        }
        let n = features.rows() as f64;
        let lead = power_iteration(|v| features.gram_matvec(v), features.cols());
        let smoothness = match kind {
            ProblemKind::LogisticNonconvex { lambda } => lead / (4.0 * n) + 2.0 * lambda,
            ProblemKind::LeastSquares => 2.0 * lead / n,
        };
        Ok(Self {
            kind,
            features,
            labels,
            smoothness,
        })
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_samples(&self) -> usize {
        self.features.rows()
    }

    /// Smoothness bound `Lᵢ` on this client's objective, computed once.
    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    /// Objective value. Uses the `max(z,0) + log1p(exp(−|z|))` form of
    /// softplus, so huge margins do not overflow.
    pub fn value(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "value: dimension mismatch");
        let n = self.num_samples();
        match self.kind {
            ProblemKind::LogisticNonconvex { lambda } => {
                let mut loss = 0.0;
                for j in 0..n {
                    let z = -self.labels[j] * self.features.row_dot(j, x);
                    loss += softplus(z);
                }
                loss / n as f64 + lambda * regularizer(x)
            }
            ProblemKind::LeastSquares => {
                let mut loss = 0.0;
                for j in 0..n {
                    let r = self.features.row_dot(j, x) - self.labels[j];
                    loss += r * r;
                }
                loss / n as f64
            }
        }
    }

    /// Full gradient.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim(), "gradient: dimension mismatch");
        let n = self.num_samples();
        let mut g = vec![0.0; self.dim()];
        self.accumulate_loss_gradient(x, None, &mut g);
        match self.kind {
            ProblemKind::LogisticNonconvex { lambda } => {
                for v in &mut g {
                    *v /= n as f64;
                }
                add_regularizer_gradient(x, lambda, &mut g);
            }
            ProblemKind::LeastSquares => {
                for v in &mut g {
                    *v *= 2.0 / n as f64;
                }
            }
        }
        g
    }

    /// Minibatch gradient: the loss term is averaged over a uniformly random
    /// `batch_size`-subset drawn without replacement; the regularizer
    /// gradient stays exact (it has no per-sample structure). With
    /// `batch_size == N` this is exactly [`ClientProblem::gradient`] and the
    /// stream is left untouched.
    pub fn stochastic_gradient(
        &self,
        x: &[f64],
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, ProblemError> {
        let n = self.num_samples();
        if batch_size == 0 || batch_size > n {
            return Err(ProblemError::BatchSize { n, got: batch_size });
        }
        if batch_size == n {
            return Ok(self.gradient(x));
        }
        assert_eq!(
            x.len(),
            self.dim(),
            "stochastic_gradient: dimension mismatch"
        );
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..batch_size {
            let j = rng.random_range(i..n);
            pool.swap(i, j);
        }
        let mut batch = pool[..batch_size].to_vec();
        batch.sort_unstable();

        let mut g = vec![0.0; self.dim()];
        self.accumulate_loss_gradient(x, Some(&batch), &mut g);
        match self.kind {
            ProblemKind::LogisticNonconvex { lambda } => {
                for v in &mut g {
                    *v /= batch_size as f64;
                }
                add_regularizer_gradient(x, lambda, &mut g);
            }
            ProblemKind::LeastSquares => {
                for v in &mut g {
                    *v *= 2.0 / batch_size as f64;
                }
            }
        }
        Ok(g)
    }

    // Unnormalized loss-gradient accumulation over all rows or a batch.
    fn accumulate_loss_gradient(&self, x: &[f64], batch: Option<&[usize]>, acc: &mut [f64]) {
        let rows: Box<dyn Iterator<Item = usize>> = match batch {
            Some(b) => Box::new(b.iter().copied()),
            None => Box::new(0..self.num_samples()),
        };
        match self.kind {
            ProblemKind::LogisticNonconvex { .. } => {
                for j in rows {
                    let y = self.labels[j];
                    let z = y * self.features.row_dot(j, x);
                    // d/dz softplus(-z) = -sigmoid(-z)
                    let coef = -y * sigmoid(-z);
                    self.features.add_row_scaled(j, coef, acc);
                }
            }
            ProblemKind::LeastSquares => {
                for j in rows {
                    let r = self.features.row_dot(j, x) - self.labels[j];
                    self.features.add_row_scaled(j, r, acc);
                }
            }
        }
    }

    pub fn features(&self) -> &SparseMatrix {
        &self.features
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn regularizer(x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in x {
        let sq = v * v;
        acc += sq / (1.0 + sq);
    }
    acc
}

fn add_regularizer_gradient(x: &[f64], lambda: f64, acc: &mut [f64]) {
    for (k, &v) in x.iter().enumerate() {
        let denom = 1.0 + v * v;
        acc[k] += lambda * 2.0 * v / (denom * denom);
    }
}

/// Leading eigenvalue of a symmetric PSD operator by power iteration:
/// 200 iterations, early exit when the Rayleigh quotient settles to 1e-8
/// relative. Deterministic (fixed start vector).
pub fn power_iteration(apply: impl Fn(&[f64]) -> Vec<f64>, d: usize) -> f64 {
    const MAX_ITER: usize = 200;
    const TOL: f64 = 1e-8;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..MAX_ITER {
        let w = apply(&v);
        let norm = sq_norm(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let new_lambda = crate::linalg::dot(&v, &w);
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        if (new_lambda - lambda).abs() <= TOL * new_lambda.abs().max(1e-300) {
            return new_lambda;
        }
        lambda = new_lambda;
    }
    lambda
}

/// The finite-sum objective `f = (1/n) Σ fᵢ` over all clients, with its
/// derived constants.
#[derive(Debug, Clone)]
pub struct GlobalProblem {
    clients: Vec<ClientProblem>,
    kind: ProblemKind,
    l: f64,
    l_tilde: f64,
    f_inf: f64,
    f_star_estimate: Option<f64>,
    mu_estimate: Option<f64>,
}

impl GlobalProblem {
    pub fn new(clients: Vec<ClientProblem>) -> Result<Self, ProblemError> {
        if clients.is_empty() {
            return Err(ProblemError::EmptyShard);
        }
        let kind = clients[0].kind();
        let d = clients[0].dim();
        assert!(
            clients.iter().all(|c| c.dim() == d && c.kind() == kind),
            "clients must share dimension and problem kind"
        );
        // Smoothness of the average objective, from the averaged Gram
        // operator (1/n) sum_i A_i^T A_i / N_i.
        let n = clients.len();
        let lead = power_iteration(
            |v| {
                let mut acc = vec![0.0; d];
                for c in &clients {
                    let mut gv = c.features().gram_matvec(v);
                    let scale = 1.0 / c.num_samples() as f64;
                    for t in &mut gv {
                        *t *= scale;
                    }
                    add_assign(&mut acc, &gv);
                }
                for t in &mut acc {
                    *t /= n as f64;
                }
                acc
            },
            d,
        );
        let l = match kind {
            ProblemKind::LogisticNonconvex { lambda } => lead / 4.0 + 2.0 * lambda,
            ProblemKind::LeastSquares => 2.0 * lead,
        };
        let mut sq_sum = 0.0;
        for c in &clients {
            sq_sum += c.smoothness() * c.smoothness();
        }
        let l_tilde = (sq_sum / n as f64).sqrt();
        // Both objective families are nonnegative, so 0 lower-bounds f
        // without any circular dependence on an estimated optimum.
        Ok(Self {
            clients,
            kind,
            l,
            l_tilde,
            f_inf: 0.0,
            f_star_estimate: None,
            mu_estimate: None,
        })
    }

    /// Builds the global problem by splitting a dataset into `n_clients`
    /// contiguous shards.
    pub fn from_dataset(
        ds: &Dataset,
        kind: ProblemKind,
        n_clients: usize,
    ) -> Result<Self, ProblemError> {
        let part = partition(ds.num_samples(), n_clients)?;
        let mut clients = Vec::with_capacity(n_clients);
        for shard in part.shards() {
            clients.push(ClientProblem::new(
                kind,
                ds.features.slice_rows(shard.clone()),
                ds.labels[shard.clone()].to_vec(),
            )?);
        }
        Self::new(clients)
    }

    pub fn clients(&self) -> &[ClientProblem] {
        &self.clients
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.clients[0].dim()
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn smoothness(&self) -> f64 {
        self.l
    }

    /// Quadratic mean of the client smoothness constants.
    pub fn smoothness_quadratic_mean(&self) -> f64 {
        self.l_tilde
    }

    pub fn f_inf(&self) -> f64 {
        self.f_inf
    }

    pub fn f_star_estimate(&self) -> Option<f64> {
        self.f_star_estimate
    }

    pub fn mu_estimate(&self) -> Option<f64> {
        self.mu_estimate
    }

    /// `f(x) = (1/n) Σ fᵢ(x)`, client values summed in ascending order.
    pub fn value(&self, x: &[f64]) -> f64 {
        let vals = par::map_indexed(self.clients.len(), |i| self.clients[i].value(x));
        let mut acc = 0.0;
        for v in &vals {
            acc += v;
        }
        let f = acc / self.clients.len() as f64;
        // Opportunistic lower-bound check: both objective families are sums
        // of nonnegative terms.
        debug_assert!(
            f.is_nan() || f >= self.f_inf,
            "objective fell below its lower bound"
        );
        f
    }

    /// All client gradients at `x`, evaluated concurrently, returned in
    /// worker order.
    pub fn client_gradients(&self, x: &[f64]) -> Vec<Vec<f64>> {
        par::map_indexed(self.clients.len(), |i| self.clients[i].gradient(x))
    }

    /// `∇f(x)`, averaged in ascending worker order.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        crate::linalg::average(&self.client_gradients(x))
    }

    /// Estimates `f(x*)` by a long plain gradient-descent run: 1e5 iterations
    /// at `γ = 1/L` from the origin. The returned value upper-bounds the true
    /// optimum, which is the direction the Lyapunov per-step checks need.
    pub fn estimate_f_star(&self) -> f64 {
        const ITERS: usize = 100_000;
        let gamma = 1.0 / self.l;
        let mut x = vec![0.0; self.dim()];
        for _ in 0..ITERS {
            let g = self.gradient(&x);
            for j in 0..x.len() {
                x[j] -= gamma * g[j];
            }
        }
        self.value(&x)
    }

    /// PL constant for least squares: `μ = 2·λ⁺_min(AᵀA)/N` on the pooled
    /// rows, `λ⁺_min` the smallest nonzero eigenvalue (relative cutoff
    /// 1e-10·λ_max). Errors for logistic problems.
    pub fn estimate_mu(&self) -> Result<f64, ProblemError> {
        if !matches!(self.kind, ProblemKind::LeastSquares) {
            return Err(ProblemError::MuUnsupported);
        }
        let d = self.dim();
        let mut gram = DMatrix::<f64>::zeros(d, d);
        let mut total_rows = 0usize;
        for c in &self.clients {
            let m = c.features();
            for i in 0..m.rows() {
                let (idx, val) = m.row(i);
                for a in 0..idx.len() {
                    for b in 0..idx.len() {
                        gram[(idx[a] as usize, idx[b] as usize)] += val[a] * val[b];
                    }
                }
            }
            total_rows += m.rows();
        }
        gram /= total_rows as f64;
        let eigen = gram.symmetric_eigen();
        let lambda_max = eigen.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let cutoff = 1e-10 * lambda_max;
        let lambda_min_pos = eigen
            .eigenvalues
            .iter()
            .cloned()
            .filter(|&l| l > cutoff)
            .fold(f64::INFINITY, f64::min);
        Ok(2.0 * lambda_min_pos)
    }

    /// Fills `f_star_estimate` and (for least squares) `mu_estimate`.
    pub fn with_estimates(mut self) -> Result<Self, ProblemError> {
        self.f_star_estimate = Some(self.estimate_f_star());
        if matches!(self.kind, ProblemKind::LeastSquares) {
            self.mu_estimate = Some(self.estimate_mu()?);
        }
        Ok(self)
    }

    /// Overrides the estimates (useful in tests exercising the Lyapunov path
    /// without paying for the long GD run).
    pub fn set_estimates(&mut self, f_star: Option<f64>, mu: Option<f64>) {
        self.f_star_estimate = f_star;
        self.mu_estimate = mu;
    }
}

/// Deterministic helper stream for tests and estimators.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
