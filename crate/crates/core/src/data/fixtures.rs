//! Seeded synthetic datasets.
//!
//! Every generator is deterministic (fixed internal ChaCha seeds), so the
//! test and acceptance suites run without any external files. Content
//! digests are pinned in the test module below; a digest change means a
//! generator changed and every frozen expectation downstream is suspect.
//!
//! The `*_like` generators mimic the shape of the corresponding LibSVM
//! datasets (row count, dimension, binary features) with per-client-block
//! distribution shift so a contiguous split produces genuinely heterogeneous
//! workers. They are stand-ins: when the real files are available they take
//! precedence (see the harness dataset resolution).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, SparseMatrix};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Least-squares fixture: d = 10, N = 50 (5 clients x 10 rows), dense
/// Gaussian features and targets.
pub fn ls_small() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5f5_0001);
    let n = 50usize;
    let d = 10usize;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<(u32, f64)> = (0..d as u32).map(|j| (j, normal(&mut rng))).collect();
        rows.push(row);
        labels.push(normal(&mut rng));
    }
    Dataset {
        name: "synthetic-ls-small".into(),
        features: SparseMatrix::from_rows(&rows, d),
        labels,
    }
}

/// Binary-feature logistic stand-in shaped like `mushrooms`:
/// N = 8120, d = 112 (20 clients x 406 rows).
pub fn mushrooms_like() -> Dataset {
    heterogeneous_binary("synthetic-mushrooms", 0x6d75_7368, 8120, 112, 20, 20)
}

/// Binary-feature logistic stand-in shaped like a 2000-row subsample of
/// `a9a`: N = 2000, d = 123 (20 clients x 100 rows).
pub fn a9a_subsample() -> Dataset {
    heterogeneous_binary("synthetic-a9a-sub2000", 0xa9a_2000, 2000, 123, 20, 14)
}

// Generates block-structured binary data. Each of `blocks` contiguous row
// blocks draws its active features from a block-specific preference
// permutation and labels rows through a block-perturbed linear teacher, so
// contiguous shards differ in both feature support and label rule.
fn heterogeneous_binary(
    name: &str,
    seed: u64,
    n: usize,
    d: usize,
    blocks: usize,
    avg_active: usize,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (avg_active as f64).sqrt();
    let teacher: Vec<f64> = (0..d).map(|_| normal(&mut rng) * scale).collect();

    let rows_per_block = n / blocks;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for b in 0..blocks {
        // Block-level preference: a permutation of feature indices; rows pick
        // mostly from its head.
        let mut pref: Vec<u32> = (0..d as u32).collect();
        for i in (1..d).rev() {
            let j = rng.random_range(0..=i);
            pref.swap(i, j);
        }
        let local: Vec<f64> = (0..d)
            .map(|j| teacher[j] + normal(&mut rng) * 0.8 * scale)
            .collect();
        let block_rows = if b + 1 == blocks {
            n - rows_per_block * (blocks - 1)
        } else {
            rows_per_block
        };
        for _ in 0..block_rows {
            let active = 4 + rng.random_range(0..(2 * avg_active - 4).max(1));
            let mut picked = vec![false; d];
            let mut row: Vec<(u32, f64)> = Vec::with_capacity(active);
            for _ in 0..active {
                let j = if rng.random::<f64>() < 0.8 {
                    pref[rng.random_range(0..(d / 3).max(1))]
                } else {
                    rng.random_range(0..d as u32)
                };
                if !picked[j as usize] {
                    picked[j as usize] = true;
                    row.push((j, 1.0));
                }
            }
            row.sort_unstable_by_key(|&(j, _)| j);
            let mut z = 0.0;
            for &(j, v) in &row {
                z += v * local[j as usize];
            }
            z += normal(&mut rng) * 0.3;
            labels.push(if z >= 0.0 { 1.0 } else { -1.0 });
            rows.push(row);
        }
    }
    Dataset {
        name: name.into(),
        features: SparseMatrix::from_rows(&rows, d),
        labels,
    }
}

// Three-client least-squares instance generator used to hunt for DCGD
// counterexamples: each client holds two Gaussian rows in R^3.
fn small_three_client_ls(name: &str, seed: u64, spread: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 3usize;
    let mut rows = Vec::with_capacity(6);
    let mut labels = Vec::with_capacity(6);
    for c in 0..3usize {
        // Per-client direction bias makes the shards pull in conflicting
        // directions, which is what defeats memoryless compression.
        let bias: Vec<f64> = (0..d).map(|j| if j == c { spread } else { 1.0 }).collect();
        for _ in 0..2 {
            let row: Vec<(u32, f64)> = (0..d as u32)
                .map(|j| (j, normal(&mut rng) * bias[j as usize]))
                .collect();
            rows.push(row);
            labels.push(normal(&mut rng) * spread);
        }
    }
    Dataset {
        name: name.into(),
        features: SparseMatrix::from_rows(&rows, d),
        labels,
    }
}

// Seed-scan entry point (see the ignored scan test in the methods module).
#[doc(hidden)]
pub fn three_client_ls_candidate(seed: u64, spread: f64) -> Dataset {
    small_three_client_ls("dcgd-candidate", seed, spread)
}

/// Frozen 3-client least-squares instance on which Top-1 DCGD stalls at a
/// nonzero gradient floor while EF21 at the same stepsize drives the
/// gradient below 1e-10. Found by a seed scan over small three-client
/// candidates; see the ignored scan test in the methods module.
pub fn dcgd_stall() -> Dataset {
    small_three_client_ls("dcgd-stall-ls", DCGD_STALL_SEED, 3.0)
}

/// 3-client least-squares instance on which Top-1 DCGD diverges
/// exponentially at any positive stepsize.
///
/// Each client holds one row of a circulant-like design; from the origin the
/// first step lands on the all-ones ray, where every client's Top-1 keeps
/// its dominant coordinate and the averaged update multiplies the residual
/// by (1 + 2γ) each round. The objective still has a finite minimizer, so
/// this is a well-posed problem that the memoryless method cannot solve.
pub fn dcgd_divergence() -> Dataset {
    let rows: Vec<Vec<(u32, f64)>> = vec![
        vec![(0, -3.0), (1, 2.0), (2, 2.0)],
        vec![(0, 2.0), (1, -3.0), (2, 2.0)],
        vec![(0, 2.0), (1, 2.0), (2, -3.0)],
    ];
    Dataset {
        name: "dcgd-diverge-ls".into(),
        features: SparseMatrix::from_rows(&rows, 3),
        labels: vec![1.0, 1.0, 1.0],
    }
}

// Frozen scan result. Changing this invalidates the fixture-dependent
// expectations in methods/harness tests.
pub(crate) const DCGD_STALL_SEED: u64 = 41;
