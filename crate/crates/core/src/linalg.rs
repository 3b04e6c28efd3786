//! Dense-vector helpers with a fixed reduction order.
//!
//! Every sum here accumulates sequentially in index order. Worker aggregates
//! are averaged in ascending worker order. This pins the floating-point
//! result bit-for-bit, which the reproducibility guarantees rely on.

/// Squared Euclidean norm.
pub fn sq_norm(x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in x {
        acc += v * v;
    }
    acc
}

/// Inner product. Panics on length mismatch.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Squared Euclidean distance between two vectors.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "sq_dist: length mismatch");
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// Componentwise `a - b` as a new vector.
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "sub: length mismatch");
    (0..a.len()).map(|i| a[i] - b[i]).collect()
}

/// `acc += x`, componentwise.
pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    assert_eq!(acc.len(), x.len(), "add_assign: length mismatch");
    for i in 0..acc.len() {
        acc[i] += x[i];
    }
}

/// Average of `n` equal-length vectors, accumulated in ascending index order
/// and divided by `n` at the end.
pub fn average(vectors: &[Vec<f64>]) -> Vec<f64> {
    assert!(!vectors.is_empty(), "average: no vectors");
    let d = vectors[0].len();
    let mut acc = vec![0.0; d];
    for v in vectors {
        add_assign(&mut acc, v);
    }
    let n = vectors.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    acc
}

/// True when every component is finite.
pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Max-norm of the componentwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_abs_diff: length mismatch");
    let mut m = 0.0f64;
    for i in 0..a.len() {
        m = m.max((a[i] - b[i]).abs());
    }
    m
}
