//! LibSVM ingestion and heterogeneous client partitioning.
//!
//! Datasets load from LibSVM text (`<label> <idx>:<val> ...`, 1-based
//! indices, optional `#` comment at line end) into an immutable sparse
//! row-major matrix. Binary label sets `{0,1}` and `{1,2}` are remapped to
//! `{−1,+1}`; `{−1,+1}` passes through.
//!
//! Partitioning is deterministic and contiguous in file order — no shuffling
//! — which preserves whatever heterogeneity the file order carries. With `n`
//! shards, the first `n−1` take `⌊N/n⌋` rows each and the last absorbs the
//! remainder.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

pub mod fixtures;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty dataset")]
    Empty,
    #[error(
        "unsupported label set {0:?}: expected binary labels in {{-1,+1}}, {{0,1}} or {{1,2}}"
    )]
    UnsupportedLabels(Vec<f64>),
    #[error("cannot split {rows} rows into {n} shards")]
    BadPartition { rows: usize, n: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major sparse matrix in CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, value)` pair lists. Pair order within a
    /// row is preserved.
    pub fn from_rows(rows: &[Vec<(u32, f64)>], cols: usize) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(j, v) in row {
                debug_assert!((j as usize) < cols);
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(columns, values)` of row `i`.
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let lo = self.indptr[i];
        let hi = self.indptr[i + 1];
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    /// Inner product of row `i` with a dense vector.
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.cols);
        let (idx, val) = self.row(i);
        let mut acc = 0.0;
        for t in 0..idx.len() {
            acc += val[t] * x[idx[t] as usize];
        }
        acc
    }

    /// `acc += coef * row_i`.
    pub fn add_row_scaled(&self, i: usize, coef: f64, acc: &mut [f64]) {
        debug_assert_eq!(acc.len(), self.cols);
        let (idx, val) = self.row(i);
        for t in 0..idx.len() {
            acc[idx[t] as usize] += coef * val[t];
        }
    }

    /// `AᵀA·v` in a single pass over the rows.
    pub fn gram_matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let t = self.row_dot(i, v);
            self.add_row_scaled(i, t, &mut out);
        }
        out
    }

    /// Copy of a contiguous row range as its own matrix.
    pub fn slice_rows(&self, range: Range<usize>) -> SparseMatrix {
        let lo = self.indptr[range.start];
        let hi = self.indptr[range.end];
        let mut indptr: Vec<usize> = self.indptr[range.start..=range.end]
            .iter()
            .map(|p| p - lo)
            .collect();
        // Keep indptr length = rows + 1 even for empty slices.
        if indptr.is_empty() {
            indptr.push(0);
        }
        SparseMatrix {
            rows: range.len(),
            cols: self.cols,
            indptr,
            indices: self.indices[lo..hi].to_vec(),
            values: self.values[lo..hi].to_vec(),
        }
    }
}

/// An immutable labeled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: SparseMatrix,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn num_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Contiguous, disjoint, ordered shards covering `[0, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    shards: Vec<Range<usize>>,
}

impl Partition {
    pub fn shards(&self) -> &[Range<usize>] {
        &self.shards
    }

    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }
}

/// Splits `n_rows` rows into `n` contiguous shards in file order: the first
/// `n−1` of size `⌊N/n⌋`, the last of size `N − (n−1)⌊N/n⌋`.
pub fn partition(n_rows: usize, n: usize) -> Result<Partition, DataError> {
    if n == 0 || n > n_rows {
        return Err(DataError::BadPartition { rows: n_rows, n });
    }
    let quota = n_rows / n;
    let mut shards = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let end = if i + 1 == n { n_rows } else { start + quota };
        shards.push(start..end);
        start = end;
    }
    Ok(Partition { shards })
}

/// Parses LibSVM text. `d` is taken as the largest feature index observed.
pub fn parse_libsvm(text: &str, name: &str) -> Result<Dataset, DataError> {
    parse_libsvm_with_dim(text, name, None)
}

/// Parses LibSVM text with an optional fixed dimension (needed when a file
/// subset drops trailing features).
pub fn parse_libsvm_with_dim(
    text: &str,
    name: &str,
    dim_override: Option<usize>,
) -> Result<Dataset, DataError> {
    let mut raw_labels: Vec<f64> = Vec::new();
    let mut rows: Vec<Vec<(u32, f64)>> = Vec::new();
    let mut max_index: Option<u32> = None;

    for (lineno0, raw_line) in text.lines().enumerate() {
        let line_no = lineno0 + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().unwrap();
        let label: f64 = label_tok.parse().map_err(|_| DataError::Parse {
            line: line_no,
            msg: format!("invalid label {label_tok:?}"),
        })?;
        let mut row = Vec::new();
        for tok in tokens {
            let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| DataError::Parse {
                line: line_no,
                msg: format!("expected index:value, got {tok:?}"),
            })?;
            let idx: u32 = idx_s.parse().map_err(|_| DataError::Parse {
                line: line_no,
                msg: format!("invalid feature index {idx_s:?}"),
            })?;
            if idx == 0 {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: "feature indices are 1-based".into(),
                });
            }
            let val: f64 = val_s.parse().map_err(|_| DataError::Parse {
                line: line_no,
                msg: format!("invalid feature value {val_s:?}"),
            })?;
            let zero_based = idx - 1;
            max_index = Some(max_index.map_or(zero_based, |m| m.max(zero_based)));
            row.push((zero_based, val));
        }
        raw_labels.push(label);
        rows.push(row);
    }

    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let observed = max_index.map(|m| m as usize + 1).unwrap_or(0);
    let cols = match dim_override {
        Some(d) => {
            if observed > d {
                return Err(DataError::Parse {
                    line: 0,
                    msg: format!("feature index {observed} exceeds configured dimension {d}"),
                });
            }
            d
        }
        None if observed == 0 => return Err(DataError::Empty),
        None => observed,
    };

    let labels = remap_labels(raw_labels)?;
    Ok(Dataset {
        name: name.to_string(),
        features: SparseMatrix::from_rows(&rows, cols),
        labels,
    })
}

/// Reads and parses a LibSVM file.
pub fn load_libsvm(path: &Path, dim_override: Option<usize>) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    parse_libsvm_with_dim(&text, name, dim_override)
}

// Maps binary label conventions onto {-1,+1}.
fn remap_labels(raw: Vec<f64>) -> Result<Vec<f64>, DataError> {
    let mut distinct: Vec<f64> = raw.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let is_subset = |allowed: &[f64]| distinct.iter().all(|v| allowed.contains(v));
    if is_subset(&[-1.0, 1.0]) {
        Ok(raw)
    } else if is_subset(&[0.0, 1.0]) {
        Ok(raw
            .into_iter()
            .map(|v| if v == 0.0 { -1.0 } else { 1.0 })
            .collect())
    } else if is_subset(&[1.0, 2.0]) {
        Ok(raw
            .into_iter()
            .map(|v| if v == 1.0 { -1.0 } else { 1.0 })
            .collect())
    } else {
        Err(DataError::UnsupportedLabels(distinct))
    }
}

/// Serializes a dataset back to LibSVM text. Values are written with 17
/// significant digits, so parse∘serialize preserves every `f64` bit-exactly.
pub fn write_libsvm(ds: &Dataset) -> String {
    let mut out = String::new();
    for i in 0..ds.num_samples() {
        write_f64(&mut out, ds.labels[i]);
        let (idx, val) = ds.features.row(i);
        for t in 0..idx.len() {
            let _ = write!(out, " {}:", idx[t] + 1);
            write_f64(&mut out, val[t]);
        }
        out.push('\n');
    }
    out
}

fn write_f64(out: &mut String, v: f64) {
    // Integral values print as integers; -0.0 must keep its sign bit.
    if v == v.trunc() && v.abs() < 1e15 && !(v == 0.0 && v.is_sign_negative()) {
        let _ = write!(out, "{}", v as i64);
    } else {
        let _ = write!(out, "{:.16e}", v);
    }
}
