//! Communication-compressed distributed gradient methods of the EF21 family.
//!
//! The crate simulates a master/worker setup where each worker holds a shard
//! of the training data and communicates compressed gradient information only.
//! It provides:
//!
//! - [`compressors`]: contractive compressors (Top-k, scaled Rand-k, scaled
//!   linear, identity) and the stateful Markov compressor they induce;
//! - [`theory`]: closed-form contraction constants, theoretical stepsizes and
//!   the Lyapunov function used to certify convergence;
//! - [`data`]: LibSVM ingestion, deterministic client partitioning and the
//!   seeded synthetic fixtures used by the test and acceptance suites;
//! - [`problems`]: client objectives (logistic regression with a nonconvex
//!   regularizer, least squares) with smoothness constants and stochastic
//!   gradient estimators;
//! - [`methods`]: the optimization loops (GD, DCGD, classical error feedback,
//!   EF21, EF21+, stochastic EF21) with per-round metric capture;
//! - [`oracles`]: independent verification machinery (finite differences,
//!   the EF/EF21 equivalence check, the Markov distortion experiment);
//! - [`harness`]: run configuration, stepsize sweeps, bit accounting and
//!   CSV/JSON trace emission.
//!
//! Per-worker computations inside a round run on rayon when the `parallel`
//! feature (default) is enabled and on plain iterators otherwise. Reductions
//! are always performed in worker-index order, so traces are bitwise
//! identical across both backends and across repeated runs.
//!
//! ```
//! use ef21_core::compressors::Compressor;
//! use ef21_core::data::fixtures;
//! use ef21_core::methods::{run_ef21, InitScheme};
//! use ef21_core::problems::{GlobalProblem, ProblemKind};
//! use ef21_core::theory::stepsize_nonconvex;
//!
//! let ds = fixtures::ls_small();
//! let gp = GlobalProblem::from_dataset(&ds, ProblemKind::LeastSquares, 5).unwrap();
//! let comp = Compressor::top_k(2, gp.dim()).unwrap();
//! let gamma =
//!     stepsize_nonconvex(gp.smoothness(), gp.smoothness_quadratic_mean(), comp.alpha());
//! let trace =
//!     run_ef21(&gp, &vec![0.0; gp.dim()], gamma, &comp, 50, 7, InitScheme::CompressG0)
//!         .unwrap();
//! assert_eq!(trace.records.len(), 51);
//! assert!(trace.records[50].grad_sq_norm < trace.records[0].grad_sq_norm);
//! ```

pub mod compressors;
pub mod data;
pub mod harness;
pub mod linalg;
pub mod methods;
pub mod oracles;
pub mod problems;
pub mod theory;

pub(crate) mod par;
