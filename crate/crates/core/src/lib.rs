//! Sparse factored approximations of positive-semidefinite matrices.
//!
//! Partial pivoted Cholesky and Vecchia (sparse inverse Cholesky)
//! approximations built from an entry oracle, plus a hybrid that combines
//! them. The results serve as preconditioners for conjugate gradient and
//! as the base of log-determinant estimates.
//!
//! ```
//! use pcvecchia::{kernels, partial_cholesky, sparsity, vecchia, solvers};
//!
//! let data = kernels::synthetic_clusters(200, 3, 4, 0.3, 7);
//! let oracle = kernels::KernelOracle::new(&data, kernels::KernelSpec::rbf(1e-3).unwrap());
//! let chooser = partial_cholesky::PivotChooser::rpc(1);
//! let (order, partial) = partial_cholesky::choose_pivots(&oracle, &chooser, 14);
//! let q = sparsity::SparsityChooser::nn(3);
//! let pattern = sparsity::choose_pattern(&oracle, &partial, &q);
//! let factor = vecchia::build_hybrid_from_partial(&oracle, &partial, &pattern);
//! let b = vec![1.0; 200];
//! let trace = solvers::pcg(
//!     |v: &[f64]| pcvecchia::oracle::dense_matvec(&oracle, v),
//!     &factor,
//!     &b,
//!     &solvers::PcgOptions::default(),
//! )
//! .unwrap();
//! assert!(trace.converged());
//! # let _ = order;
//! ```

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod comparators;
pub mod error;
pub mod factor;
pub mod format;
pub mod kaporin;
pub mod kernels;
pub mod linalg;
pub mod oracle;
pub mod partial_cholesky;
pub mod solvers;
pub mod sparsity;
pub mod vecchia;
pub mod verify;

pub use error::{Error, Result};
pub use factor::{PartialCholeskyFactor, Preconditioner, VecchiaFactor};
pub use linalg::DenseSym;
pub use oracle::{CountingOracle, EntryOracle, PivotOrder, SparsityPattern};
