//! Recovery of column-wise sparse matrices from lifted structured linear
//! observations.
//!
//! A sparse signal whose atoms each undergo an unknown diagonal modulation
//! (constrained to a known low-dimensional subspace) can be lifted into a
//! column-sparse matrix recovery problem and solved with an l2,1-regularized
//! least-squares program (group lasso). This crate provides:
//!
//! * [`lifted_op`] — the structured forward/adjoint operators (dense
//!   dictionary and FFT-based imaging variants);
//! * [`solver`] — accelerated proximal-gradient and Barzilai-Borwein
//!   spectral solvers with first-order optimality checks;
//! * [`theory`] — coherence/sample-complexity/regularization bound
//!   calculators, the primal-dual witness certificate, and Monte-Carlo
//!   validation of the quadratic Gaussian tail bounds;
//! * [`synth`] — seeded random problem instances and support/error metrics;
//! * [`experiments`] — phase-transition and error-scaling grids with CSV and
//!   plot reporting;
//! * [`smi`] — the single-molecule-imaging super-resolution pipeline on
//!   synthetic frame stacks;
//! * [`io`] / [`config`] — the FSTACK frame-stack text format, the binary
//!   instance container, PGM output, and `key = value` config parsing.

pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod lifted_op;
pub mod smi;
pub mod solver;
pub mod synth;
pub mod theory;

pub use error::{Error, Result};
pub use lifted_op::{CMat, CVec, LiftedOperator, MatrixFreeOp};
