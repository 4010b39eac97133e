//! Damping optimization toolkit for vibrating systems `M q̈ + C(v) q̇ + K q = 0`.
//!
//! The damping matrix is internal damping plus a few rank-one viscous dampers,
//! `C(v) = C_int + Σ v_j g_j g_jᵀ`. This crate provides:
//!
//! * an offline modal reduction that turns the associated quadratic eigenvalue
//!   problem into a short sequence of diagonal-plus-rank-one (DPR1) eigenvalue
//!   problems ([`modal`]),
//! * a fast eigensolver for DPR1 matrices in complex-symmetric form based on
//!   shifted Rayleigh quotient iteration with a dynamic step size ([`dpr1`]),
//! * the online quadratic-eigenvalue solver that peels the rank-one damper
//!   terms one at a time ([`qep`]),
//! * frequency-weighted objective and constraint functions with analytic
//!   gradients, for keeping eigenvalues out of resonant bands ([`objectives`]),
//! * a nonsmooth constrained optimizer (penalty BFGS with multi-start)
//!   ([`optimizer`]),
//! * a dense-linearization reference solver used for validation and
//!   benchmarking ([`oracle`]), and
//! * the batch harness behind the `dampkit` CLI ([`harness`]).

pub mod cache;
pub mod config;
pub mod dpr1;
pub mod error;
pub mod harness;
pub mod modal;
pub mod objectives;
pub mod optimizer;
pub mod oracle;
pub mod qep;
pub mod system;

pub use error::{DampkitError, Result};
pub use modal::ModalForm;
pub use system::{OscillatorSpec, SystemMatrices, Viscosities};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
