//! Matrix-analytic toolkit for discrete-time level-dependent quasi-birth-death
//! (QBD) chains with infinitely many levels.
//!
//! The crate computes the R-, G- and U-measures and the UL-type
//! RG-factorization of a block-tridiagonal chain, solves the censored and
//! block matrix Poisson equations through the factorization, and derives the
//! mean and variance of first-passage and mixing times. Every analytic
//! quantity can be cross-checked against a dense truncated-chain solver and a
//! seeded Monte Carlo simulator in [`oracle`].
//!
//! A chain is described by a finite inhomogeneous prefix of levels plus a
//! level-independent tail ([`model::QbdModel`]); all infinite sums are
//! windowed with explicit truncation metadata.

pub mod blocks;
pub mod error;
pub mod factorization;
pub(crate) mod linalg;
pub mod mixing;
pub mod model;
pub mod oracle;
pub mod poisson;
pub mod stationary;

pub use error::{QbdError, Result};
