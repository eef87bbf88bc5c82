//! Reciprocal beyond-diagonal RIS scattering matrix design.
//!
//! The crate models a BD-RIS-aided multi-user MISO downlink and designs the
//! block-diagonal, symmetric, unitary scattering matrix that maximizes the
//! users' sum-rate. Optimization runs on the product of unitary groups with a
//! symmetry penalty, using Riemannian conjugate-gradient ascent with Armijo
//! backtracking; a final symmetric-unitary projection restores reciprocity.
//!
//! Module map:
//!
//! - [`model`]: dimensions, channels, beamformers, scattering matrices, SINR
//!   and sum-rate evaluation.
//! - [`channel`]: reproducible synthetic Rayleigh channels and the on-disk
//!   container format.
//! - [`manifold`]: tangent projection, QR retraction and the
//!   symmetric/unitary projections.
//! - [`gradient`]: closed-form Euclidean gradients and a finite-difference
//!   oracle.
//! - [`optimizer`]: the conjugate-gradient ascent loop.
//! - [`experiments`]: baselines, Monte Carlo sweeps and plan files.

pub mod block;
pub mod channel;
pub mod container;
pub mod error;
pub mod experiments;
pub mod gradient;
pub mod manifold;
pub mod model;
pub mod optimizer;
pub mod rng;

pub use block::BlockDiagonal;
pub use error::{Error, Result};
pub use model::{
    Architecture, Beamformer, ChannelSet, GroupView, Problem, ScatteringMatrix, SystemDims,
};

/// Complex double used throughout.
pub type C64 = num_complex::Complex<f64>;

/// Dense, column-major complex matrix.
pub type CMatrix = nalgebra::DMatrix<C64>;

/// Converts a power in dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Converts a power ratio in dB to a linear factor.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}
