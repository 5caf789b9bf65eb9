//! Core library for robust subspace tracking.
//!
//! The pipeline splits a stream `y_t = l_t + x_t + v_t` into a slowly
//! rotating low-rank part `l_t`, sparse outliers `x_t`, and bounded noise.
//! Modules:
//!
//! - [`linalg`]: orthonormal bases, principal-angle distances, truncated SVD.
//! - [`sparse`]: projected compressive sensing (l1 recovery, support
//!   estimation, least-squares debiasing).
//! - [`tracker`]: the online tracker, its variants, smoothing, checkpoints.
//! - [`datagen`]: synthetic scenes with ground truth.
//! - [`sddn`]: batch PCA under sparse data-dependent noise.
//! - [`rng`]: seed derivation for reproducible experiment streams.

pub mod datagen;
pub mod linalg;
pub mod rng;
pub mod sddn;
pub mod sparse;
pub mod tracker;

// Public API types use nalgebra vectors and matrices; re-export so
// downstream crates build against the same version.
pub use nalgebra;

/// Crate version, for run manifests.
pub fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}
