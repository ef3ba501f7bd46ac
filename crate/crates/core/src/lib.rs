//! Retarded N-body dynamics of finite-size charged particles.
//!
//! Layers, bottom-up: [`minkowski`] algebra, per-particle [`worldline`]
//! histories, causal delay roots in [`retardation`], Faraday tensors in
//! [`fields`], the method-of-steps integrator in [`dynamics`], the Hamiltonian
//! and Poisson-bracket layer in [`canonical`], and the CLI plus the
//! discretized-action oracle in [`harness`].

pub mod minkowski;
pub mod worldline;
pub mod retardation;
pub mod fields;
pub mod dynamics;
pub mod canonical;
pub mod harness;
