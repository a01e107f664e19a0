//! Open-ended co-evolution of voxel terrains and soft-robot walkers.
//!
//! Environments are produced either by a text-completion model speaking the
//! `H`/`S`/`-` grid language or by a CPPN baseline; agents learn locomotion
//! with PPO inside a deterministic mass-spring world, and the outer loop
//! optimizes, transfers and reproduces (environment, agent) niches.

pub mod cppn;
pub mod generators;
pub mod grid;
pub mod llm;
pub mod real;
pub mod rng;
pub mod sim;

pub use real::Real;

/// Scalar used by the shipped binaries and type aliases.
pub type Scalar = f64;
