//! Multiscale finite elements for elliptic problems with rough coefficients.
//!
//! The crate builds nested criss-cross triangulations of the unit square,
//! computes a P1 fine-scale reference, solves localized corrector problems
//! with three oversampling strategies (two classical ones and a constrained
//! one posed in the kernel of a Clément-type quasi-interpolation), and
//! assembles the resulting coarse-scale systems.

pub mod analysis;
pub mod config;
pub mod correctors;
pub mod dump;
pub mod error;
pub mod fem;
pub mod interpolation;
pub mod linalg;
pub mod mesh;
pub mod msfem;
pub mod patches;
pub mod problem;
pub mod setup;
pub mod study;

pub use error::{Error, Result};
