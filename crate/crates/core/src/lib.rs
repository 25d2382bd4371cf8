//! Matrix-level laboratory for spectrum modulation adapters (SMoA).
//!
//! An SMoA update reorders a frozen weight `W0` by its singular structure,
//! attaches a rank-`ρ` Hadamard-modulated branch to each of `K` diagonal
//! blocks, and scatters the block-diagonal result back to the original
//! coordinates. This crate builds those updates, measures their rank against
//! the analytic ceiling, constructs witness targets that separate SMoA from
//! rank-`r` LoRA, fits both families by gradient descent, and runs
//! Marchenko–Pastur style spectral diagnostics.

pub mod adapters;
pub mod capacity;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod matrix;
pub mod preprocess;
pub mod random;
pub mod spectrum;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::{block_diagonal, Interval, Matrix, Permutation};
