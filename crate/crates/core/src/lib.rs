//! Numerics for `du = V(u) dW` driven by fractional Brownian motion, solved
//! through a truncated scale flow of tree-indexed force coefficients.
//!
//! The crate is `no_std` (with `alloc`); file formats and the command line
//! live in the companion `flowrde` crate.
#![no_std]
extern crate alloc;

pub mod differentials;
pub mod error;
pub mod flow;
pub mod kernels;
pub mod noise;
pub mod quad;
pub mod solver;
pub mod trees;
pub mod verify;

pub use error::Error;
