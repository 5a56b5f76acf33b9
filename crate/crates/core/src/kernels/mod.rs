//! Scale-space kernel algebra: the cutoff, cut-off Green's functions,
//! exponential kernels, the operators `(1 + mu d/dt)^N`, causal grid
//! convolution and Hölder–Besov estimators.

mod cutoff;
mod discrete;
mod grid;
mod ops;

pub use cutoff::*;
pub use discrete::{discretize, CausalKernel, Interp};
pub use grid::{GridFunction, TimeGrid};
pub use ops::*;
