//! Potential-field solver for the solar corona.
//!
//! Solves the Laplace equation for the scalar potential on a nonuniform
//! logically-rectangular spherical grid, driven by a surface radial-field
//! map, and evaluates B = grad(Phi). The linear system is solved with
//! preconditioned conjugate gradients using either diagonal scaling or
//! non-overlapping block ILU0, optionally decomposed across in-process
//! workers that mirror a message-passing layout: point-to-point halo
//! exchanges for the stencil, collectives for inner products and the polar
//! boundary average.

pub mod cli;
pub mod error;
pub mod field;
pub mod io;
pub mod mesh;
pub mod operator;
pub mod parallel;
pub mod precond;
pub mod solver;
pub mod sparse;

pub use error::{Error, Result};
