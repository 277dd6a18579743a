//! Mesh-free Gross-Pitaevskii ground states.
//!
//! The ground state of the Gross-Pitaevskii energy on a box `(-L, L)^d` with
//! Dirichlet conditions is computed as the minimizer over probability
//! densities `rho = u^2`, where `rho` is represented as the push-forward of a
//! fixed reference density through a boundary-preserving neural-ODE transport
//! map. Descent happens in the map's parameter space: the Wasserstein metric
//! pulls back to a Gram matrix of parameter Jacobians, and each step solves a
//! Tikhonov-regularized system by conjugate gradients (natural gradient
//! descent). Everything is particle-based; no spatial mesh is involved.
//!
//! A classical finite-difference Sobolev gradient flow ([`h1`]) serves as the
//! reference solver and as the consumer of warm starts reconstructed from the
//! trained map ([`reconstruct`]).
//!
//! The accompanying guide under `book/` walks through each piece; its code
//! snippets are compiled and run as doctests (see the `book` module below).

pub mod cli;
pub mod descent;
pub mod energy;
pub mod error;
pub mod h1;
pub mod metric;
pub mod net;
pub mod potentials;
pub mod reconstruct;
pub mod reference;
pub mod transport;

pub(crate) mod reduce;

pub use error::{Error, Result};

// The guide's code blocks double as doctests so the book cannot drift from
// the library. `cargo test --doc` runs them.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/energy.md")]
    mod energy {}
    #[doc = include_str!("../../../book/src/transport.md")]
    mod transport {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/metric.md")]
    mod metric {}
    #[doc = include_str!("../../../book/src/descent.md")]
    mod descent {}
    #[doc = include_str!("../../../book/src/reconstruction.md")]
    mod reconstruction {}
    #[doc = include_str!("../../../book/src/h1.md")]
    mod h1 {}
}
