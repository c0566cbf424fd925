//! Intrinsic nonlinear filtering on manifolds.
//!
//! Connector and curvature algebra in local charts, third-order expansions of
//! the exponential map and Jacobi fields, exponential barycentres, conditional
//! moments of quadratically perturbed Gaussians, diffusion-induced geometry,
//! the single-observation intrinsic update, and a Monte Carlo oracle for
//! measuring convergence orders.

pub mod barycentre;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod filter;
pub mod gaussian_cond;
pub mod jacobi;
pub mod linalg;
pub mod manifold;
pub mod mc;
pub mod ode;

pub use error::{Error, Result};
