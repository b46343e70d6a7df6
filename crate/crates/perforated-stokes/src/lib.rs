//! Stokes flow past many small spheres in a box, and its Brinkman limit.
//!
//! The crate builds the pieces needed to compare an N-hole Stokes velocity
//! field against the solution of the limiting Stokes-Brinkman problem and to
//! measure how the gap closes as N grows:
//!
//! - [`kernels`]: closed-form sphere solutions (exterior and annulus), their
//!   pressures, surface forces and dissipation integrals;
//! - [`cloud`]: particle-cloud generation under dilution constraints, the
//!   spacing certificate, and empirical density/flux measures;
//! - [`brinkman`]: a staggered-grid (MAC) Stokes-Brinkman solver on the cube
//!   with an Uzawa pressure-Schur outer iteration;
//! - [`nstokes`]: monopole mobility forces by the method of reflections, the
//!   superposed N-hole field, and its wall correction;
//! - [`metrics`]: L^p field distances, Hölder-dual (bounded-Lipschitz)
//!   distances and Wasserstein-1 via exact linear programming;
//! - [`study`]: the convergence-study harness, rate fits and report output.
//!
//! Start with the runnable examples (`cargo run --release --example
//! homogenization_study`) or the `perforated-stokes` CLI.

pub mod brinkman;
pub mod cloud;
pub mod error;
pub mod kernels;
pub mod lp;
pub mod metrics;
pub mod nstokes;
pub mod quadrature;
pub mod study;
pub mod vec3;

pub use error::{Error, Result};
pub use vec3::Vec3;
