//! Structure-preserving integrators for nonholonomic mechanical systems and
//! regular optimal control problems.
//!
//! The crate is organized around three layers:
//!
//! * [`mechanics`] defines constrained mechanical systems (kinetic-minus-potential
//!   Lagrangians plus velocity constraints) and evaluates the continuous
//!   constrained dynamics with the Lagrange multipliers eliminated analytically.
//! * [`integrator`] implements the one-parameter family of discrete-action
//!   integrators for those systems, and [`control`] the symplectic stepper for
//!   regular optimal control problems obtained from a mixed-variable generating
//!   function.
//! * [`oracle`] provides high-accuracy reference machinery (RK4 flows, two-point
//!   shooting, action quadrature, force-work integrals) used to verify the
//!   structural identities the discrete schemes are built on.
//!
//! [`solvers`] holds the shared numerical kernels (damped Newton, finite-difference
//! Jacobians, dense solves, a symplecticity probe) and [`systems`] a small catalog
//! of built-in example systems.

pub mod control;
pub mod error;
pub mod integrator;
pub mod mechanics;
pub mod oracle;
pub mod solvers;
pub mod systems;

pub use error::{Error, Result};
