//! Robust shrinking-horizon model-predictive control for landing a
//! helicopter on a moving ship deck.
//!
//! The library is organized bottom-up:
//!
//! - [`qp`]: dense convex quadratic programming (dual active-set).
//! - [`sets`]: polytope and zonotope calculus, invariant-set computation.
//! - [`model`]: the planning model — translational dynamics with a
//!   second-order attitude reference filter, thrust/attitude transforms.
//! - [`observer`]: disturbance observer and ancillary feedback.
//! - [`terminal`]: touchdown controller and terminal-set recursion.
//! - [`shmpc`]: the shrinking-horizon controller with move blocking.
//! - [`sim`]: closed-loop plant simulation and maneuver evaluation.

pub mod model;
pub mod observer;
pub mod qp;
pub mod terminal;
pub mod sets;
pub mod shmpc;
pub mod cli;
pub mod sim;
