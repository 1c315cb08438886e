//! GP-augmented model predictive control for an agile quadrotor.
//!
//! The crate couples a nominal rigid-body quadrotor model with
//! one-dimensional Gaussian-process models of the residual acceleration
//! the nominal model misses (rotor drag, in the bundled simulator). The
//! residuals are learned from closed-loop flight data and injected into
//! a real-time-iteration SQP tracking controller in one of three ways:
//!
//! * `nominal` - no correction,
//! * `precomputed` - first horizon node corrected online from the
//!   current measurement, remaining nodes from a schedule evaluated
//!   along the reference trajectory ahead of time,
//! * `direct` - the GP mean evaluated inside the optimization at every
//!   node of every iteration, with its sensitivity in the linearization.
//!
//! `sim` closes the loop around a drag-augmented plant with sensor
//! noise and produces the tracking-error and solve-time comparisons.

pub mod error;
pub mod gp;
pub mod mpc;
pub mod quad;
pub mod pipeline;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
