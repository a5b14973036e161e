//! Tube-based stochastic nonlinear model predictive control.
//!
//! The crate covers the offline side (incremental Lyapunov function checks,
//! constraint tightening constants, probabilistic disturbance bounds), the
//! online optimal control problem with augmented tube dynamics solved by a
//! dense SQP method, and a closed-loop Monte Carlo simulator with statistical
//! verifiers.

// `!(x >= 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod cli;
pub mod config;
pub mod disturbance;
pub mod error;
pub mod ilf;
pub mod linalg;
pub mod model;
pub mod nlp;
pub mod ocp;
pub mod qp;
pub mod report;
pub mod sampling;
pub mod simulator;

pub use error::{Error, Result};
