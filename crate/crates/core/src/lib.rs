//! Macroscopic highway traffic model with platoon speed control: cell
//! transmission dynamics, numerical linearization, LQR-based controllers,
//! PI and MPC baselines, and a closed-loop simulation runner.

// Negated comparisons reject NaN parameters.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod ctm;
pub mod error;
pub mod linearization;
pub mod lqr;
pub mod optim;
pub mod sim;

pub use error::{Error, Result};
