//! Inverse kinematics with conditional continuous normalizing flows.
//!
//! A learned vector field `h(z, x, t)` transports standard-normal latent
//! samples `z` to joint configurations `q` that reach the end-effector
//! targets `x`. The crate contains the kinematics used to generate data and
//! score solutions, the conditioned dynamics network with exact reverse-mode
//! products, ODE integrators with adjoint gradients, the flow model, an
//! online training loop, and batch/path IK front ends with a damped
//! least-squares baseline.

// `!(a >= b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cnf;
pub mod dynamics;
pub mod error;
pub mod iksolver;
pub mod kinematics;
pub mod odeint;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
