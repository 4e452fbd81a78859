//! Input-convex neural sequence models and the machinery around them.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithm:
//! a define-by-run reverse-mode autodiff engine over dense `f64` tensors,
//! the model zoo (IC-EoT, IC-LSTM, ICRNN, ICFNN and the unconstrained
//! EoT / LSTM baselines), Adam training with non-negativity projection,
//! numerical convexity probes, a resistance-capacitance building plant with
//! a time-of-use tariff, and a projected-gradient MPC controller that
//! optimises thermostat setpoints through a trained surrogate.
//!
//! File formats, configuration and the command-line driver live in the
//! `iceot` companion crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod building;
pub mod clock;
pub mod convexity;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod mpc;
pub mod nn;
pub mod param;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use param::{ParamSet, Parameter};
pub use tensor::Tensor;
