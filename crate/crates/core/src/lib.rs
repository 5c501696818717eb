//! Replicator-mutator dynamics as (r, s)-generalized Kalman-Bucy filtering.
//!
//! The crate covers the linear-Gaussian setting: 1-D density solvers for the
//! Crow-Kimura and Zakai equations, generalized moment equations, ensemble
//! filters with covariance inflation, closed-form asymptotics of the
//! misspecified filter and the Monte Carlo experiments that check them.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod densitypde;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod pathgen;
pub mod rng;
pub mod svg;
pub mod tempering;

pub use error::{Error, Result};
pub use model::{LinearGaussianModel, RsPair, ScalarParams, TimeGrid};
