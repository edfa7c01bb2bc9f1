//! Simulation and analysis of diffusion stochastic gradient descent over
//! multi-agent networks near strict saddle points.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod network;
pub mod noise;
pub mod problems;
pub mod quadrature;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
