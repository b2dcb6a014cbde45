//! Semi-asynchronous federated learning simulator with server-side
//! compensation of stale client updates.
//!
//! Stale updates are converted into estimates of their unstale counterparts
//! by inverting the client's local training: the server optimizes a small
//! synthetic dataset until a simulated local update on it reproduces the
//! received stale update, then retrains the current global model on it.

pub mod baselines;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod gi;
pub mod harness;
pub mod nn;
pub mod seed;
pub mod sim;
pub mod switch;

pub use error::{Error, Result};
