//! Monte Carlo laboratory for the Sine_β counting process.
//!
//! The phases α_{λ,t} of the stochastic sine equation are integrated for a
//! whole grid of ±λ under one shared Brownian path; the counting function,
//! its maximal deviation, the martingale brackets, Girsanov-tilted paths and
//! the Gaussian comparison field are computed from them.

pub mod engine;
pub mod gaussian;
pub mod model;
pub mod sde;
pub mod stats;
pub mod tilt;
mod trig;

pub use trig::sin_cos;
