//! Simulation and verification kernels for the join-the-shortest-of-L-queues
//! network: the finite-N Markov chain, its mean-field ODE limit, and the
//! Ornstein-Uhlenbeck fluctuation limit, plus the statistics used to compare
//! them.

pub mod ctmc;
pub mod error;
pub mod experiments;
pub mod export;
pub mod linop;
pub mod meanfield;
pub mod ou;
pub mod rng;
pub mod seqspace;
pub mod stats;
pub mod verify;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
