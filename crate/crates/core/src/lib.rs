//! Compressive-sensing recovery with an adaptive Markov random field
//! support prior.
//!
//! The toolkit covers the full pipeline: random Bernoulli sensing and
//! noise injection ([`sensing`]), sparse image representations
//! ([`transforms`]), a Boltzmann-machine prior over supports with
//! pseudo-likelihood learning and MAP inference ([`mrf`]), the inner
//! alternating-minimization signal estimator ([`recovery`]), the outer
//! loop that re-estimates the prior from the measurements themselves
//! ([`adaptive`]), an OMP baseline ([`baselines`]), and a benchmark
//! runner ([`mod@bench`]).
//!
//! All randomized operations take an explicit `u64` seed and use the
//! ChaCha8 generator, so every result is reproducible bit for bit.

pub mod adaptive;
pub mod baselines;
pub mod bench;
pub mod error;
pub mod io;
pub mod mrf;
pub mod recovery;
pub mod sensing;
pub mod transforms;

pub use error::{Error, Result};
