//! On-policy mixture optimization for continual training, at desk scale.
//!
//! The crate trains a tiny next-token model over synthetic Markov text domains and
//! decides, at each continual stage, how to mix old and incoming data. Instead of
//! sweeping real training runs, each stage trains cheap low-rank probes, merges them
//! at sampled mixture weights to sketch the per-domain loss surface, fits a log-linear
//! law to the sketches, and minimizes the fitted average loss plus a KL anchor back to
//! a reference mixture. The chosen mixture then drives the actual stage training.
//!
//! Module map:
//!
//! * [`mixture`]: simplex geometry, expansion of reduced weights, KL, grids.
//! * [`model`]: the two-layer token model, low-rank adapters, merging, gradients.
//! * [`corpus`]: order-1 Markov domain generators, batch sampling, held-out eval.
//! * [`trainer`]: warmup/stable/decay schedule, SGD and adaptive-moment updates,
//!   full and adapters-only training, probe training.
//! * [`law`]: the per-domain `offset + exp(affine)` loss law and its fitting scan.
//! * [`solver`]: entropic mirror descent on the reduced simplex plus a lattice oracle.
//! * [`pipeline`]: one continual stage end to end, multi-stage runs, pretraining mode.
//! * [`baselines`]: fixed-rule and reference strategies sharing the same ledger.
//! * [`audit`]: surface comparisons behind the proxy-gap bound, regret sweeps.
//! * [`io`]: checksummed binary containers and corpus persistence.

#![forbid(unsafe_code)]

pub mod audit;
pub mod baselines;
pub mod corpus;
pub mod error;
pub mod io;
pub mod law;
pub mod mixture;
pub mod model;
pub mod pipeline;
pub mod seeds;
pub mod solver;
pub mod trainer;

pub use error::{Error, Result};
pub use mixture::{Mixture, MixturePrior, ReducedWeights};
