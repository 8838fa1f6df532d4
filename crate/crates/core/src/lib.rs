//! Multi-resource restless matching bandits.
//!
//! A restless arm is a small MDP that keeps evolving whether or not it is
//! served. Each step, arms are matched to one of `H` capacitated resources
//! (or left idle on the uncapacitated null resource). This crate provides:
//!
//! - [`env`]: the benchmark arm kernels (age of information, holding cost,
//!   recovering ad placement) as explicit distributions and samplers;
//! - [`matching`]: exact capacity-constrained max-weight assignment;
//! - [`oracle`]: single-arm MDP solving, partial indexes and indexability;
//! - [`neural`]: a small dense network with exact backpropagation and Adam;
//! - [`agent`]: the Deep Index Policy learner;
//! - [`baselines`]: oracle index matching (SWIM), the closed-form Whittle
//!   policy for queues, a single-index learner with random matching, and
//!   uniform random assignment;
//! - [`harness`]: scenario presets, seeded runs, aggregation and CSV output.

pub mod agent;
pub mod baselines;
pub mod env;
pub mod error;
pub mod harness;
pub mod matching;
pub mod neural;
pub mod oracle;

pub use error::{Error, Result};
