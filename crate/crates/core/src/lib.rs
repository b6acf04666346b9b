//! One-shot federated learning from additive sufficient statistics.
//!
//! Clients reduce labeled embeddings to per-class counts and first/second
//! moments (optionally through a public random-projection sketch and behind
//! simulated secure aggregation); the server turns the aggregate into
//! closed-form Gaussian discriminants, a Fisher subspace, a data-free
//! synthetic sampler and two small trainable heads. Because the statistics
//! are additive, everything the server computes is independent of how the
//! data was split across clients.

pub mod client_stats;
pub mod datamodel;
pub mod diagnostics;
pub mod error;
pub mod fisher;
pub mod gaussian_heads;
pub mod heads_io;
pub mod linalg;
pub mod partition;
pub mod prng;
pub mod secure_agg;
pub mod sketch;
pub mod synth;
pub mod train_heads;
pub mod wire;

pub use error::{Error, Result};
