//! Few-shot open-set recognition over embedding vectors.
//!
//! The crate implements the full experimental stack: seeded synthetic
//! datasets and an embedding-file loader, episodic task sampling,
//! prototype-based few-shot classification with cosine or negative-distance
//! heads, four open-set techniques (maximum logit/softmax scoring, the
//! entropic open-set loss, a learnable garbage class, and a
//! feature-residual discriminator), the evaluation metric suite (closed-set
//! accuracy, open-set accuracy, AUROC, AUPR, OSCR) with brute-force
//! reference oracles, and a reproducible experiment runner.
//!
//! Everything is deterministic per seed: the PRNG is pinned (SplitMix64),
//! all arithmetic is f64, and no global state is involved.

pub mod classifier;
pub mod data;
pub mod episodes;
pub mod error;
pub mod metrics;
pub mod numeric;
pub mod openset;
pub mod runner;

pub use error::{Error, Result};
