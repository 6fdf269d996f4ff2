//! Deterministic numeric foundation: vectors, losses, dense nets with
//! backprop, Adam, and the pinned PRNG. Everything is f64 and free of
//! platform-dependent behavior.

pub mod loss;
pub mod net;
pub mod optim;
pub mod rng;
pub mod vector;

pub use loss::{bce, cross_entropy, eos_loss, softmax, PROB_FLOOR};
pub use net::{Activation, DenseNet, Layer, Matrix, NetGrads, Tape};
pub use optim::{Adam, ParamUpdate};
pub use rng::Prng;
pub use vector::cosine_similarity;
