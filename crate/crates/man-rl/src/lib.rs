//! Value learning over factored action spaces.
//!
//! A joint action is split into two sub-actions chosen sequentially: the
//! second sub-action is picked conditioned on the first, and each sub-action
//! gets its own Q-function. The crate provides the coupled update rules in
//! tabular form, their deep counterparts on a small MLP substrate, DQN/DDQN
//! baselines over the joint action space, a discrete block-stacking
//! environment, a seeded random-MDP generator with an exact value-iteration
//! oracle, and an experiment harness with a CLI.
//!
//! All randomness flows through [`RngStream`] (ChaCha8), so any run is fully
//! determined by its seed on every platform.

pub mod agents;
pub mod envs;
pub mod harness;
pub mod nn;
pub mod replay;
pub mod rng;
pub mod schedule;
pub mod space;
pub mod tabular;

pub use replay::ReplayBuffer;
pub use rng::RngStream;
pub use schedule::EpsilonSchedule;
pub use space::{FactoredActionSpace, Transition};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of bounds: {0}")]
    IndexOutOfBounds(String),
    #[error("cannot sample from an empty buffer")]
    EmptyBuffer,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("normalized score undefined: human and random scores are equal")]
    UndefinedScore,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
