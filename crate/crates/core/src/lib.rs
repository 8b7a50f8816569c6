//! Minimum action distance (MAD) state embeddings.
//!
//! The crate learns embeddings whose (possibly asymmetric) distances
//! approximate the minimum number of actions between states, using only
//! reward-free trajectories. It also provides the simulators the data comes
//! from, an exact shortest-path oracle for evaluation, a latent forward
//! model, and greedy goal-reaching in the embedded space.
//!
//! Module map:
//! - [`envs`]: grid and point-mass simulators, trajectory collection
//! - [`oracle`]: adjacency, Floyd-Warshall, BFS, ground-truth tables
//! - [`diffcore`]: feedforward networks with reverse-mode gradients
//! - [`norms`]: p-norm and wide-norm distance heads
//! - [`madlearn`]: pair sampling, penalized loss, embedding training
//! - [`dynamics`]: latent transition model and greedy planning
//! - [`evalharness`]: oracle comparisons and experiment runner

pub mod checkpoint;
pub mod diffcore;
pub mod dynamics;
pub mod envs;
pub mod error;
pub mod evalharness;
pub mod madlearn;
pub mod norms;
pub mod oracle;
pub mod seed;

pub use error::{Error, Result};
