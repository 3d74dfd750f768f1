//! Decentralized layer-wise training of a fixed-size structured ReLU
//! network. Workers hold disjoint shards, talk over a doubly-stochastic
//! mixing graph, and solve each layer's norm-constrained least-squares
//! problem with consensus ADMM. A centralized solver on the pooled data is
//! the reference the decentralized run must reproduce.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod network;
pub mod solver;
pub mod trainer;

pub use error::{Error, Result};
pub use model::Matrix;
