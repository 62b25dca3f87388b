//! The learning kernel: parameters with Adam state, the shared-bottom
//! multi-task network, losses, gradient checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod linear;
pub mod loss;
mod network;
mod param;

pub use network::{
    aggregate, BatchStats, Gradients, HeadGrad, HeadTrace, NetConfig, Network, PredictionBundle, TaskHead,
    TrunkTrace,
};
pub use param::{AdamConfig, Dense, DenseGrad, Embedding, Param};
