//! Small deterministic conv network engine: conv+ReLU trunk, global average pooling,
//! per-task dense heads, channel masks and per-parameter freeze flags.

mod config;
mod forward;
mod optim;
mod params;
mod snapshot;

pub use config::{ConvSpec, LayerGeometry, NetworkConfig};
pub use forward::{backward, forward, ForwardPass, Gradients};
pub use optim::{Optimizer, OptimizerKind, Trainer};
pub use params::{ChannelMask, ConvLayer, Dense, ParamStore, TaskHead};
pub use snapshot::Snapshot;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("rejected input: {0}")]
    Input(String),
    #[error("state error: {0}")]
    State(String),
}
