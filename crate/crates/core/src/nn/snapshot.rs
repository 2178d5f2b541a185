use std::sync::Arc;

use super::config::NetworkConfig;
use super::forward::{forward, ForwardPass};
use super::params::{ChannelMask, ParamStore, TaskHead};
use super::NnError;

/// Immutable evaluation copy of a trunk plus one head. Cheap to clone and safe to
/// share across threads.
#[derive(Debug, Clone)]
pub struct Snapshot {
    config: Arc<NetworkConfig>,
    params: Arc<ParamStore>,
    head: Arc<TaskHead>,
}

impl Snapshot {
    pub fn new(config: &NetworkConfig, params: &ParamStore, head: &TaskHead) -> Self {
        Self { config: Arc::new(config.clone()), params: Arc::new(params.clone()), head: Arc::new(head.clone()) }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn head(&self) -> &TaskHead {
        &self.head
    }

    pub fn forward(&self, mask: Option<&ChannelMask>, batch: &[&[f32]]) -> Result<ForwardPass, NnError> {
        forward(&self.params, &self.config, mask, &self.head, batch)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = sha2::Sha256::new();
        use sha2::Digest;
        self.params.hash_into(&mut h);
        self.head.hash_into(&mut h);
        super::params::hex(&h.finalize())
    }
}
