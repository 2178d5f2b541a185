use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::NetworkConfig;
use super::NnError;

/// Per-layer channel keep flags. `true` = the channel participates in the forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelMask {
    pub kept: Vec<Vec<bool>>,
}

impl ChannelMask {
    pub fn full(config: &NetworkConfig) -> Self {
        Self { kept: config.conv_layers.iter().map(|l| vec![true; l.out_channels]).collect() }
    }

    pub fn empty(config: &NetworkConfig) -> Self {
        Self { kept: config.conv_layers.iter().map(|l| vec![false; l.out_channels]).collect() }
    }

    /// Channel-wise AND. Masking out A then B equals masking out A ∪ B.
    pub fn intersect(&self, other: &ChannelMask) -> ChannelMask {
        ChannelMask {
            kept: self
                .kept
                .iter()
                .zip(&other.kept)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x && *y).collect())
                .collect(),
        }
    }

    pub fn count_kept(&self) -> usize {
        self.kept.iter().flatten().filter(|k| **k).count()
    }

    pub fn is_kept(&self, layer: usize, channel: usize) -> bool {
        self.kept[layer][channel]
    }

    pub(crate) fn check(&self, config: &NetworkConfig) -> Result<(), NnError> {
        if self.kept.len() != config.conv_layers.len() {
            return Err(NnError::Config(format!(
                "mask covers {} layers, network has {}",
                self.kept.len(),
                config.conv_layers.len()
            )));
        }
        for (i, (m, l)) in self.kept.iter().zip(&config.conv_layers).enumerate() {
            if m.len() != l.out_channels {
                return Err(NnError::Config(format!(
                    "mask layer {i} has {} channels, network has {}",
                    m.len(),
                    l.out_channels
                )));
            }
        }
        Ok(())
    }
}

/// Weights and biases of one conv stage together with their freeze flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Layout `[out][in][ky][kx]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub weight_frozen: Vec<bool>,
    pub bias_frozen: Vec<bool>,
}

impl ConvLayer {
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn filter(&self, channel: usize) -> &[f64] {
        let n = self.filter_len();
        &self.weight[channel * n..(channel + 1) * n]
    }

    /// Freezes the filter and bias producing output `channel`.
    pub fn freeze_channel(&mut self, channel: usize) {
        let n = self.filter_len();
        self.weight_frozen[channel * n..(channel + 1) * n].fill(true);
        self.bias_frozen[channel] = true;
    }

    pub fn channel_fully_frozen(&self, channel: usize) -> bool {
        let n = self.filter_len();
        self.bias_frozen[channel] && self.weight_frozen[channel * n..(channel + 1) * n].iter().all(|f| *f)
    }
}

/// Fully connected layer, layout `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub(crate) fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *slot = self.bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

/// Per-task classifier φ_t over pooled features. Never shared across tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub task_id: u32,
    /// Global class id of each logit.
    pub classes: Vec<usize>,
    pub hidden: Option<Dense>,
    pub out: Dense,
    pub frozen: bool,
}

impl TaskHead {
    pub fn new(config: &NetworkConfig, task_id: u32, classes: Vec<usize>, rng: &mut impl Rng) -> Self {
        let features = config.feature_len();
        let (hidden, out_in) = if config.head_width > 0 {
            (Some(Dense::init(features, config.head_width, rng)), config.head_width)
        } else {
            (None, features)
        };
        let out = Dense::init(out_in, classes.len(), rng);
        Self { task_id, classes, hidden, out, frozen: false }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn local_index(&self, global: usize) -> Option<usize> {
        self.classes.iter().position(|c| *c == global)
    }

    pub(crate) fn hash_into(&self, hasher: &mut Sha256) {
        hasher.update(self.task_id.to_le_bytes());
        for c in &self.classes {
            hasher.update((*c as u64).to_le_bytes());
        }
        for dense in self.hidden.iter().chain(std::iter::once(&self.out)) {
            for v in dense.weight.iter().chain(&dense.bias) {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.update([self.frozen as u8]);
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        self.hash_into(&mut hasher);
        hex(&hasher.finalize())
    }
}

/// The shared conv trunk plus the raw (unsquashed) loss-weight parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub layers: Vec<ConvLayer>,
    pub alpha_raw: f64,
}

impl ParamStore {
    /// He-uniform initialisation, deterministic in `config.seed`.
    pub fn init(config: &NetworkConfig) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .geometry()
            .iter()
            .map(|g| {
                let fan_in = g.in_channels * g.kernel * g.kernel;
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight: Vec<f64> = (0..g.weight_len()).map(|_| rng.gen_range(-bound..bound)).collect();
                ConvLayer {
                    in_channels: g.in_channels,
                    out_channels: g.out_channels,
                    kernel: g.kernel,
                    weight_frozen: vec![false; weight.len()],
                    weight,
                    bias: vec![0.01; g.out_channels],
                    bias_frozen: vec![false; g.out_channels],
                }
            })
            .collect();
        Ok(Self { layers, alpha_raw: 0.0 })
    }

    pub fn check(&self, config: &NetworkConfig) -> Result<(), NnError> {
        let geoms = config.geometry();
        if geoms.len() != self.layers.len() {
            return Err(NnError::Config("parameter store does not match network config".into()));
        }
        for (g, l) in geoms.iter().zip(&self.layers) {
            if l.in_channels != g.in_channels
                || l.out_channels != g.out_channels
                || l.kernel != g.kernel
                || l.weight.len() != g.weight_len()
                || l.bias.len() != g.out_channels
                || l.weight_frozen.len() != l.weight.len()
                || l.bias_frozen.len() != l.bias.len()
            {
                return Err(NnError::Config("parameter store does not match network config".into()));
            }
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for l in &mut self.layers {
            l.weight_frozen.fill(true);
            l.bias_frozen.fill(true);
        }
    }

    pub(crate) fn hash_into(&self, hasher: &mut Sha256) {
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                hasher.update(v.to_le_bytes());
            }
            let flags: Vec<u8> = l.weight_frozen.iter().chain(&l.bias_frozen).map(|f| *f as u8).collect();
            hasher.update(&flags);
        }
        hasher.update(self.alpha_raw.to_le_bytes());
    }

    /// SHA-256 over the little-endian bytes of every tensor and flag.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        self.hash_into(&mut hasher);
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
