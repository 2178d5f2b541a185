//! Versioned binary checkpoint of a continual learner.
//!
//! Layout, all integers little-endian:
//! ```text
//! magic "DCLCKPT\0" | version u32 | config hash [32] | header len u64 | header JSON
//! | value count u64 | f64 values | flag count u64 | u8 flags | SHA-256 of all prior bytes
//! ```
//! Values: per conv layer weight then bias, then alpha_raw, then per head (ascending
//! task id) hidden weight, hidden bias (if any), output weight, output bias.
//! Flags: per conv layer weight then bias freeze flags.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{ConvLayer, Dense, NetworkConfig, ParamStore, TaskHead};
use crate::subnet::{ContinualLearner, TaskMask, UnitRegistry};

pub const MAGIC: &[u8; 8] = b"DCLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint was written under a different training config")]
    ConfigHash,
}

impl CheckpointError {
    /// Stable process exit code per failure kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            CheckpointError::Io(_) => 10,
            CheckpointError::Corrupt(_) => 11,
            CheckpointError::Version { .. } => 12,
            CheckpointError::ConfigHash => 13,
        }
    }
}

/// Position in a sweep at which the checkpoint was taken.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunPosition {
    pub seed: u64,
    pub order: usize,
    /// Task ids committed so far, in training order.
    pub completed: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct CheckpointFile {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub position: RunPosition,
    pub learner: ContinualLearner,
}

#[derive(Serialize, Deserialize)]
struct DenseShape {
    in_dim: usize,
    out_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    task_id: u32,
    classes: Vec<usize>,
    frozen: bool,
    hidden: Option<DenseShape>,
    out: DenseShape,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    registry: UnitRegistry,
    masks: Vec<TaskMask>,
    heads: Vec<HeadMeta>,
    rng: RngState,
    position: RunPosition,
}

fn shape(d: &Dense) -> DenseShape {
    DenseShape { in_dim: d.in_dim, out_dim: d.out_dim }
}

pub fn encode(file: &CheckpointFile) -> Vec<u8> {
    let l = &file.learner;
    let header = Header {
        network: l.config.clone(),
        registry: l.registry.clone(),
        masks: l.masks.values().cloned().collect(),
        heads: l
            .heads
            .values()
            .map(|h| HeadMeta {
                task_id: h.task_id,
                classes: h.classes.clone(),
                frozen: h.frozen,
                hidden: h.hidden.as_ref().map(shape),
                out: shape(&h.out),
            })
            .collect(),
        rng: RngState {
            seed: l.rng.get_seed().to_vec(),
            stream: l.rng.get_stream(),
            word_pos: l.rng.get_word_pos().to_string(),
        },
        position: file.position.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");

    let mut values: Vec<f64> = Vec::new();
    for layer in &l.store.layers {
        values.extend(&layer.weight);
        values.extend(&layer.bias);
    }
    values.push(l.store.alpha_raw);
    for h in l.heads.values() {
        for d in h.hidden.iter().chain(std::iter::once(&h.out)) {
            values.extend(&d.weight);
            values.extend(&d.bias);
        }
    }
    let flags: Vec<u8> = l
        .store
        .layers
        .iter()
        .flat_map(|layer| layer.weight_frozen.iter().chain(&layer.bias_frozen).map(|f| *f as u8))
        .collect();

    let mut out = Vec::with_capacity(64 + header.len() + values.len() * 8 + flags.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&file.version.to_le_bytes());
    out.extend_from_slice(&file.config_hash);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in &values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(flags.len() as u64).to_le_bytes());
    out.extend_from_slice(&flags);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|n| *n <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("implausible length {n}")))
    }
}

/// Parses a checkpoint. With `expected_hash`, a checkpoint from another training config
/// is refused.
pub fn decode(bytes: &[u8], expected_hash: Option<&[u8; 32]>) -> Result<CheckpointFile, CheckpointError> {
    if bytes.len() < MAGIC.len() + 4 + 32 + 32 {
        return Err(CheckpointError::Corrupt("file too short".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic bytes".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
    }
    let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    if expected_hash.is_some_and(|h| *h != config_hash) {
        return Err(CheckpointError::ConfigHash);
    }
    let header_len = r.len()?;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    let n_values = r.len()?;
    let raw = r.take(n_values.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("value count overflow".into()))?)?;
    let mut values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let n_flags = r.len()?;
    let mut flags = r.take(n_flags)?.iter().map(|b| *b != 0);
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }

    let cfg = header.network;
    cfg.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let short = || CheckpointError::Corrupt("tensor section shorter than the header describes".into());
    let mut take_vals = |n: usize| -> Result<Vec<f64>, CheckpointError> {
        let v: Vec<f64> = values.by_ref().take(n).collect();
        if v.len() == n {
            Ok(v)
        } else {
            Err(short())
        }
    };
    let mut layers = Vec::new();
    for g in cfg.geometry() {
        let weight = take_vals(g.weight_len())?;
        let bias = take_vals(g.out_channels)?;
        layers.push(ConvLayer {
            in_channels: g.in_channels,
            out_channels: g.out_channels,
            kernel: g.kernel,
            weight_frozen: Vec::new(),
            bias_frozen: Vec::new(),
            weight,
            bias,
        });
    }
    let alpha_raw = take_vals(1)?[0];
    let mut heads = BTreeMap::new();
    for meta in header.heads {
        let mut dense = |s: &DenseShape| -> Result<Dense, CheckpointError> {
            Ok(Dense { in_dim: s.in_dim, out_dim: s.out_dim, weight: take_vals(s.in_dim * s.out_dim)?, bias: take_vals(s.out_dim)? })
        };
        let hidden = meta.hidden.as_ref().map(&mut dense).transpose()?;
        let out = dense(&meta.out)?;
        heads.insert(meta.task_id, TaskHead { task_id: meta.task_id, classes: meta.classes, hidden, out, frozen: meta.frozen });
    }
    if values.next().is_some() {
        return Err(CheckpointError::Corrupt("tensor section longer than the header describes".into()));
    }
    for layer in &mut layers {
        layer.weight_frozen = flags.by_ref().take(layer.weight.len()).collect();
        layer.bias_frozen = flags.by_ref().take(layer.bias.len()).collect();
        if layer.weight_frozen.len() != layer.weight.len() || layer.bias_frozen.len() != layer.bias.len() {
            return Err(CheckpointError::Corrupt("freeze flags shorter than the tensors".into()));
        }
    }
    if flags.next().is_some() {
        return Err(CheckpointError::Corrupt("extra freeze flags".into()));
    }
    let store = ParamStore { layers, alpha_raw };
    store.check(&cfg).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

    let seed: [u8; 32] =
        header.rng.seed.as_slice().try_into().map_err(|_| CheckpointError::Corrupt("rng seed must be 32 bytes".into()))?;
    let word_pos: u128 = header.rng.word_pos.parse().map_err(|_| CheckpointError::Corrupt("bad rng word position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);

    let masks: BTreeMap<u32, TaskMask> = header.masks.into_iter().map(|m| (m.task_id, m)).collect();
    let learner = ContinualLearner { config: cfg, store, registry: header.registry, masks, heads, rng };
    Ok(CheckpointFile { version, config_hash, position: header.position, learner })
}

/// Writes atomically through a temporary file in the same directory.
pub fn save_checkpoint(path: &Path, file: &CheckpointFile) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(file))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected_hash: Option<&[u8; 32]>) -> Result<CheckpointFile, CheckpointError> {
    decode(&std::fs::read(path)?, expected_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, BiasSpec, SplitSizes};
    use crate::subnet::{PipelineConfig, TrainConfig};

    fn learner_after_one_task() -> (ContinualLearner, crate::datagen::TaskStream, PipelineConfig) {
        let spec = BiasSpec {
            num_tasks: 2,
            classes_per_task: vec![2, 2],
            samples_per_class: SplitSizes { train: 16, val: 4, test: 4 },
            ..BiasSpec::default()
        };
        let stream = generate(&spec).unwrap();
        let pcfg = PipelineConfig { train: TrainConfig { stage1_epochs: 1, finetune_epochs: 1, ..Default::default() }, ..Default::default() };
        let mut l = ContinualLearner::new(NetworkConfig::default(), 3).unwrap();
        l.learn_task(&stream.tasks[0], 2, &pcfg).unwrap();
        (l, stream, pcfg)
    }

    fn file(l: &ContinualLearner) -> CheckpointFile {
        CheckpointFile { version: FORMAT_VERSION, config_hash: [7; 32], position: RunPosition::default(), learner: l.clone() }
    }

    #[test]
    fn round_trip_continues_identically() {
        let (l, stream, pcfg) = learner_after_one_task();
        let back = decode(&encode(&file(&l)), Some(&[7; 32])).unwrap();
        assert_eq!(back.learner.store, l.store);
        assert_eq!(back.learner.heads, l.heads);
        assert_eq!(back.learner.masks, l.masks);
        assert_eq!(back.learner.registry, l.registry);
        let (mut a, mut b) = (l, back.learner);
        a.learn_task(&stream.tasks[1], 2, &pcfg).unwrap();
        b.learn_task(&stream.tasks[1], 2, &pcfg).unwrap();
        assert_eq!(a.store.fingerprint(), b.store.fingerprint());
        assert_eq!(a.heads[&2].fingerprint(), b.heads[&2].fingerprint());
    }

    #[test]
    fn faults_map_to_distinct_errors() {
        let (l, _, _) = learner_after_one_task();
        let bytes = encode(&file(&l));
        assert!(matches!(decode(&bytes[..bytes.len() / 2], None), Err(CheckpointError::Corrupt(_))));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode(&flipped, None), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(decode(&bytes, Some(&[8; 32])), Err(CheckpointError::ConfigHash)));
        let mut f = file(&l);
        f.version = 99;
        assert!(matches!(decode(&encode(&f), None), Err(CheckpointError::Version { found: 99, .. })));
    }
}
