use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::SampleRecord;
use crate::losses::softmax;
use crate::nn::{ChannelMask, NnError, Snapshot};

use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 50, learning_rate: 1e-2, batch_size: 32 }
    }
}

/// Area under the ROC curve for "positive scores above negative scores", ties
/// counted as one half.
pub fn auc(positive: &[f64], negative: &[f64]) -> f64 {
    if positive.is_empty() || negative.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = positive.iter().map(|s| (*s, true)).chain(negative.iter().map(|s| (*s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann–Whitney U with midranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|x| x.1).count() as f64 * mid;
        i = j + 1;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

fn standardize(train: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = train.first().map_or(0, |v| v.len());
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = train.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-16 {
                1.0 / var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    (mean, scale)
}

/// Globally pooled trunk features of `samples` under `mask`.
pub fn pooled_features(snapshot: &Snapshot, mask: Option<&ChannelMask>, samples: &[SampleRecord]) -> Result<Vec<Vec<f64>>, NnError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|r| r.image.as_slice()).collect();
        let pass = snapshot.forward(mask, &imgs)?;
        out.extend((0..chunk.len()).map(|s| pass.features(s).to_vec()));
    }
    Ok(out)
}

/// Trains a linear softmax probe from frozen features to the sensitive attribute and
/// reports one-vs-one AUC on held-out features, keyed by `(a, b)` with `a < b`.
///
/// Only the probe's own parameters are trained; the features are read-only inputs.
pub fn attribute_probe(
    train_features: &[Vec<f64>],
    train_attrs: &[usize],
    test_features: &[Vec<f64>],
    test_attrs: &[usize],
    config: &ProbeConfig,
    rng: &mut impl Rng,
) -> Result<BTreeMap<(usize, usize), f64>, MetricError> {
    if train_features.len() != train_attrs.len() {
        return Err(MetricError::LengthMismatch(train_features.len(), train_attrs.len()));
    }
    if test_features.len() != test_attrs.len() {
        return Err(MetricError::LengthMismatch(test_features.len(), test_attrs.len()));
    }
    if train_features.is_empty() || test_features.is_empty() {
        return Err(MetricError::Empty);
    }
    let groups = train_attrs.iter().chain(test_attrs).max().map_or(0, |g| g + 1);
    let distinct = |a: &[usize]| a.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct(train_attrs) < 2 || distinct(test_attrs) < 2 {
        return Err(MetricError::Undefined("attribute probe needs at least two groups".into()));
    }
    let d = train_features[0].len();
    let (mean, scale) = standardize(train_features);
    let prep = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect() };
    let xs: Vec<Vec<f64>> = train_features.iter().map(|x| prep(x)).collect();

    let mut w = vec![0.0; groups * d];
    let mut b = vec![0.0; groups];
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut mw = vec![0.0; w.len()];
    let mut vw = vec![0.0; w.len()];
    let mut mb = vec![0.0; groups];
    let mut vb = vec![0.0; groups];
    let mut t = 0i32;
    let logits = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..groups).map(|g| b[g] + w[g * d..(g + 1) * d].iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
    };
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; groups];
            for &i in chunk {
                let mut p = softmax(&logits(&w, &b, &xs[i]));
                p[train_attrs[i]] -= 1.0;
                for g in 0..groups {
                    gb[g] += p[g];
                    for j in 0..d {
                        gw[g * d + j] += p[g] * xs[i][j];
                    }
                }
            }
            let scale_n = 1.0 / chunk.len() as f64;
            t += 1;
            let (c1, c2) = (1.0 - f64::powi(beta1, t), 1.0 - f64::powi(beta2, t));
            for (k, g) in gw.iter().enumerate() {
                let g = g * scale_n;
                mw[k] = beta1 * mw[k] + (1.0 - beta1) * g;
                vw[k] = beta2 * vw[k] + (1.0 - beta2) * g * g;
                w[k] -= config.learning_rate * (mw[k] / c1) / ((vw[k] / c2).sqrt() + eps);
            }
            for (k, g) in gb.iter().enumerate() {
                let g = g * scale_n;
                mb[k] = beta1 * mb[k] + (1.0 - beta1) * g;
                vb[k] = beta2 * vb[k] + (1.0 - beta2) * g * g;
                b[k] -= config.learning_rate * (mb[k] / c1) / ((vb[k] / c2).sqrt() + eps);
            }
        }
    }

    let test_logits: Vec<Vec<f64>> = test_features.iter().map(|x| logits(&w, &b, &prep(x))).collect();
    let mut out = BTreeMap::new();
    for a in 0..groups {
        for c in a + 1..groups {
            let pos: Vec<f64> = test_logits.iter().zip(test_attrs).filter(|(_, g)| **g == a).map(|(l, _)| l[a] - l[c]).collect();
            let neg: Vec<f64> = test_logits.iter().zip(test_attrs).filter(|(_, g)| **g == c).map(|(l, _)| l[a] - l[c]).collect();
            if !pos.is_empty() && !neg.is_empty() {
                out.insert((a, c), auc(&pos, &neg));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_basics() {
        assert_eq!(auc(&[3.0, 4.0], &[1.0, 2.0]), 1.0);
        assert_eq!(auc(&[1.0, 2.0], &[3.0, 4.0]), 0.0);
        assert_eq!(auc(&[1.0, 1.0], &[1.0]), 0.5);
        // Brute-force pair count.
        let pos = [0.3, 0.9, 0.5, 0.5];
        let neg = [0.1, 0.5, 0.7];
        let mut wins = 0.0;
        for p in pos {
            for n in neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        assert!((auc(&pos, &neg) - wins / 12.0).abs() < 1e-15);
    }

    fn split(feats: Vec<Vec<f64>>, attrs: Vec<usize>) -> (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>, Vec<usize>) {
        let half = feats.len() / 2;
        (feats[..half].to_vec(), attrs[..half].to_vec(), feats[half..].to_vec(), attrs[half..].to_vec())
    }

    #[test]
    fn noise_features_give_chance_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 1000;
        let attrs: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.gen::<f64>()).collect()).collect();
        let (a, b, c, d) = split(feats, attrs);
        let res = attribute_probe(&a, &b, &c, &d, &ProbeConfig::default(), &mut rng).unwrap();
        assert!((res[&(0, 1)] - 0.5).abs() < 0.07, "{res:?}");
    }

    #[test]
    fn one_hot_features_give_perfect_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400;
        let attrs: Vec<usize> = (0..n).map(|i| (i * 7) % 3 % 2).collect();
        let feats: Vec<Vec<f64>> = attrs.iter().map(|a| if *a == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let (a, b, c, d) = split(feats, attrs);
        let res = attribute_probe(&a, &b, &c, &d, &ProbeConfig::default(), &mut rng).unwrap();
        assert!((res[&(0, 1)] - 1.0).abs() < 0.02);
    }

    #[test]
    fn probing_leaves_the_extractor_untouched() {
        use crate::datagen::{generate, BiasSpec, SplitSizes};
        use crate::nn::{NetworkConfig, ParamStore, TaskHead};
        let spec = BiasSpec { num_tasks: 1, classes_per_task: vec![2], samples_per_class: SplitSizes { train: 20, val: 2, test: 10 }, ..BiasSpec::default() };
        let stream = generate(&spec).unwrap();
        let cfg = NetworkConfig::default();
        let store = ParamStore::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = TaskHead::new(&cfg, 1, vec![0, 1], &mut rng);
        let snap = Snapshot::new(&cfg, &store, &head);
        let before = snap.fingerprint();
        let t = &stream.tasks[0];
        let tr = pooled_features(&snap, None, &t.train).unwrap();
        let te = pooled_features(&snap, None, &t.test).unwrap();
        let attrs = |v: &[SampleRecord]| v.iter().map(|r| r.attribute).collect::<Vec<_>>();
        attribute_probe(&tr, &attrs(&t.train), &te, &attrs(&t.test), &ProbeConfig::default(), &mut rng).unwrap();
        assert_eq!(before, snap.fingerprint());
        assert_eq!(store.fingerprint(), snap.params().fingerprint());
    }

    #[test]
    fn single_group_is_undefined() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = vec![vec![0.0]; 4];
        let r = attribute_probe(&f, &[0; 4], &f, &[0; 4], &ProbeConfig::default(), &mut rng);
        assert!(matches!(r, Err(MetricError::Undefined(_))));
    }
}
