//! Easy/hard partition of a task's training samples under the biased network, and
//! per-unit bias scores from the spatial variance of ReLU activations.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::SampleRecord;
use crate::losses::softmax;
use crate::nn::{ChannelMask, NnError, Snapshot};
use crate::subnet::UnitId;
use crate::SampleId;

#[derive(Debug, thiserror::Error)]
pub enum BiasError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("tau = {0} outside (0.5, 1)")]
    InvalidTau(f64),
    #[error("task {0} is unscoreable: no class has both easy and hard samples")]
    Unscoreable(u32),
    #[error("spatial variance needs at least 2 cells, got {0}")]
    TooSmall(usize),
    #[error("sample {0} has no recorded activations")]
    MissingSample(SampleId),
    #[error("label {label} of sample {id} is not a class of task {task}")]
    ForeignLabel { id: SampleId, label: usize, task: u32 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// How the hard set of a class is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardSetRule {
    /// Misclassified with top-1 confidence ≥ τ; a class left empty falls back to all of
    /// its misclassified samples.
    #[default]
    ConfidentMisclassified,
    /// Every misclassified sample.
    AllMisclassified,
}

/// One sample as seen by the biased network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub id: SampleId,
    pub label: usize,
    pub predicted: usize,
    /// Top-1 softmax probability.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePartition {
    pub task_id: u32,
    pub easy: BTreeMap<usize, BTreeSet<SampleId>>,
    pub hard: BTreeMap<usize, BTreeSet<SampleId>>,
    pub excluded: BTreeSet<SampleId>,
}

impl SamplePartition {
    /// Classes whose easy and hard sets are both nonempty.
    pub fn scoreable_classes(&self) -> Vec<usize> {
        self.easy
            .iter()
            .filter(|(c, e)| !e.is_empty() && self.hard.get(c).is_some_and(|h| !h.is_empty()))
            .map(|(c, _)| *c)
            .collect()
    }

    /// The same partition with easy and hard exchanged.
    pub fn swapped(&self) -> Self {
        Self { task_id: self.task_id, easy: self.hard.clone(), hard: self.easy.clone(), excluded: self.excluded.clone() }
    }
}

pub fn partition_predictions(
    task_id: u32,
    classes: &[usize],
    predictions: &[Prediction],
    tau: f64,
    rule: HardSetRule,
) -> Result<SamplePartition, BiasError> {
    if predictions.is_empty() {
        return Err(BiasError::EmptyDataset);
    }
    if !(tau > 0.5 && tau < 1.0) {
        return Err(BiasError::InvalidTau(tau));
    }
    let mut easy: BTreeMap<usize, BTreeSet<SampleId>> = classes.iter().map(|c| (*c, BTreeSet::new())).collect();
    let mut hard = easy.clone();
    let mut excluded = BTreeSet::new();
    let mut unconfident_wrong: BTreeMap<usize, Vec<SampleId>> = BTreeMap::new();
    for p in predictions {
        if !classes.contains(&p.label) {
            return Err(BiasError::ForeignLabel { id: p.id, label: p.label, task: task_id });
        }
        let correct = p.predicted == p.label;
        let confident = p.confidence >= tau;
        match (correct, confident, rule) {
            (true, true, _) => {
                easy.get_mut(&p.label).expect("class present").insert(p.id);
            }
            (false, true, _) | (false, false, HardSetRule::AllMisclassified) => {
                hard.get_mut(&p.label).expect("class present").insert(p.id);
            }
            (false, false, HardSetRule::ConfidentMisclassified) => {
                excluded.insert(p.id);
                unconfident_wrong.entry(p.label).or_default().push(p.id);
            }
            (true, false, _) => {
                excluded.insert(p.id);
            }
        }
    }
    if rule == HardSetRule::ConfidentMisclassified {
        for c in classes {
            let set = hard.get_mut(c).expect("class present");
            if set.is_empty() {
                if let Some(ids) = unconfident_wrong.get(c) {
                    log::info!("task {task_id} class {c}: no confident errors, using all {} misclassified samples", ids.len());
                    for id in ids {
                        excluded.remove(id);
                        set.insert(*id);
                    }
                }
            }
        }
    }
    Ok(SamplePartition { task_id, easy, hard, excluded })
}

fn predictions(snapshot: &Snapshot, mask: Option<&ChannelMask>, samples: &[SampleRecord], batch: usize) -> Result<Vec<Prediction>, BiasError> {
    let head = snapshot.head();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|r| r.image.as_slice()).collect();
        let pass = snapshot.forward(mask, &imgs)?;
        for (r, logits) in chunk.iter().zip(&pass.logits) {
            let probs = softmax(logits);
            let (best, conf) = probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, p)| if *p > acc.1 { (i, *p) } else { acc });
            out.push(Prediction { id: r.id, label: r.label, predicted: head.classes[best], confidence: conf });
        }
    }
    Ok(out)
}

/// Partitions `samples` by how the biased `snapshot` classifies them.
pub fn partition_samples(
    snapshot: &Snapshot,
    mask: Option<&ChannelMask>,
    samples: &[SampleRecord],
    tau: f64,
    rule: HardSetRule,
) -> Result<SamplePartition, BiasError> {
    if samples.is_empty() {
        return Err(BiasError::EmptyDataset);
    }
    let preds = predictions(snapshot, mask, samples, 64)?;
    let head = snapshot.head();
    partition_predictions(head.task_id, &head.classes, &preds, tau, rule)
}

/// Population variance over all cells of a feature map.
pub fn spatial_variance(map: &[f64]) -> Result<f64, BiasError> {
    if map.len() < 2 {
        return Err(BiasError::TooSmall(map.len()));
    }
    let n = map.len() as f64;
    let mean = map.iter().sum::<f64>() / n;
    Ok(map.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Spatial variance of every scored unit for every sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnitVariances {
    pub units: Vec<UnitId>,
    pub per_sample: BTreeMap<SampleId, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasScoreTable {
    pub task_id: u32,
    #[serde(with = "per_class_entries")]
    pub per_class: BTreeMap<(usize, UnitId), f64>,
    pub averaged: BTreeMap<UnitId, f64>,
    /// Classes left out of the average for lack of an easy or hard sample.
    pub skipped_classes: Vec<usize>,
}

mod per_class_entries {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::subnet::UnitId;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        class: usize,
        unit: UnitId,
        score: f64,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<(usize, UnitId), f64>, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map.iter().map(|((class, unit), score)| Entry { class: *class, unit: *unit, score: *score }).collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(usize, UnitId), f64>, D::Error> {
        Ok(Vec::<Entry>::deserialize(d)?.into_iter().map(|e| ((e.class, e.unit), e.score)).collect())
    }
}

impl BiasScoreTable {
    /// Units in pruning order: descending averaged score. Among equal scores the
    /// higher id comes first, so ties leave the lowest ids kept.
    pub fn ranking(&self) -> Vec<UnitId> {
        let mut units: Vec<(UnitId, f64)> = self.averaged.iter().map(|(u, s)| (*u, *s)).collect();
        units.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
        units.into_iter().map(|(u, _)| u).collect()
    }

    /// CSV with columns `task,class,layer,channel,score`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["task", "class", "layer", "channel", "score"])?;
        for ((class, unit), score) in &self.per_class {
            w.write_record([
                self.task_id.to_string(),
                class.to_string(),
                unit.layer.to_string(),
                unit.channel.to_string(),
                score.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_variance(ids: &BTreeSet<SampleId>, variances: &UnitVariances, unit_idx: usize) -> Result<f64, BiasError> {
    let mut sum = 0.0;
    for id in ids {
        let v = variances.per_sample.get(id).ok_or(BiasError::MissingSample(*id))?;
        sum += v[unit_idx];
    }
    Ok(sum / ids.len() as f64)
}

/// Per-class score: mean easy-set variance minus mean hard-set variance; the unit
/// score is the unweighted mean over classes that have both sets.
pub fn scores_from_variances(partition: &SamplePartition, variances: &UnitVariances) -> Result<BiasScoreTable, BiasError> {
    let included = partition.scoreable_classes();
    if included.is_empty() {
        return Err(BiasError::Unscoreable(partition.task_id));
    }
    let skipped: Vec<usize> = partition.easy.keys().filter(|c| !included.contains(c)).copied().collect();
    if !skipped.is_empty() {
        log::info!("task {}: classes {skipped:?} lack easy or hard samples and are left out of the bias score", partition.task_id);
    }
    let mut per_class = BTreeMap::new();
    let mut averaged = BTreeMap::new();
    for (k, unit) in variances.units.iter().enumerate() {
        let mut total = 0.0;
        for c in &included {
            let s = mean_variance(&partition.easy[c], variances, k)? - mean_variance(&partition.hard[c], variances, k)?;
            per_class.insert((*c, *unit), s);
            total += s;
        }
        averaged.insert(*unit, total / included.len() as f64);
    }
    Ok(BiasScoreTable { task_id: partition.task_id, per_class, averaged, skipped_classes: skipped })
}

/// Spatial variances of every unit left on by `mask`, for the given samples.
pub fn unit_variances(snapshot: &Snapshot, mask: Option<&ChannelMask>, samples: &[&SampleRecord]) -> Result<UnitVariances, BiasError> {
    let cfg = snapshot.config();
    let full = ChannelMask::full(cfg);
    let mask_ref = mask.unwrap_or(&full);
    let units: Vec<UnitId> = mask_ref
        .kept
        .iter()
        .enumerate()
        .flat_map(|(l, ch)| ch.iter().enumerate().filter(|(_, k)| **k).map(move |(c, _)| UnitId::new(l, c)))
        .collect();
    let mut per_sample = BTreeMap::new();
    for chunk in samples.chunks(64) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|r| r.image.as_slice()).collect();
        let pass = snapshot.forward(Some(mask_ref), &imgs)?;
        for (s, r) in chunk.iter().enumerate() {
            let v = units
                .iter()
                .map(|u| spatial_variance(pass.activation(u.layer, u.channel, s)))
                .collect::<Result<Vec<_>, _>>()?;
            per_sample.insert(r.id, v);
        }
    }
    Ok(UnitVariances { units, per_sample })
}

/// Bias scores of every available unit from the snapshot's activations.
pub fn bias_scores(
    snapshot: &Snapshot,
    mask: Option<&ChannelMask>,
    partition: &SamplePartition,
    samples: &[SampleRecord],
) -> Result<BiasScoreTable, BiasError> {
    let wanted: BTreeSet<SampleId> = partition.easy.values().chain(partition.hard.values()).flatten().copied().collect();
    let chosen: Vec<&SampleRecord> = samples.iter().filter(|r| wanted.contains(&r.id)).collect();
    let variances = unit_variances(snapshot, mask, &chosen)?;
    scores_from_variances(partition, &variances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(id: u64, label: usize, predicted: usize, confidence: f64) -> Prediction {
        Prediction { id, label, predicted, confidence }
    }

    #[test]
    fn membership_by_definition() {
        let preds = [pred(0, 0, 0, 0.9), pred(1, 0, 0, 0.6), pred(2, 0, 1, 0.8), pred(3, 1, 1, 0.95), pred(4, 1, 0, 0.75)];
        let p = partition_predictions(1, &[0, 1], &preds, 0.7, HardSetRule::default()).unwrap();
        assert!(p.easy[&0].contains(&0));
        assert!(p.excluded.contains(&1));
        assert!(p.hard[&0].contains(&2));
        assert!(p.easy[&1].contains(&3));
        assert!(p.hard[&1].contains(&4));
    }

    #[test]
    fn empty_hard_set_falls_back_to_all_errors() {
        let preds = [pred(0, 0, 0, 0.9), pred(1, 0, 1, 0.55), pred(2, 1, 1, 0.9)];
        let p = partition_predictions(1, &[0, 1], &preds, 0.7, HardSetRule::ConfidentMisclassified).unwrap();
        assert_eq!(p.hard[&0], BTreeSet::from([1]));
        assert!(!p.excluded.contains(&1));
        assert!(p.hard[&1].is_empty());
        assert_eq!(p.scoreable_classes(), vec![0]);
    }

    #[test]
    fn partition_errors() {
        assert!(matches!(partition_predictions(1, &[0], &[], 0.7, HardSetRule::default()), Err(BiasError::EmptyDataset)));
        assert!(matches!(
            partition_predictions(1, &[0], &[pred(0, 0, 0, 0.9)], 0.4, HardSetRule::default()),
            Err(BiasError::InvalidTau(_))
        ));
    }

    #[test]
    fn variance_examples() {
        assert_eq!(spatial_variance(&[3.0; 6]).unwrap(), 0.0);
        assert_eq!(spatial_variance(&[0.0, 0.0, 2.0, 2.0]).unwrap(), 1.0);
        let m = [0.5, 1.5, 4.0, 2.0];
        let k = 3.0;
        let scaled: Vec<f64> = m.iter().map(|v| v * k).collect();
        assert!((spatial_variance(&scaled).unwrap() - k * k * spatial_variance(&m).unwrap()).abs() < 1e-12);
        assert!(matches!(spatial_variance(&[1.0]), Err(BiasError::TooSmall(1))));
    }

    fn one_class(easy: &[u64], hard: &[u64]) -> SamplePartition {
        SamplePartition {
            task_id: 1,
            easy: BTreeMap::from([(0, easy.iter().copied().collect())]),
            hard: BTreeMap::from([(0, hard.iter().copied().collect())]),
            excluded: BTreeSet::new(),
        }
    }

    #[test]
    fn hand_computed_score() {
        let u = UnitId::new(0, 0);
        let v = UnitVariances { units: vec![u], per_sample: BTreeMap::from([(0, vec![4.0]), (1, vec![2.0]), (2, vec![1.0])]) };
        let t = scores_from_variances(&one_class(&[0, 1], &[2]), &v).unwrap();
        assert_eq!(t.per_class[&(0, u)], 2.0);
        assert_eq!(t.averaged[&u], 2.0);
        let swapped = scores_from_variances(&one_class(&[0, 1], &[2]).swapped(), &v).unwrap();
        assert_eq!(swapped.per_class[&(0, u)], -2.0);
    }

    #[test]
    fn identical_distributions_score_zero() {
        let u = UnitId::new(1, 3);
        let v = UnitVariances { units: vec![u], per_sample: BTreeMap::from([(0, vec![1.5]), (1, vec![0.5]), (2, vec![1.5]), (3, vec![0.5])]) };
        let t = scores_from_variances(&one_class(&[0, 1], &[2, 3]), &v).unwrap();
        assert_eq!(t.averaged[&u], 0.0);
    }

    #[test]
    fn unscoreable_without_pairs() {
        let v = UnitVariances { units: vec![UnitId::new(0, 0)], per_sample: BTreeMap::from([(0, vec![1.0])]) };
        assert!(matches!(scores_from_variances(&one_class(&[0], &[]), &v), Err(BiasError::Unscoreable(1))));
    }

    #[test]
    fn ranking_breaks_ties_by_unit() {
        let averaged = BTreeMap::from([(UnitId::new(1, 0), 1.0), (UnitId::new(0, 1), 1.0), (UnitId::new(0, 0), 2.0)]);
        let t = BiasScoreTable { task_id: 1, per_class: BTreeMap::new(), averaged, skipped_classes: vec![] };
        assert_eq!(t.ranking(), vec![UnitId::new(0, 0), UnitId::new(1, 0), UnitId::new(0, 1)]);
    }

    #[test]
    fn csv_dump_has_fixed_columns() {
        let u = UnitId::new(0, 2);
        let t = BiasScoreTable { task_id: 2, per_class: BTreeMap::from([((5, u), 0.25)]), averaged: BTreeMap::from([(u, 0.25)]), skipped_classes: vec![] };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "task,class,layer,channel,score\n2,5,0,2,0.25\n");
    }

    proptest! {
        #[test]
        fn order_free_and_antisymmetric(vals in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 4..12), split in 1usize..3) {
            let units = vec![UnitId::new(0, 0), UnitId::new(0, 1)];
            let per_sample: BTreeMap<u64, Vec<f64>> = vals.iter().enumerate().map(|(i, (a, b))| (i as u64, vec![*a, *b])).collect();
            let v = UnitVariances { units: units.clone(), per_sample };
            let ids: Vec<u64> = (0..vals.len() as u64).collect();
            let (e, h) = ids.split_at(split);
            let p = one_class(e, h);
            let t = scores_from_variances(&p, &v).unwrap();
            let mut e_rev = e.to_vec();
            e_rev.reverse();
            let t_rev = scores_from_variances(&one_class(&e_rev, h), &v).unwrap();
            prop_assert_eq!(&t, &t_rev);
            let s = scores_from_variances(&p.swapped(), &v).unwrap();
            for (k, val) in &t.per_class {
                prop_assert_eq!(s.per_class[k], -val);
            }
            // Shifting every score by a constant keeps the ranking.
            let mut shifted = t.clone();
            for val in shifted.averaged.values_mut() {
                *val += 3.25;
            }
            prop_assert_eq!(shifted.ranking(), t.ranking());
        }
    }
}
