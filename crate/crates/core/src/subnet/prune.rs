use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::bias::BiasScoreTable;
use crate::nn::{ChannelMask, NetworkConfig};

use super::{SubnetError, TaskMask, UnitId};

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub mask: TaskMask,
    pub pruned: BTreeSet<UnitId>,
    /// Units returned to the mask to keep at least one channel per layer.
    pub restored: Vec<UnitId>,
}

/// ⌊γ·n⌋, tolerant of γ·n landing a hair below an integer.
pub fn prune_count(gamma: f64, n: usize) -> usize {
    ((gamma * n as f64) + 1e-9).floor() as usize
}

/// Removes the top ⌊γ·N⌋ units of the global ranking, where N is the number of
/// scored units. A layer left without any kept unit gets back its lowest-ranked
/// pruned unit. Units absent from `table` are not part of the mask.
pub fn prune_to_mask(table: &BiasScoreTable, gamma: f64, config: &NetworkConfig) -> Result<PruneOutcome, SubnetError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(SubnetError::Config(format!("gamma = {gamma} outside (0, 1)")));
    }
    let ranking = table.ranking();
    let n_prune = prune_count(gamma, ranking.len());
    let mut pruned: BTreeSet<UnitId> = ranking[..n_prune].iter().copied().collect();
    let mut mask = ChannelMask::empty(config);
    for u in &ranking[n_prune..] {
        *mask
            .kept
            .get_mut(u.layer)
            .and_then(|l| l.get_mut(u.channel))
            .ok_or_else(|| SubnetError::Config(format!("unit {u} outside the network")))? = true;
    }
    let mut restored = Vec::new();
    let available_layers: BTreeSet<usize> = ranking.iter().map(|u| u.layer).collect();
    for (layer, kept) in mask.kept.iter_mut().enumerate() {
        if kept.iter().any(|k| *k) {
            continue;
        }
        if !available_layers.contains(&layer) {
            return Err(SubnetError::Exhausted(layer));
        }
        // Last pruned unit of this layer in ranking order = lowest score.
        let demoted = *ranking[..n_prune].iter().rev().find(|u| u.layer == layer).expect("layer has pruned units");
        kept[demoted.channel] = true;
        pruned.remove(&demoted);
        restored.push(demoted);
    }
    Ok(PruneOutcome { mask: TaskMask { task_id: table.task_id, mask }, pruned, restored })
}

/// Uniform random scores over `units`, for the random-pruning ablation.
pub fn random_scores(task_id: u32, units: &[UnitId], rng: &mut impl Rng) -> BiasScoreTable {
    BiasScoreTable {
        task_id,
        per_class: BTreeMap::new(),
        averaged: units.iter().map(|u| (*u, rng.gen::<f64>())).collect(),
        skipped_classes: Vec::new(),
    }
}
