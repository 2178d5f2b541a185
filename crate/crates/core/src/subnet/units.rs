use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::nn::{ChannelMask, NetworkConfig, ParamStore, TaskHead};

use super::SubnetError;

/// A prunable unit: one conv output channel together with the filter producing it.
/// Serialized as its display form, e.g. `L1C7`, so it can key JSON maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnitId {
    pub layer: usize,
    pub channel: usize,
}

impl UnitId {
    pub fn new(layer: usize, channel: usize) -> Self {
        Self { layer, channel }
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}C{}", self.layer, self.channel)
    }
}

impl std::str::FromStr for UnitId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad unit id {s:?}");
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (l, c) = rest.split_once('C').ok_or_else(bad)?;
        Ok(UnitId::new(l.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?))
    }
}

impl Serialize for UnitId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UnitId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn all_units(config: &NetworkConfig) -> Vec<UnitId> {
    config
        .conv_layers
        .iter()
        .enumerate()
        .flat_map(|(l, spec)| (0..spec.out_channels).map(move |c| UnitId::new(l, c)))
        .collect()
}

/// The subnetwork f_t of one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMask {
    pub task_id: u32,
    pub mask: ChannelMask,
}

impl TaskMask {
    pub fn kept_units(&self) -> BTreeSet<UnitId> {
        self.mask
            .kept
            .iter()
            .enumerate()
            .flat_map(|(l, ch)| ch.iter().enumerate().filter(|(_, k)| **k).map(move |(c, _)| UnitId::new(l, c)))
            .collect()
    }

    pub fn keeps(&self, unit: UnitId) -> bool {
        self.mask.kept.get(unit.layer).and_then(|l| l.get(unit.channel)).copied().unwrap_or(false)
    }
}

/// Which committed tasks own each unit. A unit with no owner is free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitRegistry {
    channels: Vec<usize>,
    memberships: BTreeMap<UnitId, BTreeSet<u32>>,
    committed: BTreeSet<u32>,
}

impl UnitRegistry {
    pub fn new(config: &NetworkConfig) -> Self {
        Self {
            channels: config.channels_per_layer(),
            memberships: all_units(config).into_iter().map(|u| (u, BTreeSet::new())).collect(),
            committed: BTreeSet::new(),
        }
    }

    pub fn units(&self) -> impl Iterator<Item = UnitId> + '_ {
        self.memberships.keys().copied()
    }

    pub fn num_units(&self) -> usize {
        self.memberships.len()
    }

    pub fn memberships(&self, unit: UnitId) -> Option<&BTreeSet<u32>> {
        self.memberships.get(&unit)
    }

    pub fn is_frozen(&self, unit: UnitId) -> bool {
        self.memberships.get(&unit).is_some_and(|m| !m.is_empty())
    }

    pub fn free_units(&self) -> Vec<UnitId> {
        self.memberships.iter().filter(|(_, m)| m.is_empty()).map(|(u, _)| *u).collect()
    }

    pub fn committed_tasks(&self) -> &BTreeSet<u32> {
        &self.committed
    }

    /// Mask with only free units switched on.
    pub fn free_mask(&self) -> ChannelMask {
        let mut kept: Vec<Vec<bool>> = self.channels.iter().map(|c| vec![false; *c]).collect();
        for u in self.free_units() {
            kept[u.layer][u.channel] = true;
        }
        ChannelMask { kept }
    }

    /// Records ownership of every kept unit, freezes their filters and the task head.
    /// Pruned free units stay in the free pool.
    pub fn commit_task(&mut self, mask: &TaskMask, store: &mut ParamStore, head: &mut TaskHead) -> Result<(), SubnetError> {
        if self.committed.contains(&mask.task_id) {
            return Err(SubnetError::State(format!("task {} is already committed", mask.task_id)));
        }
        if head.task_id != mask.task_id {
            return Err(SubnetError::State(format!("head of task {} committed with mask of task {}", head.task_id, mask.task_id)));
        }
        if mask.mask.kept.len() != self.channels.len()
            || mask.mask.kept.iter().zip(&self.channels).any(|(m, c)| m.len() != *c)
        {
            return Err(SubnetError::Config("mask does not match the network".into()));
        }
        for unit in mask.kept_units() {
            self.memberships.get_mut(&unit).expect("unit in range").insert(mask.task_id);
            store.layers[unit.layer].freeze_channel(unit.channel);
        }
        head.frozen = true;
        self.committed.insert(mask.task_id);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (NetworkConfig, ParamStore, UnitRegistry) {
        let cfg = NetworkConfig::default();
        let store = ParamStore::init(&cfg).unwrap();
        let reg = UnitRegistry::new(&cfg);
        (cfg, store, reg)
    }

    #[test]
    fn unit_ids_serialize_as_strings() {
        let u = UnitId::new(1, 7);
        assert_eq!(serde_json::to_string(&u).unwrap(), "\"L1C7\"");
        assert_eq!(serde_json::from_str::<UnitId>("\"L1C7\"").unwrap(), u);
        assert!("L1X7".parse::<UnitId>().is_err());
        let (_, _, reg) = setup();
        let back: UnitRegistry = serde_json::from_str(&serde_json::to_string(&reg).unwrap()).unwrap();
        assert_eq!(back, reg);
    }

    fn mask_of(cfg: &NetworkConfig, task_id: u32, units: &[UnitId]) -> TaskMask {
        let mut mask = ChannelMask::empty(cfg);
        for u in units {
            mask.kept[u.layer][u.channel] = true;
        }
        TaskMask { task_id, mask }
    }

    #[test]
    fn commit_freezes_kept_units_only() {
        let (cfg, mut store, mut reg) = setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut head = crate::nn::TaskHead::new(&cfg, 1, vec![0, 1], &mut rng);
        let (u1, u3) = (UnitId::new(0, 1), UnitId::new(1, 3));
        reg.commit_task(&mask_of(&cfg, 1, &[u1, u3]), &mut store, &mut head).unwrap();
        assert!(reg.is_frozen(u1) && reg.is_frozen(u3));
        assert_eq!(reg.free_units().len(), 22);
        assert!(store.layers[0].channel_fully_frozen(1));
        assert!(!store.layers[0].channel_fully_frozen(0));
        assert!(head.frozen);

        let mut head2 = crate::nn::TaskHead::new(&cfg, 2, vec![2, 3], &mut rng);
        reg.commit_task(&mask_of(&cfg, 2, &[u1, UnitId::new(0, 0)]), &mut store, &mut head2).unwrap();
        assert_eq!(reg.memberships(u1).unwrap(), &BTreeSet::from([1, 2]));
        assert_eq!(reg.free_units().len(), 21);
    }

    #[test]
    fn double_commit_is_rejected() {
        let (cfg, mut store, mut reg) = setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut head = crate::nn::TaskHead::new(&cfg, 1, vec![0, 1], &mut rng);
        let m = mask_of(&cfg, 1, &[UnitId::new(0, 0)]);
        reg.commit_task(&m, &mut store, &mut head).unwrap();
        assert!(matches!(reg.commit_task(&m, &mut store, &mut head), Err(SubnetError::State(_))));
    }
}
