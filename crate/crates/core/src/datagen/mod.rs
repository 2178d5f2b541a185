//! Task streams of labelled images with a sensitive attribute: a synthetic generator
//! with controllable label/attribute correlation, Cramér's V, and CSV ingestion.

mod ingest;
mod stats;
mod synth;
mod tensor_file;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use ingest::{ingest_csv, write_stream, IngestError, RowError, METADATA_HEADER};
pub use stats::cramers_v;
pub use synth::{aligned_group, generate, BiasSpec, RenderSpec, SplitSizes, IMAGE_SHAPE};
pub use tensor_file::{read_tensor, write_tensor};

use crate::SampleId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: SampleId,
    /// `[c][h][w]`, values in [0, 1].
    pub image: Vec<f32>,
    /// Global class id.
    pub label: usize,
    pub attribute: usize,
    pub task_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(token: &str) -> Option<Split> {
        match token {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub task_id: u32,
    /// Global class ids owned by this task, ascending.
    pub classes: Vec<usize>,
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &[SampleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub input_shape: (usize, usize, usize),
    pub num_groups: usize,
    /// Ordered by task id.
    pub tasks: Vec<TaskData>,
}

impl TaskStream {
    pub fn task(&self, task_id: u32) -> Option<&TaskData> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn task_ids(&self) -> Vec<u32> {
        self.tasks.iter().map(|t| t.task_id).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.tasks.iter().flat_map(|t| t.classes.iter()).max().map_or(0, |m| m + 1)
    }

    /// True when no class belongs to two tasks.
    pub fn classes_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.tasks.iter().flat_map(|t| t.classes.iter()).all(|c| seen.insert(*c))
    }

    pub fn records(&self) -> impl Iterator<Item = (&TaskData, Split, &SampleRecord)> {
        self.tasks.iter().flat_map(|t| {
            [Split::Train, Split::Val, Split::Test]
                .into_iter()
                .flat_map(move |s| t.split(s).iter().map(move |r| (t, s, r)))
        })
    }
}

/// Bias-conflicting: the attribute differs from the group aligned with the label.
pub fn is_bias_conflicting(task: &TaskData, record: &SampleRecord, num_groups: usize) -> bool {
    let local = task.classes.iter().position(|c| *c == record.label).unwrap_or(0);
    record.attribute != aligned_group(local, num_groups)
}
