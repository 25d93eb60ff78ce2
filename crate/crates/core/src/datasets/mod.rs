//! Dataset indexes, incremental task schedules and client partitioning.
//!
//! An index lists samples and where their pixels live; decoding is deferred
//! to [`ImageBank`]. Labels in a raw index are the dataset's own class ids.
//! [`TaskSchedule::relabel`] maps them to contiguous global ids in task
//! order, so the classes of task `t` occupy `[q_{t-1}, q_t)`.

mod loaders;
mod partition;
mod procedural;
mod schedule;
mod superimagenet;

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loaders::{dataset_image_shape, load_dataset, ImageBank, LocalData};
pub use partition::{apportion, partition_task, ClientShard, PartitionSpec};
pub use procedural::{Procedural, SYNTH10};
pub use schedule::{build_task_schedule, TaskSchedule};
pub use superimagenet::{
    build_superimagenet, read_manifest, write_manifest, ManifestHeader, SuperClassMapping, SuperVersion,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" | "val" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

/// Where a sample's pixels come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    /// Raw bytes at `offset` inside a binary record file.
    Record { file: PathBuf, offset: u64 },
    /// An encoded image file.
    Image(PathBuf),
    /// Rendered on demand by the procedural generator.
    Procedural { class: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub source: Source,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub name: String,
    pub split: Split,
    /// Per-sample `[channels, height, width]`.
    pub image_shape: [usize; 3],
    pub classes: Vec<usize>,
    /// Human-readable name per entry of `classes`.
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl DatasetIndex {
    /// Checks label membership and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.classes.len() {
            return Err(Error::Invalid(format!(
                "{}: {} class names for {} classes",
                self.name,
                self.class_names.len(),
                self.classes.len()
            )));
        }
        let classes: HashSet<usize> = self.classes.iter().copied().collect();
        if classes.len() != self.classes.len() {
            return Err(Error::Invalid(format!("{}: duplicate class ids", self.name)));
        }
        let mut ids = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !classes.contains(&s.label) {
                return Err(Error::Invalid(format!(
                    "{}: sample {} has label {} outside the class list",
                    self.name, s.id, s.label
                )));
            }
            if !ids.insert(s.id) {
                return Err(Error::Invalid(format!("{}: duplicate sample id {}", self.name, s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample count per entry of `classes`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            if let Some(i) = self.classes.iter().position(|&c| c == s.label) {
                counts[i] += 1;
            }
        }
        counts
    }

    pub fn class_name(&self, class: usize) -> Option<&str> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map(|i| self.class_names[i].as_str())
    }

    /// Keeps at most `cap` samples of each class, in index order.
    pub fn truncate_per_class(&mut self, cap: usize) {
        let mut seen = std::collections::HashMap::new();
        self.samples.retain(|s| {
            let n = seen.entry(s.label).or_insert(0usize);
            *n += 1;
            *n <= cap
        });
    }
}
