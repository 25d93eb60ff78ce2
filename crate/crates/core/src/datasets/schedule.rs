use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetIndex;
use crate::error::{Error, Result};

/// Ordered, pairwise disjoint class groups, one per incremental task.
///
/// Task indices are zero-based. Classes are stored as the dataset's own ids;
/// global ids are positions in the concatenation of all groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    tasks: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn new(tasks: Vec<Vec<usize>>) -> Result<Self> {
        if tasks.is_empty() || tasks.iter().any(|t| t.is_empty()) {
            return Err(Error::Config("a task schedule needs at least one non-empty task".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (t, group) in tasks.iter().enumerate() {
            for &c in group {
                if !seen.insert(c) {
                    return Err(Error::Config(format!("class {c} appears twice (again in task {t})")));
                }
            }
        }
        Ok(Self { tasks })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[Vec<usize>] {
        &self.tasks
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(Vec::len).collect()
    }

    /// Number of classes seen once task `t` is done.
    pub fn q_after(&self, t: usize) -> usize {
        self.tasks[..=t].iter().map(Vec::len).sum()
    }

    /// Number of classes seen before task `t` starts.
    pub fn q_before(&self, t: usize) -> usize {
        self.tasks[..t].iter().map(Vec::len).sum()
    }

    /// Global ids introduced by task `t`.
    pub fn range(&self, t: usize) -> Range<usize> {
        self.q_before(t)..self.q_after(t)
    }

    pub fn global_id(&self, class: usize) -> Option<usize> {
        let mut offset = 0;
        for group in &self.tasks {
            if let Some(i) = group.iter().position(|&c| c == class) {
                return Some(offset + i);
            }
            offset += group.len();
        }
        None
    }

    /// Task that introduced global id `g`.
    pub fn task_of(&self, g: usize) -> Option<usize> {
        let mut hi = 0;
        for (t, group) in self.tasks.iter().enumerate() {
            hi += group.len();
            if g < hi {
                return Some(t);
            }
        }
        None
    }

    /// Samples of tasks `tasks`, relabeled to global ids.
    pub fn relabel(&self, index: &DatasetIndex, tasks: Range<usize>) -> DatasetIndex {
        let lo = self.q_before(tasks.start);
        let hi = self.q_before(tasks.end);
        let mut class_names = Vec::with_capacity(hi - lo);
        for group in &self.tasks[tasks.clone()] {
            for &c in group {
                class_names.push(index.class_name(c).map(str::to_owned).unwrap_or_else(|| c.to_string()));
            }
        }
        let samples = index
            .samples
            .iter()
            .filter_map(|s| {
                let g = self.global_id(s.label)?;
                (lo..hi).contains(&g).then(|| super::Sample {
                    id: s.id,
                    source: s.source.clone(),
                    label: g,
                })
            })
            .collect();
        DatasetIndex {
            name: index.name.clone(),
            split: index.split,
            image_shape: index.image_shape,
            classes: (lo..hi).collect(),
            class_names,
            samples,
        }
    }
}

/// Splits `classes` into `num_tasks` groups of `per_task`.
///
/// With `seed = Some(s)` the classes are shuffled by `s` first; `None` keeps
/// the given order. Surplus classes are left out.
pub fn build_task_schedule(classes: &[usize], num_tasks: usize, per_task: usize, seed: Option<u64>) -> Result<TaskSchedule> {
    if num_tasks == 0 || per_task == 0 {
        return Err(Error::Config("tasks and classes per task must be positive".into()));
    }
    let needed = num_tasks * per_task;
    if needed > classes.len() {
        return Err(Error::Config(format!(
            "{num_tasks} tasks of {per_task} classes need {needed} classes, dataset has {}",
            classes.len()
        )));
    }
    let mut order = classes.to_vec();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let tasks = order[..needed].chunks(per_task).map(<[usize]>::to_vec).collect();
    TaskSchedule::new(tasks)
}
