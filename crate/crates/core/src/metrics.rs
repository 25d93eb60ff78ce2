//! Per-task accuracies, forgetting, timing summaries and the run log.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetIndex, ImageBank, TaskSchedule};
use crate::error::{Error, Result};
use crate::model_zoo::GlobalClassifier;

const EVAL_CHUNK: usize = 256;

/// `rows[i][j]`: accuracy on task `j`'s test classes after training task `i`
/// (`j <= i`). `seen[i]`: accuracy over every class seen up to task `i`.
/// Fractions in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
    pub seen: Vec<f64>,
}

fn check_fraction(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("accuracy {v} outside [0, 1]")))
    }
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the evaluation after the next task.
    pub fn push(&mut self, row: Vec<f64>, seen: f64) -> Result<()> {
        let i = self.rows.len();
        if row.len() != i + 1 {
            return Err(Error::Invalid(format!("row {i} needs {} entries, got {}", i + 1, row.len())));
        }
        row.iter().copied().chain([seen]).try_for_each(check_fraction)?;
        self.rows.push(row);
        self.seen.push(seen);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i)?.get(j).copied()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.seen.len() {
            return Err(Error::Invalid(format!(
                "{} rows but {} seen-class accuracies",
                self.rows.len(),
                self.seen.len()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::Invalid(format!("row {i} has {} entries, expected {}", row.len(), i + 1)));
            }
            row.iter().try_for_each(|&v| check_fraction(v))?;
        }
        self.seen.iter().try_for_each(|&v| check_fraction(v))
    }

    /// Pretty JSON with a trailing newline. Identical matrices give
    /// identical bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("matrix serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Accuracy after one task: over all seen classes and per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeenEval {
    pub seen: f64,
    pub per_task: Vec<f64>,
}

/// Evaluates `model` on the test samples of tasks `0..=t` with `q_after(t)`-way
/// prediction. `test` holds original dataset labels.
pub fn eval_seen_classes(
    model: &GlobalClassifier,
    bank: &ImageBank,
    test: &DatasetIndex,
    schedule: &TaskSchedule,
    t: usize,
) -> Result<SeenEval> {
    if t >= schedule.num_tasks() {
        return Err(Error::Invalid(format!("task {t} beyond a {}-task schedule", schedule.num_tasks())));
    }
    let q = schedule.q_after(t);
    if model.num_classes() != q {
        return Err(Error::Invalid(format!(
            "model head has {} classes but {q} are seen after task {t}",
            model.num_classes()
        )));
    }
    let seen = schedule.relabel(test, 0..t + 1);
    let mut correct = vec![0usize; t + 1];
    let mut total = vec![0usize; t + 1];
    for chunk in seen.samples.chunks(EVAL_CHUNK) {
        let x = bank.batch(chunk)?;
        let pred = model.predict(&x, q)?;
        for (s, p) in chunk.iter().zip(pred) {
            let task = schedule.task_of(s.label).expect("relabeled ids belong to the schedule");
            total[task] += 1;
            correct[task] += usize::from(p == s.label);
        }
    }
    let n: usize = total.iter().sum();
    if n == 0 {
        return Err(Error::Missing(format!("test samples for tasks 0..={t}")));
    }
    let per_task = correct
        .iter()
        .zip(&total)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    Ok(SeenEval {
        seen: correct.iter().sum::<usize>() as f64 / n as f64,
        per_task,
    })
}

/// Mean of the seen-class accuracies.
pub fn average_accuracy(matrix: &AccuracyMatrix) -> Result<f64> {
    if matrix.seen.is_empty() {
        return Err(Error::Missing("seen-class accuracies".into()));
    }
    matrix.validate()?;
    Ok(matrix.seen.iter().sum::<f64>() / matrix.seen.len() as f64)
}

/// `f[j] = max_{i >= j} a[i][j] - a[T-1][j]` for every task but the last.
pub fn per_task_forgetting(matrix: &AccuracyMatrix) -> Result<Vec<f64>> {
    matrix.validate()?;
    let t = matrix.num_tasks();
    if t < 2 {
        return Err(Error::Invalid(format!("forgetting needs at least two tasks, got {t}")));
    }
    let last = &matrix.rows[t - 1];
    Ok((0..t - 1)
        .map(|j| {
            let peak = matrix.rows[j..].iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            peak - last[j]
        })
        .collect())
}

pub fn average_forgetting(matrix: &AccuracyMatrix) -> Result<f64> {
    let f = per_task_forgetting(matrix)?;
    Ok(f.iter().sum::<f64>() / f.len() as f64)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    ClientTrain,
    ServerAggregate,
    GeneratorTrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub phase: Phase,
    pub task: usize,
    pub round: usize,
    pub seconds: f64,
}

/// Mean seconds of one phase on the first task and on later tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: Phase,
    pub first_task: Option<f64>,
    pub later_tasks: Option<f64>,
    pub count: usize,
}

/// Groups by phase; phases without records are left out.
pub fn summarize_timing(records: &[TimingRecord]) -> Vec<PhaseTiming> {
    let mut groups: BTreeMap<Phase, [(f64, usize); 2]> = BTreeMap::new();
    for r in records {
        let slot = &mut groups.entry(r.phase).or_default()[usize::from(r.task > 0)];
        slot.0 += r.seconds;
        slot.1 += 1;
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    groups
        .into_iter()
        .map(|(phase, [first, later])| PhaseTiming {
            phase,
            first_task: mean(first),
            later_tasks: mean(later),
            count: first.1 + later.1,
        })
        .collect()
}

/// Append-only line-delimited JSON sink. Appends from several threads are
/// serialized.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl MetricsLog {
    /// Opens for appending, creating the file. With `truncate_to` the file is
    /// first cut back to that many bytes.
    pub fn open(path: &Path, truncate_to: Option<u64>) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if let Some(len) = truncate_to {
            let current = file.metadata().map_err(|e| Error::io(path, e))?.len();
            if len > current {
                return Err(Error::Checkpoint(format!(
                    "metrics log {} has {current} bytes, checkpoint expects at least {len}",
                    path.display()
                )));
            }
            file.set_len(len).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }

    /// Current length in bytes, after flushing.
    pub fn len(&self) -> Result<u64> {
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(file.metadata().map_err(|e| Error::io(&self.path, e))?.len())
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}

/// Parses every line of a metrics log.
pub fn read_log<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}
