use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::RunPaths;
use super::LogRecord;
use crate::client_update::Strategy;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{average_accuracy, average_forgetting, mean_std, read_log, summarize_timing, AccuracyMatrix, PhaseTiming};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Stopped,
    Completed,
    Failed,
}

/// Which repetition a run directory holds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct RunInfo {
    pub seed_index: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Final numbers of one seed, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset: String,
    pub strategy: Strategy,
    pub seed_index: usize,
    pub seed: u64,
    pub config_hash: String,
    pub average_accuracy: f64,
    /// Absent for single-task runs.
    pub average_forgetting: Option<f64>,
    pub seen_accuracy: Vec<f64>,
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub timing: Vec<PhaseTiming>,
}

fn pct(v: f64) -> f64 {
    100.0 * v
}

/// Rebuilds a seed's report from its run directory alone.
pub fn build_report(dir: &Path) -> Result<Report> {
    let paths = RunPaths::new(dir);
    let config = ExperimentConfig::load(&paths.config(), &[])?;
    let info_text = fs::read_to_string(paths.info()).map_err(|e| Error::io(&paths.info(), e))?;
    let info: RunInfo = serde_json::from_str(&info_text)?;
    let matrix = AccuracyMatrix::load(&paths.matrix())?;
    if matrix.num_tasks() != config.num_tasks {
        return Err(Error::Missing(format!(
            "{} holds {} of {} task evaluations",
            paths.matrix().display(),
            matrix.num_tasks(),
            config.num_tasks
        )));
    }
    let records: Vec<LogRecord> = read_log(&paths.metrics())?;
    let timing: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Timing(t) => Some(*t),
            _ => None,
        })
        .collect();
    Ok(Report {
        dataset: config.dataset.clone(),
        strategy: config.strategy,
        seed_index: info.seed_index,
        seed: info.seed,
        config_hash: info.config_hash,
        average_accuracy: pct(average_accuracy(&matrix)?),
        average_forgetting: if matrix.num_tasks() > 1 { Some(pct(average_forgetting(&matrix)?)) } else { None },
        seen_accuracy: matrix.seen.iter().copied().map(pct).collect(),
        accuracy_matrix: matrix.rows.iter().map(|r| r.iter().copied().map(pct).collect()).collect(),
        timing: summarize_timing(&timing),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Option<Self> {
        mean_std(values).map(|(mean, std)| Self { mean, std })
    }
}

/// Mean and standard deviation across seeds, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dataset: String,
    pub strategy: Strategy,
    pub config_hash: String,
    pub seeds: usize,
    pub average_accuracy: MeanStd,
    pub average_forgetting: Option<MeanStd>,
    pub seen_accuracy: Vec<MeanStd>,
}

impl Summary {
    pub fn from_reports(reports: &[Report]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Missing("seed reports".into()))?;
        if reports.iter().any(|r| r.config_hash != first.config_hash) {
            return Err(Error::Invalid("reports come from different configurations".into()));
        }
        let acc: Vec<f64> = reports.iter().map(|r| r.average_accuracy).collect();
        let forget: Option<Vec<f64>> = reports.iter().map(|r| r.average_forgetting).collect();
        let tasks = first.seen_accuracy.len();
        let seen = (0..tasks)
            .map(|t| {
                let v: Vec<f64> = reports.iter().filter_map(|r| r.seen_accuracy.get(t).copied()).collect();
                MeanStd::of(&v).expect("at least one report")
            })
            .collect();
        Ok(Self {
            dataset: first.dataset.clone(),
            strategy: first.strategy,
            config_hash: first.config_hash.clone(),
            seeds: reports.len(),
            average_accuracy: MeanStd::of(&acc).expect("at least one report"),
            average_forgetting: forget.as_deref().and_then(MeanStd::of),
            seen_accuracy: seen,
        })
    }
}

pub fn write_summary(out: &Path, reports: &[Report]) -> Result<Summary> {
    let summary = Summary::from_reports(reports)?;
    let path = out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// `manifest.json` at the top of an output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub dataset: String,
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub status: RunStatus,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        let hash = config.hash();
        Self {
            run_id: format!("{}-{}-{}", config.dataset, config.strategy, &hash[..12]),
            config_hash: hash,
            dataset: config.dataset.clone(),
            strategy: config.strategy,
            seeds: (0..config.num_seeds).map(|i| config.run_seed(i)).collect(),
            status: RunStatus::Running,
            artifacts: Vec::new(),
        }
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let path = out.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
