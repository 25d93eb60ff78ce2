//! Federated rounds: client selection, aggregation and the task loop.

mod report;
mod run;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::client_update::ClientUpdate;
use crate::error::{Error, Result};
use crate::generative_replay::GenLosses;
use crate::metrics::{SeenEval, TimingRecord};
use crate::model_zoo::GlobalClassifier;

pub use report::{build_report, write_summary, MeanStd, Report, RunManifest, RunStatus, Summary};
pub use run::{run_all, run_experiment, RunOptions, RunOutcome, RunPaths};

/// `k` distinct client ids drawn uniformly from `0..n`, sorted.
pub fn select_clients<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::Config(format!("cannot select {k} of {n} clients")));
    }
    let mut ids = index::sample(rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Sample-count weighted mean of the updates' parameters and buffers.
///
/// Updates with no samples get weight zero; if every weight is zero the
/// current model is returned. Summation runs in update order, and each
/// result is clamped to the range of the contributing values so that
/// identical inputs come back bit for bit.
pub fn aggregate(current: &GlobalClassifier, updates: &[ClientUpdate]) -> Result<GlobalClassifier> {
    for u in updates {
        if !u.params.same_layout(&current.params) {
            return Err(Error::Shape(format!(
                "client {} returned parameters that do not match the global model",
                u.client_id
            )));
        }
    }
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Ok(current.clone());
    }
    let contributing: Vec<(f64, &ClientUpdate)> = updates
        .iter()
        .filter(|u| u.num_samples > 0)
        .map(|u| (u.num_samples as f64 / total as f64, u))
        .collect();
    let mut out = current.clone();
    for (i, param) in out.params.entries_mut().iter_mut().enumerate() {
        let data = param.tensor.data_mut();
        for (k, slot) in data.iter_mut().enumerate() {
            let mut acc = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (w, u) in &contributing {
                let v = u.params.entries()[i].tensor.data()[k];
                acc += w * v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            *slot = acc.clamp(lo, hi);
        }
    }
    Ok(out)
}

/// One federated round as written to the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub task: usize,
    pub round: usize,
    pub selected: Vec<usize>,
    /// Selected clients that did not report back.
    pub dropped: Vec<usize>,
    pub lr: f64,
    pub samples: usize,
    pub mean_loss: f64,
    pub server_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<SeenEval>,
}

/// A line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Round(RoundRecord),
    GeneratorIter {
        task: usize,
        iteration: usize,
        #[serde(flatten)]
        losses: GenLosses,
    },
    TaskEval {
        task: usize,
        seen: f64,
        per_task: Vec<f64>,
    },
    Timing(TimingRecord),
}
