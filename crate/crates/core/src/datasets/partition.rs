use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::DatasetIndex;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    /// Dirichlet concentration.
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("number of clients must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("dirichlet alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One client's training samples for one task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub task: usize,
    pub sample_ids: Vec<u64>,
}

/// Integer counts summing to `total`, proportional to `weights`, by
/// largest remainder. Ties go to the lower index.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet<R: Rng>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        return draws;
    }
    // Every draw underflowed (tiny alpha): all mass on one client.
    let mut one = vec![0.0; n];
    one[rng.random_range(0..n)] = 1.0;
    one
}

/// Distributes each class of `task_data` over clients with proportions drawn
/// from a symmetric Dirichlet. Returns one shard per client, possibly empty.
pub fn partition_task(task_data: &DatasetIndex, task: usize, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    if task_data.is_empty() {
        return Err(Error::Invalid(format!("task {task} has no training samples")));
    }
    let mut rng = seed::rng(spec.seed, &[seed::PARTITION, task as u64]);
    let mut shards: Vec<ClientShard> = (0..spec.num_clients)
        .map(|client_id| ClientShard {
            client_id,
            task,
            sample_ids: Vec::new(),
        })
        .collect();
    for &class in &task_data.classes {
        let mut ids: Vec<u64> = task_data.samples.iter().filter(|s| s.label == class).map(|s| s.id).collect();
        ids.shuffle(&mut rng);
        let props = dirichlet(spec.alpha, spec.num_clients, &mut rng);
        let counts = apportion(ids.len(), &props);
        let mut next = 0;
        for (shard, n) in shards.iter_mut().zip(counts) {
            shard.sample_ids.extend_from_slice(&ids[next..next + n]);
            next += n;
        }
    }
    for shard in &mut shards {
        shard.sample_ids.sort_unstable();
    }
    Ok(shards)
}
