//! Declarative experiment configuration.
//!
//! A config file only needs `dataset` and `strategy`; everything else falls
//! back to per-dataset defaults. Keys may be overridden with dotted
//! `key=value` pairs (`client.lr=0.05`) before resolution.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client_update::{ClientLossWeights, LocalTrainConfig, Strategy};
use crate::error::{Error, Result};
use crate::generative_replay::{GenLossWeights, GenTrainConfig};
use crate::model_zoo::ARCHITECTURES;

/// Datasets a run can use.
pub const DATASETS: [&str; 5] = ["cifar10", "cifar100", "tinyimagenet", "superimagenet", "synth10"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    /// Dirichlet concentration.
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub synthetic_batch_size: usize,
    /// Learning rate in the first round of every task.
    pub lr: f64,
    /// Learning rate in the last round of every task; exponential in between.
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub w_ft: f64,
    pub w_kd: f64,
    pub prox_mu: f64,
    pub lwf_temperature: f64,
    pub lwf_local_weight: f64,
    pub lwf_global_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub z_dim: usize,
    pub lr: f64,
    pub w_div: f64,
    pub w_bn: f64,
    pub w_prior: f64,
    pub warm_start: bool,
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub strategy: Strategy,
    pub arch: String,
    pub data_root: PathBuf,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub rounds: usize,
    /// Master seed; seed `i` of a run derives its streams from this.
    pub seed: u64,
    pub num_seeds: usize,
    /// Shuffle the class order per seed instead of using dataset order.
    pub shuffle_classes: bool,
    /// Also evaluate every this many rounds; 0 evaluates at task ends only.
    pub eval_every: usize,
    /// Probability that a selected client drops out of a round.
    pub dropout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_test_per_class: Option<usize>,
    pub partition: PartitionConfig,
    pub client: ClientConfig,
    pub generator: GeneratorConfig,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartition {
    alpha: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClient {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    synthetic_batch_size: Option<usize>,
    lr: Option<f64>,
    lr_final: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    w_ft: Option<f64>,
    w_kd: Option<f64>,
    prox_mu: Option<f64>,
    lwf_temperature: Option<f64>,
    lwf_local_weight: Option<f64>,
    lwf_global_weight: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerator {
    iterations: Option<usize>,
    batch_size: Option<usize>,
    z_dim: Option<usize>,
    lr: Option<f64>,
    w_div: Option<f64>,
    w_bn: Option<f64>,
    w_prior: Option<f64>,
    warm_start: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: String,
    strategy: Strategy,
    arch: Option<String>,
    data_root: Option<PathBuf>,
    num_clients: Option<usize>,
    clients_per_round: Option<usize>,
    num_tasks: Option<usize>,
    classes_per_task: Option<usize>,
    rounds: Option<usize>,
    seed: Option<u64>,
    num_seeds: Option<usize>,
    shuffle_classes: Option<bool>,
    eval_every: Option<usize>,
    dropout: Option<f64>,
    max_train_per_class: Option<usize>,
    max_test_per_class: Option<usize>,
    #[serde(default)]
    partition: RawPartition,
    #[serde(default)]
    client: RawClient,
    #[serde(default)]
    generator: RawGenerator,
}

struct DatasetDefaults {
    arch: &'static str,
    clients: usize,
    per_round: usize,
    tasks: usize,
    per_task: usize,
    rounds: usize,
    epochs: usize,
    z_dim: usize,
    gen_iterations: usize,
}

fn dataset_defaults(name: &str) -> Result<DatasetDefaults> {
    let full = DatasetDefaults {
        arch: "resnet18",
        clients: 50,
        per_round: 5,
        tasks: 10,
        per_task: 10,
        rounds: 100,
        epochs: 10,
        z_dim: 200,
        gen_iterations: 5000,
    };
    Ok(match name {
        "cifar100" => full,
        "cifar10" => DatasetDefaults {
            clients: 20,
            tasks: 5,
            per_task: 2,
            ..full
        },
        "tinyimagenet" => DatasetDefaults {
            clients: 100,
            per_round: 10,
            per_task: 20,
            z_dim: 400,
            ..full
        },
        "superimagenet" => DatasetDefaults {
            clients: 300,
            per_round: 30,
            per_task: 5,
            epochs: 1,
            ..full
        },
        "synth10" => DatasetDefaults {
            arch: "small_cnn",
            clients: 20,
            per_round: 5,
            tasks: 5,
            per_task: 2,
            rounds: 30,
            epochs: 2,
            z_dim: 16,
            gen_iterations: 300,
        },
        other => {
            return Err(Error::Config(format!(
                "dataset: unknown value `{other}`, expected one of {}",
                DATASETS.join(", ")
            )))
        }
    })
}

impl RawConfig {
    fn resolve(self) -> Result<ExperimentConfig> {
        let d = dataset_defaults(&self.dataset)?;
        let c = self.client;
        let g = self.generator;
        let config = ExperimentConfig {
            arch: self.arch.unwrap_or_else(|| d.arch.into()),
            data_root: self.data_root.unwrap_or_else(|| PathBuf::from("data")),
            num_clients: self.num_clients.unwrap_or(d.clients),
            clients_per_round: self.clients_per_round.unwrap_or(d.per_round),
            num_tasks: self.num_tasks.unwrap_or(d.tasks),
            classes_per_task: self.classes_per_task.unwrap_or(d.per_task),
            rounds: self.rounds.unwrap_or(d.rounds),
            seed: self.seed.unwrap_or(0),
            num_seeds: self.num_seeds.unwrap_or(3),
            shuffle_classes: self.shuffle_classes.unwrap_or(true),
            eval_every: self.eval_every.unwrap_or(0),
            dropout: self.dropout.unwrap_or(0.0),
            max_train_per_class: self.max_train_per_class,
            max_test_per_class: self.max_test_per_class,
            partition: PartitionConfig {
                alpha: self.partition.alpha.unwrap_or(1.0),
            },
            client: ClientConfig {
                epochs: c.epochs.unwrap_or(d.epochs),
                batch_size: c.batch_size.unwrap_or(32),
                synthetic_batch_size: c.synthetic_batch_size.unwrap_or(32),
                lr: c.lr.unwrap_or(0.1),
                lr_final: c.lr_final.unwrap_or(0.01),
                momentum: c.momentum.unwrap_or(0.0),
                weight_decay: c.weight_decay.unwrap_or(0.0),
                w_ft: c.w_ft.unwrap_or(1.0),
                w_kd: c.w_kd.unwrap_or(1.0),
                prox_mu: c.prox_mu.unwrap_or(0.01),
                lwf_temperature: c.lwf_temperature.unwrap_or(2.0),
                lwf_local_weight: c.lwf_local_weight.unwrap_or(1.0),
                lwf_global_weight: c.lwf_global_weight.unwrap_or(1.0),
            },
            generator: GeneratorConfig {
                iterations: g.iterations.unwrap_or(d.gen_iterations),
                batch_size: g.batch_size.unwrap_or(32),
                z_dim: g.z_dim.unwrap_or(d.z_dim),
                lr: g.lr.unwrap_or(1e-3),
                w_div: g.w_div.unwrap_or(1.0),
                w_bn: g.w_bn.unwrap_or(75.0),
                w_prior: g.w_prior.unwrap_or(0.001),
                warm_start: g.warm_start.unwrap_or(true),
            },
            dataset: self.dataset,
            strategy: self.strategy,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Parses a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `key=value` in `table`, creating intermediate tables for dotted keys.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut cursor = table;
    for p in parents {
        let entry = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cursor.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides and fills defaults.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let raw: RawConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        raw.resolve()
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("{key}: {why}")));
        dataset_defaults(&self.dataset)?;
        if !ARCHITECTURES.contains(&self.arch.as_str()) {
            return bad("arch", format!("unknown architecture `{}`", self.arch));
        }
        if self.num_clients == 0 {
            return bad("num_clients", "must be at least 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return bad(
                "clients_per_round",
                format!("must be in 1..={}, got {}", self.num_clients, self.clients_per_round),
            );
        }
        for (key, v) in [
            ("num_tasks", self.num_tasks),
            ("classes_per_task", self.classes_per_task),
            ("rounds", self.rounds),
            ("num_seeds", self.num_seeds),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("must be in [0, 1), got {}", self.dropout));
        }
        if !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite()) {
            return bad("partition.alpha", format!("must be positive, got {}", self.partition.alpha));
        }
        if !(self.client.lr_final > 0.0 && self.client.lr_final.is_finite()) {
            return bad("client.lr_final", format!("must be positive, got {}", self.client.lr_final));
        }
        if matches!(self.max_train_per_class, Some(0)) || matches!(self.max_test_per_class, Some(0)) {
            return bad("max_*_per_class", "must be at least 1 when set".into());
        }
        self.local_train(0).validate().map_err(|e| Error::Config(format!("client: {e}")))?;
        if self.strategy == Strategy::Mfcl {
            self.gen_train().validate().map_err(|e| Error::Config(format!("generator: {e}")))?;
            let q = self.num_tasks * self.classes_per_task;
            if self.generator.z_dim < q {
                return bad(
                    "generator.z_dim",
                    format!("must be at least the {q} total classes, got {}", self.generator.z_dim),
                );
            }
        }
        Ok(())
    }

    /// Client learning rate in `round` of a task.
    pub fn lr_at(&self, round: usize) -> f64 {
        let c = &self.client;
        if self.rounds <= 1 {
            return c.lr;
        }
        let frac = round as f64 / (self.rounds - 1) as f64;
        c.lr * (c.lr_final / c.lr).powf(frac)
    }

    pub fn local_train(&self, round: usize) -> LocalTrainConfig {
        let c = &self.client;
        LocalTrainConfig {
            strategy: self.strategy,
            epochs: c.epochs,
            batch_size: c.batch_size,
            synthetic_batch_size: c.synthetic_batch_size,
            lr: self.lr_at(round),
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            weights: ClientLossWeights { ft: c.w_ft, kd: c.w_kd },
            prox_mu: c.prox_mu,
            lwf_temperature: c.lwf_temperature,
            lwf_local_weight: c.lwf_local_weight,
            lwf_global_weight: c.lwf_global_weight,
        }
    }

    pub fn gen_train(&self) -> GenTrainConfig {
        let g = &self.generator;
        GenTrainConfig {
            iterations: g.iterations,
            batch_size: g.batch_size,
            z_dim: g.z_dim,
            lr: g.lr,
            weights: GenLossWeights {
                div: g.w_div,
                bn: g.w_bn,
                prior: g.w_prior,
            },
            warm_start: g.warm_start,
        }
    }

    /// Canonical TOML: every key explicit, fixed order.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }

    /// SHA-256 of the canonical form with the data location and seed count
    /// left out, so moving the data or adding seeds keeps runs resumable.
    pub fn hash(&self) -> String {
        let mut key = self.clone();
        key.data_root = PathBuf::new();
        key.num_seeds = 1;
        hex::encode(Sha256::digest(key.to_canonical_toml().as_bytes()))
    }

    /// Seed of the `index`-th repetition.
    pub fn run_seed(&self, index: usize) -> u64 {
        crate::seed::derive(self.seed, &[crate::seed::SEED_INDEX, index as u64])
    }
}
