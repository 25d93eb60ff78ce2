use std::collections::BTreeMap;
use std::fs;
use std::mem;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::report::{build_report, write_summary, Report, RunInfo, RunManifest, RunStatus};
use super::{aggregate, select_clients, LogRecord, RoundRecord};
use crate::client_update::{local_train, Strategy, TaskContext, Teachers};
use crate::config::ExperimentConfig;
use crate::datasets::{
    build_task_schedule, load_dataset, partition_task, ClientShard, DatasetIndex, ImageBank, LocalData, PartitionSpec,
    Split, TaskSchedule,
};
use crate::error::{Error, Result};
use crate::generative_replay::train_generator;
use crate::metrics::{eval_seen_classes, AccuracyMatrix, MetricsLog, Phase, TimingRecord};
use crate::model_zoo::{build_classifier, build_generator, Bundle, GeneratorNet, GlobalClassifier};
use crate::seed;

/// File locations inside one seed's run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }

    pub fn config_hash(&self) -> PathBuf {
        self.dir.join("config.sha256")
    }

    pub fn info(&self) -> PathBuf {
        self.dir.join("run.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.ckpt")
    }

    pub fn matrix(&self) -> PathBuf {
        self.dir.join("accuracy_matrix.json")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }

    pub fn final_model(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    pub fn generator(&self) -> PathBuf {
        self.dir.join("generator.ckpt")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from the directory's checkpoint instead of refusing to
    /// touch an existing run.
    pub resume: bool,
    /// Stop after this many rounds in this call (checkpoint written).
    pub stop_after_rounds: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub matrix: AccuracyMatrix,
    pub report: Option<Report>,
    /// `(task, round)` the run continued from.
    pub resumed_at: Option<(usize, usize)>,
    /// The directory already held a finished run.
    pub was_complete: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: String,
    task: usize,
    round: usize,
    log_len: u64,
    finished: bool,
    matrix: AccuracyMatrix,
}

struct State {
    task: usize,
    round: usize,
    finished: bool,
    global: GlobalClassifier,
    previous: Option<GlobalClassifier>,
    generator: Option<GeneratorNet>,
    /// FedLwF-2T: each client's last local model of the previous task.
    lwf_previous: BTreeMap<usize, GlobalClassifier>,
    /// FedLwF-2T: each client's last local model of the current task.
    lwf_current: BTreeMap<usize, GlobalClassifier>,
    matrix: AccuracyMatrix,
}

impl State {
    fn to_bundle(&self, config_hash: &str, log_len: u64) -> Result<Bundle> {
        let meta = CheckpointMeta {
            config_hash: config_hash.into(),
            task: self.task,
            round: self.round,
            log_len,
            finished: self.finished,
            matrix: self.matrix.clone(),
        };
        let mut sections = vec![("global".to_string(), self.global.snapshot(self.task, self.round))];
        if let Some(p) = &self.previous {
            sections.push(("previous".into(), p.snapshot(p.task_tag, 0)));
        }
        if let Some(g) = &self.generator {
            sections.push(("generator".into(), g.snapshot(self.task, 0)));
        }
        for (prefix, map) in [("lwf_previous", &self.lwf_previous), ("lwf_current", &self.lwf_current)] {
            for (c, m) in map {
                sections.push((format!("{prefix}/{c}"), m.snapshot(m.task_tag, 0)));
            }
        }
        Ok(Bundle {
            meta: serde_json::to_value(meta)?,
            sections,
        })
    }

    fn from_bundle(bundle: &Bundle, expected_hash: &str) -> Result<(Self, u64)> {
        let meta: CheckpointMeta =
            serde_json::from_value(bundle.meta.clone()).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if meta.config_hash != expected_hash {
            return Err(Error::ConfigHashMismatch {
                expected: meta.config_hash,
                found: expected_hash.into(),
            });
        }
        let global = bundle
            .get("global")
            .ok_or_else(|| Error::Checkpoint("checkpoint has no global model".into()))?;
        let mut lwf_previous = BTreeMap::new();
        let mut lwf_current = BTreeMap::new();
        for (name, snap) in &bundle.sections {
            let Some((prefix, id)) = name.split_once('/') else { continue };
            let id: usize = id
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad section name `{name}`")))?;
            let model = GlobalClassifier::from_snapshot(snap)?;
            match prefix {
                "lwf_previous" => lwf_previous.insert(id, model),
                "lwf_current" => lwf_current.insert(id, model),
                _ => return Err(Error::Checkpoint(format!("unknown section `{name}`"))),
            };
        }
        let state = State {
            task: meta.task,
            round: meta.round,
            finished: meta.finished,
            global: GlobalClassifier::from_snapshot(global)?,
            previous: bundle.get("previous").map(GlobalClassifier::from_snapshot).transpose()?,
            generator: bundle.get("generator").map(GeneratorNet::from_snapshot).transpose()?,
            lwf_previous,
            lwf_current,
            matrix: meta.matrix,
        };
        Ok((state, meta.log_len))
    }
}

/// Training data split by task and client, and the central test set.
struct RunData {
    schedule: TaskSchedule,
    train_bank: ImageBank,
    test_bank: ImageBank,
    test: DatasetIndex,
    /// Per task: samples relabeled to global ids, and one shard per client.
    tasks: Vec<(DatasetIndex, Vec<ClientShard>)>,
}

fn load_split(config: &ExperimentConfig, split: Split, cap: Option<usize>) -> Result<DatasetIndex> {
    let mut index = load_dataset(&config.dataset, &config.data_root, split)?;
    if let Some(cap) = cap {
        index.truncate_per_class(cap);
    }
    Ok(index)
}

fn prepare(config: &ExperimentConfig, run_seed: u64) -> Result<RunData> {
    let train = load_split(config, Split::Train, config.max_train_per_class)?;
    let test = load_split(config, Split::Test, config.max_test_per_class)?;
    let order_seed = config.shuffle_classes.then(|| seed::derive(run_seed, &[seed::SCHEDULE]));
    let schedule = build_task_schedule(&train.classes, config.num_tasks, config.classes_per_task, order_seed)?;
    let spec = PartitionSpec {
        num_clients: config.num_clients,
        alpha: config.partition.alpha,
        seed: run_seed,
    };
    let mut tasks = Vec::with_capacity(config.num_tasks);
    for t in 0..config.num_tasks {
        let index = schedule.relabel(&train, t..t + 1);
        let shards = partition_task(&index, t, &spec)?;
        debug_assert!(shards.iter().enumerate().all(|(i, s)| s.client_id == i));
        tasks.push((index, shards));
    }
    Ok(RunData {
        schedule,
        train_bank: ImageBank::open(&train)?,
        test_bank: ImageBank::open(&test)?,
        test,
        tasks,
    })
}

impl RunData {
    fn client_data(&self, client: usize, task: usize, cumulative: bool) -> Result<LocalData> {
        let first = if cumulative { 0 } else { task };
        let parts = (first..=task)
            .map(|t| {
                let (index, shards) = &self.tasks[t];
                LocalData::gather(&self.train_bank, index, &shards[client].sample_ids)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LocalData::concat(&parts.iter().collect::<Vec<_>>()))
    }
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    run_seed: u64,
    data: RunData,
    log: MetricsLog,
    observer: &'a mut dyn FnMut(&LogRecord),
}

impl Runner<'_> {
    fn emit(&mut self, record: LogRecord) -> Result<()> {
        self.log.append(&record)?;
        (self.observer)(&record);
        Ok(())
    }

    fn timing(&mut self, phase: Phase, task: usize, round: usize, seconds: f64) -> Result<()> {
        self.emit(LogRecord::Timing(TimingRecord {
            phase,
            task,
            round,
            seconds,
        }))
    }

    fn start_task(&self, state: &mut State) -> Result<()> {
        let q = self.data.schedule.q_after(state.task);
        if state.global.num_classes() < q {
            state.global.expand_head(q, self.run_seed)?;
        }
        Ok(())
    }

    fn round(&mut self, state: &mut State) -> Result<()> {
        let cfg = self.config;
        let (t, r) = (state.task, state.round);
        let ctx = TaskContext {
            task: t,
            range: self.data.schedule.range(t),
        };
        let local_cfg = cfg.local_train(r);
        let tags = [t as u64, r as u64];
        let selected = select_clients(
            cfg.num_clients,
            cfg.clients_per_round,
            &mut seed::rng(self.run_seed, &[seed::SELECT, tags[0], tags[1]]),
        )?;
        let mut drop_rng = seed::rng(self.run_seed, &[seed::DROPOUT, tags[0], tags[1]]);
        let (mut active, mut dropped) = (Vec::new(), Vec::new());
        for &c in &selected {
            if cfg.dropout > 0.0 && drop_rng.random::<f64>() < cfg.dropout {
                dropped.push(c);
            } else {
                active.push(c);
            }
        }

        let mut updates = Vec::with_capacity(active.len());
        for &c in &active {
            let local = self.data.client_data(c, t, cfg.strategy == Strategy::Oracle)?;
            let teachers = Teachers {
                previous: state.previous.as_ref(),
                generator: state.generator.as_ref().filter(|_| cfg.strategy == Strategy::Mfcl),
                local_previous: state.lwf_previous.get(&c),
            };
            let mut rng = seed::rng(self.run_seed, &[seed::CLIENT, tags[0], tags[1], c as u64]);
            let update = local_train(c, &state.global, teachers, &local, &local_cfg, &ctx, &mut rng)?;
            self.timing(Phase::ClientTrain, t, r, update.seconds)?;
            updates.push(update);
        }

        let clock = Instant::now();
        let next = aggregate(&state.global, &updates)?;
        let server_seconds = clock.elapsed().as_secs_f64();
        self.timing(Phase::ServerAggregate, t, r, server_seconds)?;

        let samples = updates.iter().map(|u| u.num_samples).sum();
        let trained: Vec<f64> = updates.iter().filter(|u| u.steps > 0).map(|u| u.mean_loss).collect();
        let mean_loss = if trained.is_empty() { 0.0 } else { trained.iter().sum::<f64>() / trained.len() as f64 };
        if cfg.strategy == Strategy::FedLwf2t {
            for u in updates {
                let mut local = state.global.clone();
                local.params = u.params;
                local.task_tag = t;
                state.lwf_current.insert(u.client_id, local);
            }
        }
        state.global = next;

        let eval = if cfg.eval_every > 0 && (r + 1) % cfg.eval_every == 0 {
            Some(eval_seen_classes(&state.global, &self.data.test_bank, &self.data.test, &self.data.schedule, t)?)
        } else {
            None
        };
        self.emit(LogRecord::Round(RoundRecord {
            task: t,
            round: r,
            selected,
            dropped,
            lr: local_cfg.lr,
            samples,
            mean_loss,
            server_seconds,
            eval,
        }))?;
        state.round += 1;
        Ok(())
    }

    /// Evaluates, freezes the task's final model and refreshes the generator.
    fn finish_task(&mut self, state: &mut State) -> Result<()> {
        let cfg = self.config;
        let t = state.task;
        let eval = eval_seen_classes(&state.global, &self.data.test_bank, &self.data.test, &self.data.schedule, t)?;
        state.matrix.push(eval.per_task.clone(), eval.seen)?;
        self.emit(LogRecord::TaskEval {
            task: t,
            seen: eval.seen,
            per_task: eval.per_task,
        })?;
        state.global.task_tag = t;
        state.previous = Some(state.global.clone());

        if cfg.strategy == Strategy::Mfcl {
            let gen_cfg = cfg.gen_train();
            let mut generator = match (gen_cfg.warm_start, state.generator.take()) {
                (true, Some(g)) => g,
                _ => build_generator(&cfg.dataset, gen_cfg.z_dim, seed::derive(self.run_seed, &[seed::GENERATOR, t as u64]))?,
            };
            let clock = Instant::now();
            let mut rng = seed::rng(self.run_seed, &[seed::GENERATOR, t as u64, 1]);
            let mut sink_error = None;
            let q = self.data.schedule.q_after(t);
            train_generator(&state.global, q, &gen_cfg, &mut generator, &mut rng, |iteration, losses| {
                if sink_error.is_none() {
                    let record = LogRecord::GeneratorIter {
                        task: t,
                        iteration,
                        losses: *losses,
                    };
                    if let Err(e) = self.emit(record) {
                        sink_error = Some(e);
                    }
                }
            })?;
            if let Some(e) = sink_error {
                return Err(e);
            }
            self.timing(Phase::GeneratorTrain, t, state.round, clock.elapsed().as_secs_f64())?;
            state.generator = Some(generator);
        }
        if cfg.strategy == Strategy::FedLwf2t {
            state.lwf_previous = mem::take(&mut state.lwf_current);
        }
        state.task += 1;
        state.round = 0;
        state.finished = state.task == cfg.num_tasks;
        Ok(())
    }
}

fn write_outputs(paths: &RunPaths, state: &State) -> Result<Report> {
    state.matrix.save(&paths.matrix())?;
    let last = state.task.saturating_sub(1);
    state.global.snapshot(last, 0).save(&paths.final_model())?;
    if let Some(g) = &state.generator {
        g.snapshot(last, 0).save(&paths.generator())?;
    }
    let report = build_report(&paths.dir)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(paths.report(), text).map_err(|e| Error::io(&paths.report(), e))?;
    Ok(report)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) seed `seed_index` of `config` in `dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    seed_index: usize,
    dir: &Path,
    options: RunOptions,
    observer: &mut dyn FnMut(&LogRecord),
) -> Result<RunOutcome> {
    config.validate()?;
    let paths = RunPaths::new(dir);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = config.hash();
    let run_seed = config.run_seed(seed_index);

    let checkpoint = paths.checkpoint();
    let (mut state, log_len, resumed_at) = if checkpoint.exists() {
        if !options.resume {
            return Err(Error::Config(format!(
                "{} already holds a run; resume it or choose another directory",
                dir.display()
            )));
        }
        let (state, log_len) = State::from_bundle(&Bundle::load(&checkpoint)?, &hash)?;
        let at = (state.task, state.round);
        (state, log_len, Some(at))
    } else {
        let fresh = State {
            task: 0,
            round: 0,
            finished: false,
            global: initial_model(config, run_seed)?,
            previous: None,
            generator: None,
            lwf_previous: BTreeMap::new(),
            lwf_current: BTreeMap::new(),
            matrix: AccuracyMatrix::new(),
        };
        (fresh, 0, None)
    };
    write_text(&paths.config(), &config.to_canonical_toml())?;
    write_text(&paths.config_hash(), &format!("{hash}\n"))?;
    let info = RunInfo {
        seed_index,
        seed: run_seed,
        config_hash: hash.clone(),
    };
    write_text(&paths.info(), &(serde_json::to_string_pretty(&info)? + "\n"))?;

    if state.finished {
        let report = write_outputs(&paths, &state)?;
        return Ok(RunOutcome {
            status: RunStatus::Completed,
            matrix: state.matrix,
            report: Some(report),
            resumed_at,
            was_complete: true,
        });
    }

    let data = prepare(config, run_seed)?;
    if state.global.input_shape != data.test.image_shape {
        return Err(Error::Shape(format!(
            "model input {:?} does not match dataset images {:?}",
            state.global.input_shape, data.test.image_shape
        )));
    }
    let log = MetricsLog::open(&paths.metrics(), Some(log_len))?;
    let mut runner = Runner {
        config,
        run_seed,
        data,
        log,
        observer,
    };
    let mut rounds = 0;
    while !state.finished {
        if state.round == 0 {
            runner.start_task(&mut state)?;
        }
        runner.round(&mut state)?;
        rounds += 1;
        if state.round == config.rounds {
            runner.finish_task(&mut state)?;
        }
        state.to_bundle(&hash, runner.log.len()?)?.save(&checkpoint)?;
        if options.stop_after_rounds.is_some_and(|n| rounds >= n) && !state.finished {
            return Ok(RunOutcome {
                status: RunStatus::Stopped,
                matrix: state.matrix,
                report: None,
                resumed_at,
                was_complete: false,
            });
        }
    }
    let report = write_outputs(&paths, &state)?;
    Ok(RunOutcome {
        status: RunStatus::Completed,
        matrix: state.matrix,
        report: Some(report),
        resumed_at,
        was_complete: false,
    })
}

/// The untrained global model of a run, sized for the first task.
fn initial_model(config: &ExperimentConfig, run_seed: u64) -> Result<GlobalClassifier> {
    let shape = crate::datasets::dataset_image_shape(&config.dataset)?;
    build_classifier(&config.arch, shape, config.classes_per_task, run_seed)
}

/// Runs every seed of `config` under `out/seed-<i>/`, then writes
/// `summary.json`. `out/manifest.json` tracks progress throughout.
pub fn run_all(
    config: &ExperimentConfig,
    out: &Path,
    options: RunOptions,
    observer: &mut dyn FnMut(usize, &LogRecord),
) -> Result<RunManifest> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest::new(config);
    manifest.save(out)?;
    let mut reports = Vec::new();
    for i in 0..config.num_seeds {
        let dir = out.join(format!("seed-{i}"));
        let outcome = match run_experiment(config, i, &dir, options, &mut |r| observer(i, r)) {
            Ok(o) => o,
            Err(e) => {
                manifest.status = RunStatus::Failed;
                manifest.save(out)?;
                return Err(e);
            }
        };
        let rel = |p: PathBuf| p.strip_prefix(out).unwrap_or(&p).display().to_string();
        let paths = RunPaths::new(&dir);
        manifest.artifacts.extend([rel(paths.config()), rel(paths.metrics()), rel(paths.checkpoint())]);
        if outcome.status == RunStatus::Stopped {
            manifest.status = RunStatus::Stopped;
            manifest.save(out)?;
            return Ok(manifest);
        }
        manifest.artifacts.extend([rel(paths.matrix()), rel(paths.report())]);
        reports.push(outcome.report.expect("completed runs carry a report"));
    }
    write_summary(out, &reports)?;
    manifest.artifacts.push("summary.json".into());
    manifest.status = RunStatus::Completed;
    manifest.save(out)?;
    Ok(manifest)
}
