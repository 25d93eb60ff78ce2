//! End-to-end runs on a few hundred procedural images.

use std::fs;
use std::path::Path;

use mfcl::client_update::Strategy;
use mfcl::config::ExperimentConfig;
use mfcl::fed_orchestrator::{run_all, run_experiment, LogRecord, RunOptions, RunPaths, RunStatus, RunManifest};
use mfcl::metrics::read_log;
use mfcl::model_zoo::{Bundle, GlobalClassifier};
use mfcl::Error;

fn tiny(strategy: Strategy, extra: &[&str]) -> ExperimentConfig {
    let text = format!(
        r#"
dataset = "synth10"
strategy = "{strategy}"
num_clients = 4
clients_per_round = 2
num_tasks = 2
rounds = 2
num_seeds = 1
max_train_per_class = 24
max_test_per_class = 10

[client]
epochs = 1
batch_size = 8
synthetic_batch_size = 8

[generator]
iterations = 3
batch_size = 8
"#
    );
    let overrides: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml(&text, &overrides).unwrap()
}

fn run(config: &ExperimentConfig, dir: &Path, options: RunOptions) -> mfcl::Result<mfcl::fed_orchestrator::RunOutcome> {
    run_experiment(config, 0, dir, options, &mut |_| {})
}

/// Log records with wall-clock fields zeroed.
fn timeless_log(dir: &Path) -> Vec<LogRecord> {
    let mut records: Vec<LogRecord> = read_log(&RunPaths::new(dir).metrics()).unwrap();
    for r in &mut records {
        match r {
            LogRecord::Round(round) => round.server_seconds = 0.0,
            LogRecord::Timing(t) => t.seconds = 0.0,
            _ => {}
        }
    }
    records
}

fn bytes(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path).unwrap()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let config = tiny(Strategy::Mfcl, &[]);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = run(&config, a.path(), RunOptions::default()).unwrap();
    let ob = run(&config, b.path(), RunOptions::default()).unwrap();
    assert_eq!(oa.status, RunStatus::Completed);
    assert_eq!(oa.matrix.num_tasks(), 2);
    assert_eq!(oa.matrix, ob.matrix);
    let (pa, pb) = (RunPaths::new(a.path()), RunPaths::new(b.path()));
    assert_eq!(bytes(pa.matrix()), bytes(pb.matrix()));
    assert_eq!(bytes(pa.final_model()), bytes(pb.final_model()));
    assert_eq!(bytes(pa.generator()), bytes(pb.generator()));
    assert_eq!(timeless_log(a.path()), timeless_log(b.path()));

    // A different seed index gives a different run.
    let c = tempfile::tempdir().unwrap();
    run_experiment(&config, 1, c.path(), RunOptions::default(), &mut |_| {}).unwrap();
    assert_ne!(bytes(pa.final_model()), bytes(RunPaths::new(c.path()).final_model()));
}

#[test]
fn interrupted_runs_resume_bit_for_bit() {
    for strategy in Strategy::ALL {
        let config = tiny(strategy, &[]);
        let whole = tempfile::tempdir().unwrap();
        run(&config, whole.path(), RunOptions::default()).unwrap();

        let parts = tempfile::tempdir().unwrap();
        let stop = |n| RunOptions {
            resume: true,
            stop_after_rounds: Some(n),
        };
        let first = run(&config, parts.path(), stop(3)).unwrap();
        assert_eq!(first.status, RunStatus::Stopped, "{strategy}");
        assert_eq!(first.matrix.num_tasks(), 1);
        let second = run(&config, parts.path(), stop(100)).unwrap();
        assert_eq!(second.status, RunStatus::Completed);
        assert_eq!(second.resumed_at, Some((1, 1)));

        let (pw, pp) = (RunPaths::new(whole.path()), RunPaths::new(parts.path()));
        assert_eq!(bytes(pw.matrix()), bytes(pp.matrix()), "{strategy}");
        assert_eq!(bytes(pw.final_model()), bytes(pp.final_model()), "{strategy}");
        assert_eq!(timeless_log(whole.path()), timeless_log(parts.path()), "{strategy}");
    }
}

#[test]
fn existing_runs_are_protected() {
    let config = tiny(Strategy::FedAvg, &[]);
    let dir = tempfile::tempdir().unwrap();
    let stop = RunOptions {
        resume: false,
        stop_after_rounds: Some(1),
    };
    run(&config, dir.path(), stop).unwrap();
    assert!(matches!(run(&config, dir.path(), stop), Err(Error::Config(_))));

    let changed = tiny(Strategy::FedAvg, &["rounds=3"]);
    let resume = RunOptions {
        resume: true,
        stop_after_rounds: None,
    };
    assert!(matches!(run(&changed, dir.path(), resume), Err(Error::ConfigHashMismatch { .. })));

    // Where the data lives is not part of the experiment.
    let moved = tiny(Strategy::FedAvg, &["data_root=\"/somewhere/else\""]);
    let done = run(&moved, dir.path(), resume).unwrap();
    assert_eq!(done.status, RunStatus::Completed);
    assert!(!done.was_complete);

    let again = run(&config, dir.path(), resume).unwrap();
    assert!(again.was_complete);
    assert_eq!(again.matrix, done.matrix);
    assert_eq!(again.report, done.report);
}

#[test]
fn previous_model_is_the_last_global_model_of_the_task() {
    let config = tiny(Strategy::Mfcl, &[]);
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::new(dir.path());
    let step = |n| RunOptions {
        resume: true,
        stop_after_rounds: Some(n),
    };
    run(&config, dir.path(), step(2)).unwrap();
    let at_boundary = Bundle::load(&paths.checkpoint()).unwrap();
    let global = GlobalClassifier::from_snapshot(at_boundary.get("global").unwrap()).unwrap();
    let previous = GlobalClassifier::from_snapshot(at_boundary.get("previous").unwrap()).unwrap();
    assert_eq!(previous.hash(), global.hash());
    assert!(at_boundary.get("generator").is_some());

    run(&config, dir.path(), step(1)).unwrap();
    let later = Bundle::load(&paths.checkpoint()).unwrap();
    let still = GlobalClassifier::from_snapshot(later.get("previous").unwrap()).unwrap();
    assert_eq!(still.hash(), previous.hash());
    let grown = GlobalClassifier::from_snapshot(later.get("global").unwrap()).unwrap();
    assert_eq!(grown.num_classes(), 4);
    assert_ne!(grown.hash(), previous.hash());
}

#[test]
fn single_task_runs_still_train_a_generator() {
    let config = tiny(Strategy::Mfcl, &["num_tasks=1"]);
    let dir = tempfile::tempdir().unwrap();
    let out = run(&config, dir.path(), RunOptions::default()).unwrap();
    assert!(out.report.unwrap().average_forgetting.is_none());
    assert!(RunPaths::new(dir.path()).generator().exists());
    let iters = timeless_log(dir.path())
        .iter()
        .filter(|r| matches!(r, LogRecord::GeneratorIter { task: 0, .. }))
        .count();
    assert_eq!(iters, 3);

    // Baselines never build one.
    let dir = tempfile::tempdir().unwrap();
    run(&tiny(Strategy::FedAvg, &["num_tasks=1"]), dir.path(), RunOptions::default()).unwrap();
    assert!(!RunPaths::new(dir.path()).generator().exists());
}

#[test]
fn round_records_follow_the_schedule() {
    let config = tiny(Strategy::FedProx, &["rounds=4", "eval_every=2", "dropout=0.5", "num_clients=6", "clients_per_round=4"]);
    let dir = tempfile::tempdir().unwrap();
    let mut observed = Vec::new();
    run_experiment(&config, 0, dir.path(), RunOptions::default(), &mut |r| observed.push(r.clone())).unwrap();
    let records = read_log::<LogRecord>(&RunPaths::new(dir.path()).metrics()).unwrap();
    assert_eq!(observed, records);

    let rounds: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Round(r) => Some(r),
            _ => None,
        })
        .collect();
    assert_eq!(rounds.len(), 8);
    let mut any_dropped = false;
    for r in &rounds {
        assert_eq!(r.selected.len(), 4);
        assert!(r.dropped.iter().all(|c| r.selected.contains(c)));
        any_dropped |= !r.dropped.is_empty();
        assert_eq!(r.eval.is_some(), (r.round + 1) % 2 == 0, "round {}", r.round);
        if let Some(e) = &r.eval {
            assert_eq!(e.per_task.len(), r.task + 1);
        }
    }
    assert!(any_dropped);
    let lr: Vec<f64> = rounds.iter().take(4).map(|r| r.lr).collect();
    assert!((lr[0] - 0.1).abs() < 1e-12 && (lr[3] - 0.01).abs() < 1e-12);
    assert_eq!(rounds[4].lr, lr[0]);
    let evals = records.iter().filter(|r| matches!(r, LogRecord::TaskEval { .. })).count();
    assert_eq!(evals, 2);
}

#[test]
fn run_all_writes_manifest_and_summary() {
    let config = tiny(Strategy::FedAvg, &["num_seeds=2"]);
    let out = tempfile::tempdir().unwrap();
    let mut seeds = std::collections::BTreeSet::new();
    let manifest = run_all(&config, out.path(), RunOptions::default(), &mut |i, _| {
        seeds.insert(i);
    })
    .unwrap();
    assert_eq!(seeds.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(manifest.status, RunStatus::Completed);
    assert_eq!(manifest.seeds.len(), 2);
    assert_ne!(manifest.seeds[0], manifest.seeds[1]);
    assert_eq!(RunManifest::load(out.path()).unwrap(), manifest);
    for a in &manifest.artifacts {
        assert!(out.path().join(a).exists(), "{a}");
    }
    let summary: mfcl::fed_orchestrator::Summary =
        serde_json::from_str(&fs::read_to_string(out.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.seeds, 2);
    assert_eq!(summary.seen_accuracy.len(), 2);

    // Reports rebuild from a run directory alone.
    let seed_dir = out.path().join("seed-1");
    let report = mfcl::fed_orchestrator::build_report(&seed_dir).unwrap();
    let stored: mfcl::fed_orchestrator::Report =
        serde_json::from_str(&fs::read_to_string(RunPaths::new(&seed_dir).report()).unwrap()).unwrap();
    assert_eq!(report, stored);

    let again = run_all(&config, out.path(), RunOptions { resume: true, stop_after_rounds: None }, &mut |_, _| {}).unwrap();
    assert_eq!(again.status, RunStatus::Completed);
}
