//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines come out in order with their measured values.
//!
//! Set `MFCL_ACCEPTANCE_SKIP_E2E=1` to skip the two end-to-end criteria.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;

use common::{local_data, max_relative_error, relu_classifier, tiny_classifier, tiny_generator, Z_DIM};
use mfcl::client_update::{
    ce_current_task_loss, fedavg_local_train, fedlwf2t_local_train, fedprox_local_train, finetune_loss,
    mfcl_local_train, mfcl_objective, split_head_local_train, ClientLossWeights, ClientUpdate, LocalTrainConfig,
    Strategy, TaskContext, Teachers,
};
use mfcl::config::ExperimentConfig;
use mfcl::datasets::{partition_task, DatasetIndex, PartitionSpec, Sample, Source, Split};
use mfcl::fed_orchestrator::{aggregate, run_all, run_experiment, RunOptions, RunPaths, Summary};
use mfcl::generative_replay::{
    bn_loss_value, gen_ce_loss, gen_diversity_loss, generator_objective, sample_noise_labels, synthesize,
    train_generator, GenLossWeights, GenTrainConfig,
};
use mfcl::metrics::{average_accuracy, average_forgetting, AccuracyMatrix};
use mfcl::mfcl_grad::nn::{Mode, ParamStore};
use mfcl::mfcl_grad::{Graph, Tensor};
use mfcl::model_zoo::{GlobalClassifier, NormStats, HEAD_BIAS, HEAD_WEIGHT};
use mfcl::seed;
use rand::Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn scalar(f: impl FnOnce(&mut Graph) -> mfcl::mfcl_grad::Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.item(v)
}

fn stats(mean: f64, std: f64) -> NormStats {
    NormStats {
        layer_index: 0,
        name: "layer".into(),
        mean: vec![mean],
        std: vec![std],
    }
}

fn closed_form_losses() -> Check {
    let mut worst: f64 = 0.0;
    for q in [2usize, 10] {
        let div = scalar(|g| {
            let l = g.constant(Tensor::full(&[4, q], 0.3));
            gen_diversity_loss(g, l).unwrap()
        });
        let e = (div + (q as f64).ln() / q as f64).abs();
        ensure!(e <= 1e-9, "diversity q={q} off by {e:e}");
        worst = worst.max(e);
        let ce = scalar(|g| {
            let l = g.constant(Tensor::full(&[3, q], -0.7));
            gen_ce_loss(g, l, &[0, 1, q - 1]).unwrap()
        });
        let e = (ce - (q as f64).ln()).abs();
        ensure!(e <= 1e-7, "cross-entropy q={q} off by {e:e}");
    }
    let cases = [((0.3, 0.7), (0.3, 0.7), 0.0), ((0.0, 1.0), (1.0, 1.0), 0.5), ((0.0, 1.0), (0.0, 2.0), 2f64.ln() - 0.375)];
    for ((m1, s1), (m2, s2), want) in cases {
        let v = bn_loss_value(&[stats(m1, s1)], &[stats(m2, s2)]).map_err(|e| e.to_string())?;
        let e = (v - want).abs();
        ensure!(e <= 1e-9, "bn distance {want} off by {e:e}");
        worst = worst.max(e);
    }
    Ok(format!("worst error {worst:.1e}"))
}

fn gradient_checks() -> Check {
    let q = 3;
    let teacher = tiny_classifier(q, 10);
    let stored = teacher.collect_norm_stats().map_err(|e| e.to_string())?;
    let generator = tiny_generator(20);
    let (z, labels) = sample_noise_labels(6, Z_DIM, q, &mut seed::rng(3, &[])).unwrap();
    let w = GenLossWeights::default();
    let mut g = Graph::new();
    let bound = generator.bind(&mut g, true);
    let obj = generator_objective(&mut g, &teacher, &stored, &generator, &bound, &z, &labels, q, &w).unwrap();
    let grads = g.backward(obj.total);
    let analytic: Vec<_> = bound.vars.iter().map(|&v| grads.get(v)).collect();
    let gen_err = max_relative_error(&generator.params, &analytic, |store: &ParamStore| {
        let mut gen = generator.clone();
        gen.params = store.clone();
        let mut g = Graph::new();
        let b = gen.bind(&mut g, true);
        let obj = generator_objective(&mut g, &teacher, &stored, &gen, &b, &z, &labels, q, &w).unwrap();
        g.item(obj.total)
    });

    let ctx = TaskContext { task: 1, range: 3..5 };
    let model = tiny_classifier(5, 30);
    let previous = tiny_classifier(3, 40);
    let synthetic = synthesize(&tiny_generator(50), 4, ctx.q_prev(), &mut seed::rng(5, &[])).unwrap();
    let data = local_data(6, ctx.range.clone(), 60);
    let weights = ClientLossWeights { ft: 0.7, kd: 1.3 };
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let obj = mfcl_objective(&mut g, &model, &bound, &previous, &data.images, &data.labels, &synthetic, &ctx, &weights)
        .unwrap();
    let grads = g.backward(obj.total);
    let analytic: Vec<_> = bound.vars.iter().map(|&v| grads.get(v)).collect();
    let joint = Tensor::concat_rows(&[&data.images, &synthetic.images]);
    let all_labels: Vec<usize> = data.labels.iter().chain(&synthetic.labels).copied().collect();
    let frozen = {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let x = g.constant(joint);
        let out = model.forward(&mut g, &b, x, Mode::Train);
        g.value(out.features).clone()
    };
    let client_err = max_relative_error(&model.params, &analytic, |store: &ParamStore| {
        let mut m = model.clone();
        m.params = store.clone();
        let mut g = Graph::new();
        let b = m.bind(&mut g, true);
        let obj =
            mfcl_objective(&mut g, &m, &b, &previous, &data.images, &data.labels, &synthetic, &ctx, &weights).unwrap();
        let f = g.constant(frozen.clone());
        let w = g.constant(store.expect(HEAD_WEIGHT).clone());
        let bias = g.constant(store.expect(HEAD_BIAS).clone());
        let ft = finetune_loss(&mut g, f, w, bias, &all_labels).unwrap();
        g.item(obj.ce) + 0.7 * g.item(ft) + 1.3 * g.item(obj.kd)
    });
    ensure!(gen_err <= 1e-4 && client_err <= 1e-4, "generator {gen_err:.1e}, client {client_err:.1e}");
    Ok(format!("generator {gen_err:.1e}, client {client_err:.1e}"))
}

fn structural_invariants() -> Check {
    let model = relu_classifier(5, 11);
    let data = local_data(8, 3..5, 12);
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let x = g.constant(data.images.clone());
    let out = model.forward(&mut g, &b, x, Mode::Train);
    let ce = ce_current_task_loss(&mut g, out.logits, &data.labels, 3..5).unwrap();
    let w = b.var(&model.params, HEAD_WEIGHT);
    let bias = b.var(&model.params, HEAD_BIAS);
    let ft = finetune_loss(&mut g, out.features, w, bias, &data.labels).unwrap();
    let grads = g.backward(ce);
    let d = model.feature_dim;
    let gw = grads.data(w).ok_or("no head gradient")?;
    let gb = grads.data(bias).ok_or("no bias gradient")?;
    ensure!(gw[..3 * d].iter().chain(&gb[..3]).all(|&v| v == 0.0), "old head rows received gradient");
    let grads = g.backward(ft);
    for (i, p) in model.params.iter().enumerate() {
        if !GlobalClassifier::is_head_param(&p.name) {
            ensure!(
                grads.data(b.vars[i]).is_none_or(|d| d.iter().all(|&v| v == 0.0)),
                "fine-tuning reached {}",
                p.name
            );
        }
    }

    let ctx = TaskContext { task: 1, range: 3..5 };
    let previous = relu_classifier(3, 16);
    let generator = tiny_generator(17);
    let hashes = (model.hash(), previous.hash(), generator.hash());
    let mut config = LocalTrainConfig::new(Strategy::Mfcl);
    config.batch_size = 4;
    config.synthetic_batch_size = 4;
    let teachers = Teachers {
        previous: Some(&previous),
        generator: Some(&generator),
        local_previous: None,
    };
    mfcl_local_train(0, &model, teachers, &data, &config, &ctx, &mut seed::rng(1, &[])).map_err(|e| e.to_string())?;
    ensure!(hashes == (model.hash(), previous.hash(), generator.hash()), "client training changed a teacher");

    let teacher = tiny_classifier(3, 19);
    let before = teacher.hash();
    let mut gen = tiny_generator(20);
    let gen_config = GenTrainConfig {
        iterations: 5,
        batch_size: 6,
        z_dim: Z_DIM,
        lr: 1e-2,
        weights: GenLossWeights::default(),
        warm_start: true,
    };
    train_generator(&teacher, 3, &gen_config, &mut gen, &mut seed::rng(2, &[]), |_, _| {}).map_err(|e| e.to_string())?;
    ensure!(teacher.hash() == before, "generator training changed the classifier");
    Ok("split-head, fine-tuning and hash checks hold".into())
}

fn reductions() -> Check {
    let config = |s: Strategy, epochs| {
        let mut c = LocalTrainConfig::new(s);
        c.epochs = epochs;
        c.batch_size = 4;
        c.synthetic_batch_size = 4;
        c
    };
    let diff = |a: &ClientUpdate, b: &ClientUpdate| {
        a.params.iter().zip(b.params.iter()).map(|(x, y)| x.tensor.max_abs_diff(&y.tensor)).fold(0.0, f64::max)
    };
    let start = relu_classifier(4, 1);
    let previous = relu_classifier(2, 6);
    let data = local_data(10, 0..4, 2);
    let first = TaskContext { task: 0, range: 0..4 };
    let second = TaskContext { task: 1, range: 2..4 };
    let lwf_teachers = Teachers {
        previous: Some(&previous),
        generator: None,
        local_previous: Some(&previous),
    };
    let mut worst: f64 = 0.0;
    for epochs in 1..=3 {
        let rng = || seed::rng(7, &[]);
        let avg = fedavg_local_train(0, &start, &data, &config(Strategy::FedAvg, epochs), &mut rng()).unwrap();
        let mut c = config(Strategy::FedProx, epochs);
        c.prox_mu = 0.0;
        let prox = fedprox_local_train(0, &start, &data, &c, &mut rng()).unwrap();
        let mf = mfcl_local_train(0, &start, Teachers::default(), &data, &config(Strategy::Mfcl, epochs), &first, &mut rng())
            .unwrap();
        let split = split_head_local_train(0, &start, &data, &config(Strategy::FedAvg, epochs), &first, &mut rng()).unwrap();
        let mut c = config(Strategy::FedLwf2t, epochs);
        c.lwf_local_weight = 0.0;
        c.lwf_global_weight = 0.0;
        let lwf = fedlwf2t_local_train(0, &start, lwf_teachers, &data, &c, &second, &mut rng()).unwrap();
        for (name, d) in [("fedprox", diff(&prox, &avg)), ("mfcl", diff(&mf, &split)), ("fedlwf2t", diff(&lwf, &avg))] {
            ensure!(d <= 1e-7, "{name} after {epochs} epochs differs by {d:e}");
            worst = worst.max(d);
        }
    }
    Ok(format!("largest trajectory difference {worst:.1e}"))
}

fn aggregation_oracle() -> Check {
    let model = tiny_classifier(3, 1);
    let mut rng = seed::rng(42, &[]);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let k = rng.random_range(1..7);
        let copies = trial % 2 == 1;
        let updates: Vec<ClientUpdate> = (0..k)
            .map(|i| {
                let mut params = model.params.clone();
                let mut prng = seed::rng(trial, &[if copies { 0 } else { i as u64 }]);
                for p in params.entries_mut() {
                    for v in p.tensor.data_mut() {
                        *v += prng.random_range(-1.0..1.0);
                    }
                }
                ClientUpdate {
                    client_id: i,
                    params,
                    num_samples: rng.random_range(1..50),
                    steps: 0,
                    mean_loss: 0.0,
                    seconds: 0.0,
                }
            })
            .collect();
        let out = aggregate(&model, &updates).map_err(|e| e.to_string())?;
        let total: usize = updates.iter().map(|u| u.num_samples).sum();
        for (j, p) in out.params.iter().enumerate() {
            for i in 0..p.tensor.numel() {
                let got = p.tensor.data()[i];
                let values: Vec<f64> = updates.iter().map(|u| u.params.entries()[j].tensor.data()[i]).collect();
                let dense: f64 =
                    values.iter().zip(&updates).map(|(v, u)| v * u.num_samples as f64).sum::<f64>() / total as f64;
                worst = worst.max((got - dense).abs());
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                ensure!(lo <= got && got <= hi, "trial {trial}: {got} outside [{lo}, {hi}]");
                if copies {
                    ensure!(got == values[0], "trial {trial}: averaging copies changed a value");
                }
            }
        }
        ensure!(worst <= 1e-7, "trial {trial}: off the dense average by {worst:e}");
    }
    Ok(format!("100 trials, largest deviation {worst:.1e}"))
}

fn toy_index(per_class: &[usize]) -> DatasetIndex {
    let mut samples = Vec::new();
    for (class, &n) in per_class.iter().enumerate() {
        for _ in 0..n {
            let id = samples.len() as u64;
            samples.push(Sample {
                id,
                source: Source::Procedural { class, seed: id },
                label: class,
            });
        }
    }
    DatasetIndex {
        name: "toy".into(),
        split: Split::Train,
        image_shape: [1, 2, 2],
        classes: (0..per_class.len()).collect(),
        class_names: (0..per_class.len()).map(|c| format!("c{c}")).collect(),
        samples,
    }
}

fn partition_properties() -> Check {
    let per_class = [37, 120, 5, 0, 64];
    let index = toy_index(&per_class);
    for seed in 0..20 {
        let spec = PartitionSpec {
            num_clients: 7,
            alpha: 1.0,
            seed,
        };
        let shards = partition_task(&index, 0, &spec).map_err(|e| e.to_string())?;
        let mut counts = [0usize; 5];
        let mut ids: Vec<u64> = shards.iter().flat_map(|s| s.sample_ids.iter().copied()).collect();
        for &id in &ids {
            counts[index.samples[id as usize].label] += 1;
        }
        ids.sort_unstable();
        ids.dedup();
        ensure!(ids.len() == index.len() && counts == per_class, "seed {seed}: not an exact partition");
        ensure!(partition_task(&index, 0, &spec).unwrap() == shards, "seed {seed}: not reproducible");
    }
    let (n, per) = (10usize, 500usize);
    let even = toy_index(&[per; 4]);
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let spec = PartitionSpec {
            num_clients: n,
            alpha: 1e6,
            seed,
        };
        for shard in partition_task(&even, 0, &spec).map_err(|e| e.to_string())? {
            let mut counts = [0usize; 4];
            for id in shard.sample_ids {
                counts[even.samples[id as usize].label] += 1;
            }
            for c in counts {
                worst = worst.max((c as f64 / per as f64 * n as f64 - 1.0).abs());
            }
        }
    }
    ensure!(worst <= 0.05, "largest relative share deviation {worst:.4}");
    Ok(format!("alpha=1e6 largest relative share deviation {worst:.4}"))
}

fn metrics_oracle() -> Check {
    let mut m = AccuracyMatrix::new();
    for (row, seen) in [(vec![0.75], 0.75), (vec![0.5, 0.625], 0.5625), (vec![0.25, 0.5, 0.875], 0.5)] {
        m.push(row, seen).map_err(|e| e.to_string())?;
    }
    let a = average_accuracy(&m).map_err(|e| e.to_string())?;
    let f = average_forgetting(&m).map_err(|e| e.to_string())?;
    ensure!(a == (0.75 + 0.5625 + 0.5) / 3.0 && f == 0.3125, "got {a}, {f}");
    let row = [71.50, 55.00, 50.73, 45.73, 42.38, 40.62, 38.97, 36.18, 35.47, 33.25];
    let mut m = AccuracyMatrix::new();
    for (i, &v) in row.iter().enumerate() {
        m.push(vec![v / 100.0; i + 1], v / 100.0).map_err(|e| e.to_string())?;
    }
    let a = 100.0 * average_accuracy(&m).map_err(|e| e.to_string())?;
    ensure!((a - 44.98).abs() <= 0.005, "reference row averages to {a}");
    Ok(format!("reference row averages to {a:.4}"))
}

fn label_balance() -> Check {
    let (_, labels) = sample_noise_labels(100_000, 16, 10, &mut seed::rng(0, &[])).map_err(|e| e.to_string())?;
    let mut counts = [0usize; 10];
    for y in labels {
        counts[y] += 1;
    }
    let worst = counts.iter().map(|&c| (c as f64 / 1e5 - 0.1).abs()).fold(0.0, f64::max);
    ensure!(worst <= 0.01, "largest frequency deviation {worst}");
    Ok(format!("largest frequency deviation {worst:.4}"))
}

/// Pilot means on the desk-scale benchmark, as fractions: (Ã, f̃).
const PINNED: [(Strategy, f64, f64); 3] =
    [(Strategy::Oracle, 0.9870, 0.0052), (Strategy::Mfcl, 0.7441, 0.5813), (Strategy::FedAvg, 0.4563, 0.9979)];

fn desk_config(strategy: Strategy) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synth10-mfcl.toml");
    ExperimentConfig::load(&path, &[format!("strategy=\"{strategy}\"")]).expect("desk-scale config")
}

fn end_to_end_trend(out: &Path) -> Check {
    let mut got = Vec::new();
    for (strategy, pin_a, pin_f) in PINNED {
        let config = desk_config(strategy);
        run_all(&config, &out.join(strategy.to_string()), RunOptions::default(), &mut |_, _| {})
            .map_err(|e| e.to_string())?;
        let text = std::fs::read_to_string(out.join(strategy.to_string()).join("summary.json")).map_err(|e| e.to_string())?;
        let s: Summary = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        // Summaries are in percent.
        let a = s.average_accuracy.mean / 100.0;
        let f = s.average_forgetting.ok_or("no forgetting")?.mean / 100.0;
        ensure!((a - pin_a).abs() <= 0.05, "{strategy} accuracy {a:.4} vs pinned {pin_a}");
        ensure!((f - pin_f).abs() <= 0.05, "{strategy} forgetting {f:.4} vs pinned {pin_f}");
        got.push((a, f));
    }
    let [(oracle, _), (mfcl, mfcl_f), (avg, avg_f)] = got[..] else { unreachable!() };
    ensure!(oracle >= mfcl && mfcl >= avg + 0.08, "accuracy order {oracle:.4} / {mfcl:.4} / {avg:.4}");
    ensure!(mfcl_f <= avg_f - 0.15, "forgetting {mfcl_f:.4} vs {avg_f:.4}");
    Ok(format!(
        "accuracy oracle {oracle:.4}, mfcl {mfcl:.4}, fedavg {avg:.4}; forgetting mfcl {mfcl_f:.4}, fedavg {avg_f:.4}"
    ))
}

fn determinism(out: &Path) -> Check {
    let config = desk_config(Strategy::Mfcl);
    let first = RunPaths::new(&out.join("mfcl").join("seed-0")).matrix();
    let again = out.join("rerun");
    run_experiment(&config, 0, &again, RunOptions::default(), &mut |_| {}).map_err(|e| e.to_string())?;
    let a = std::fs::read(&first).map_err(|e| e.to_string())?;
    let b = std::fs::read(RunPaths::new(&again).matrix()).map_err(|e| e.to_string())?;
    ensure!(a == b, "accuracy matrices differ");
    Ok(format!("{} identical bytes", a.len()))
}

fn main() -> ExitCode {
    let skip_e2e = std::env::var_os("MFCL_ACCEPTANCE_SKIP_E2E").is_some();
    let out = tempfile::tempdir().expect("temp dir");
    let dir = out.path().to_path_buf();
    let criteria: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("closed-form loss values", Box::new(closed_form_losses)),
        ("gradient checks", Box::new(gradient_checks)),
        ("structural invariants", Box::new(structural_invariants)),
        ("reduction equivalences", Box::new(reductions)),
        ("aggregation oracle", Box::new(aggregation_oracle)),
        ("partition properties", Box::new(partition_properties)),
        ("metrics oracle", Box::new(metrics_oracle)),
        ("synthetic label balance", Box::new(label_balance)),
        ("desk-scale trend", Box::new({
            let dir = dir.clone();
            move || end_to_end_trend(&dir)
        })),
        ("determinism", Box::new(move || determinism(&dir))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if skip_e2e && n >= 9 {
            println!("SKIP {n:>2} {name}");
            continue;
        }
        let started = std::time::Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} ({secs:.1}s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {why} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
