//! Loss values against closed forms and per-sample loops, and the gradient
//! structure the client objective relies on.

mod common;

use common::{local_data, relu_classifier, tiny_classifier, tiny_generator, uniform, Z_DIM};
use mfcl::client_update::{
    ce_current_task_loss, feature_kd_loss, finetune_loss, lwf_kd_loss, mfcl_local_train, prox_term, LocalTrainConfig,
    Strategy, TaskContext, Teachers,
};
use mfcl::generative_replay::{
    bn_loss_value, gen_ce_loss, gen_diversity_loss, gen_prior_loss, train_generator, GenLossWeights, GenTrainConfig,
};
use mfcl::mfcl_grad::nn::{Mode, ParamKind};
use mfcl::mfcl_grad::{Graph, Tensor};
use mfcl::model_zoo::{GlobalClassifier, NormStats, HEAD_BIAS, HEAD_WEIGHT};
use mfcl::seed;

fn stats(mean: &[f64], std: &[f64]) -> NormStats {
    NormStats {
        layer_index: 0,
        name: "layer".into(),
        mean: mean.to_vec(),
        std: std.to_vec(),
    }
}

fn scalar(f: impl FnOnce(&mut Graph) -> mfcl::mfcl_grad::Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.item(v)
}

#[test]
fn diversity_uniform_and_one_hot() {
    for q in [2usize, 10] {
        let v = scalar(|g| {
            let logits = g.constant(Tensor::full(&[4, q], 0.3));
            gen_diversity_loss(g, logits).unwrap()
        });
        assert!((v + (q as f64).ln() / q as f64).abs() < 1e-9, "q={q}: {v}");
    }
    // Rows that are individually confident but cover classes evenly still
    // give a uniform batch mean.
    let v = scalar(|g| {
        let logits = g.constant(Tensor::new(&[2, 2], vec![900.0, 0.0, 0.0, 900.0]));
        gen_diversity_loss(g, logits).unwrap()
    });
    assert!((v + 2f64.ln() / 2.0).abs() < 1e-9);
    let v = scalar(|g| {
        let logits = g.constant(Tensor::new(&[3, 3], vec![900.0, 0.0, 0.0].repeat(3)));
        gen_diversity_loss(g, logits).unwrap()
    });
    assert_eq!(v, 0.0);
}

#[test]
fn bn_distance_closed_forms() {
    let s = stats(&[0.2, -1.0], &[0.5, 2.0]);
    assert!(bn_loss_value(&[s.clone()], &[s]).unwrap().abs() < 1e-9);
    let v = bn_loss_value(&[stats(&[0.0], &[1.0])], &[stats(&[1.0], &[1.0])]).unwrap();
    assert!((v - 0.5).abs() < 1e-9, "{v}");
    let v = bn_loss_value(&[stats(&[0.0], &[1.0])], &[stats(&[0.0], &[2.0])]).unwrap();
    assert!((v - (2f64.ln() - 0.375)).abs() < 1e-9, "{v}");
    // Layer average: one matching layer and one at 0.5.
    let v = bn_loss_value(
        &[stats(&[0.0], &[1.0]), stats(&[0.0], &[1.0])],
        &[stats(&[0.0], &[1.0]), stats(&[1.0], &[1.0])],
    )
    .unwrap();
    assert!((v - 0.25).abs() < 1e-9);
    assert!(bn_loss_value(&[stats(&[0.0], &[1.0])], &[]).is_err());
    assert!(bn_loss_value(&[stats(&[0.0], &[1.0])], &[stats(&[0.0, 1.0], &[1.0, 1.0])]).is_err());
}

#[test]
fn cross_entropy_closed_form_and_loop() {
    for q in [2usize, 10] {
        let v = scalar(|g| {
            let logits = g.constant(Tensor::full(&[3, q], -0.7));
            gen_ce_loss(g, logits, &[0, 1, q - 1]).unwrap()
        });
        assert!((v - (q as f64).ln()).abs() < 1e-7);
        let v = scalar(|g| {
            let logits = g.constant(Tensor::full(&[2, q + 3], 1.5));
            ce_current_task_loss(g, logits, &[3, q + 2], 3..q + 3).unwrap()
        });
        assert!((v - (q as f64).ln()).abs() < 1e-7);
    }

    let logits = uniform(&[5, 4], -3.0, 3.0, 1);
    let labels = [0, 3, 2, 2, 1];
    let mut reference = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        reference += lse - row[y];
    }
    reference /= labels.len() as f64;
    let v = scalar(|g| {
        let l = g.constant(logits.clone());
        gen_ce_loss(g, l, &labels).unwrap()
    });
    assert!((v - reference).abs() < 1e-12);

    let mut g = Graph::new();
    let l = g.constant(logits);
    assert!(gen_ce_loss(&mut g, l, &[0, 1, 2, 3, 4]).is_err());
    assert!(ce_current_task_loss(&mut g, l, &[0, 2, 2, 2, 2], 2..4).is_err());
}

#[test]
fn prior_is_zero_on_constant_images() {
    let v = scalar(|g| {
        let x = g.constant(Tensor::full(&[2, 1, 5, 5], 0.4));
        gen_prior_loss(g, x)
    });
    assert!(v.abs() < 1e-12);
    let v = scalar(|g| {
        let x = g.constant(uniform(&[2, 1, 5, 5], -1.0, 1.0, 2));
        gen_prior_loss(g, x)
    });
    assert!(v > 0.0);
}

#[test]
fn feature_distillation_matches_loop() {
    let f = uniform(&[4, 3], -1.0, 1.0, 3);
    let t = uniform(&[4, 3], -1.0, 1.0, 4);
    let w = uniform(&[2, 3], -1.0, 1.0, 5);
    let mut reference = 0.0;
    for r in 0..4 {
        for k in 0..2 {
            let p: f64 = (0..3).map(|j| w.row(k)[j] * (f.row(r)[j] - t.row(r)[j])).sum();
            reference += p * p;
        }
    }
    reference /= 4.0;
    let v = scalar(|g| {
        let fv = g.param(f.clone());
        feature_kd_loss(g, fv, &t, &w).unwrap()
    });
    assert!((v - reference).abs() < 1e-12);
}

#[test]
fn lwf_distillation_matches_loop() {
    let student = uniform(&[3, 5], -2.0, 2.0, 6);
    let teacher = uniform(&[3, 4], -2.0, 2.0, 7);
    let (q_old, temp) = (3, 2.0);
    let softmax = |row: &[f64]| {
        let e: Vec<f64> = row.iter().map(|v| (v / temp).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let mut reference = 0.0;
    for r in 0..3 {
        let pt = softmax(&teacher.row(r)[..q_old]);
        let ps = softmax(&student.row(r)[..q_old]);
        reference += pt.iter().zip(&ps).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
    }
    reference *= temp * temp / 3.0;
    let v = scalar(|g| {
        let s = g.param(student.clone());
        lwf_kd_loss(g, s, &teacher, q_old, temp).unwrap()
    });
    assert!((v - reference).abs() < 1e-12);
    let v = scalar(|g| {
        let s = g.param(teacher.slice_rows(0, 3));
        lwf_kd_loss(g, s, &teacher, q_old, temp).unwrap()
    });
    assert!(v.abs() < 1e-12);
}

#[test]
fn proximal_term_matches_loop() {
    let model = tiny_classifier(5, 8);
    let reference = tiny_classifier(3, 9);
    let mu = 0.4;
    let mut expected = 0.0;
    for p in model.params.iter().filter(|p| p.kind == ParamKind::Trainable) {
        let r = reference.params.expect(&p.name);
        let n = if GlobalClassifier::is_head_param(&p.name) { r.numel() } else { p.tensor.numel() };
        expected += (0..n).map(|i| (p.tensor.data()[i] - r.data()[i]).powi(2)).sum::<f64>();
    }
    expected *= mu / 2.0;
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let v = prox_term(&mut g, &model, &b, &reference, mu, Some(3)).unwrap();
    assert!((g.item(v) - expected).abs() < 1e-12);
    let same = prox_term(&mut g, &model, &b, &model, mu, None).unwrap();
    assert_eq!(g.item(same), 0.0);
}

#[test]
fn split_head_leaves_old_rows_without_gradient() {
    let model = relu_classifier(5, 11);
    let data = local_data(8, 3..5, 12);
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let x = g.constant(data.images.clone());
    let out = model.forward(&mut g, &b, x, Mode::Train);
    let loss = ce_current_task_loss(&mut g, out.logits, &data.labels, 3..5).unwrap();
    let grads = g.backward(loss);
    let gw = grads.get(b.var(&model.params, HEAD_WEIGHT)).unwrap();
    let gb = grads.get(b.var(&model.params, HEAD_BIAS)).unwrap();
    let d = model.feature_dim;
    assert!(gw.data()[..3 * d].iter().all(|&v| v == 0.0));
    assert!(gb.data()[..3].iter().all(|&v| v == 0.0));
    assert!(gw.data()[3 * d..].iter().any(|&v| v != 0.0));
}

#[test]
fn fine_tuning_leaves_extractor_without_gradient() {
    let model = relu_classifier(4, 13);
    let data = local_data(8, 0..4, 14);
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let x = g.constant(data.images.clone());
    let out = model.forward(&mut g, &b, x, Mode::Train);
    let w = b.var(&model.params, HEAD_WEIGHT);
    let bias = b.var(&model.params, HEAD_BIAS);
    let loss = finetune_loss(&mut g, out.features, w, bias, &data.labels).unwrap();
    let grads = g.backward(loss);
    for (i, p) in model.params.iter().enumerate() {
        let grad = grads.data(b.vars[i]);
        if GlobalClassifier::is_head_param(&p.name) {
            assert!(grad.is_some_and(|d| d.iter().any(|&v| v != 0.0)), "{}", p.name);
        } else {
            assert!(grad.is_none_or(|d| d.iter().all(|&v| v == 0.0)), "{}", p.name);
        }
    }
}

#[test]
fn client_training_does_not_touch_teachers() {
    let ctx = TaskContext { task: 1, range: 3..5 };
    let start = relu_classifier(5, 15);
    let previous = relu_classifier(3, 16);
    let generator = tiny_generator(17);
    let hashes = (start.hash(), previous.hash(), generator.hash());
    let data = local_data(12, ctx.range.clone(), 18);
    let mut config = LocalTrainConfig::new(Strategy::Mfcl);
    config.epochs = 2;
    config.batch_size = 4;
    config.synthetic_batch_size = 4;
    let teachers = Teachers {
        previous: Some(&previous),
        generator: Some(&generator),
        local_previous: None,
    };
    let update = mfcl_local_train(0, &start, teachers, &data, &config, &ctx, &mut seed::rng(1, &[])).unwrap();
    assert_ne!(update.params, start.params);
    assert_eq!(update.steps, 6);
    assert_eq!(hashes, (start.hash(), previous.hash(), generator.hash()));

    let without = Teachers {
        generator: None,
        ..teachers
    };
    assert!(mfcl_local_train(0, &start, without, &data, &config, &ctx, &mut seed::rng(1, &[])).is_err());
}

#[test]
fn generator_training_does_not_touch_the_classifier() {
    let teacher = tiny_classifier(3, 19);
    let before = teacher.hash();
    let mut generator = tiny_generator(20);
    let initial = generator.hash();
    let config = GenTrainConfig {
        iterations: 5,
        batch_size: 6,
        z_dim: Z_DIM,
        lr: 1e-2,
        weights: GenLossWeights::default(),
        warm_start: true,
    };
    let mut seen = 0;
    train_generator(&teacher, 3, &config, &mut generator, &mut seed::rng(2, &[]), |i, l| {
        assert_eq!(i, seen);
        assert!(l.total.is_finite());
        seen += 1;
    })
    .unwrap();
    assert_eq!(seen, 5);
    assert_eq!(teacher.hash(), before);
    assert_ne!(generator.hash(), initial);
}
