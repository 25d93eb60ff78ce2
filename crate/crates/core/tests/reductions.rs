//! Strategies that coincide for particular settings must follow the same
//! parameter trajectory under the same seed.

mod common;

use common::{local_data, relu_classifier, tiny_generator};
use mfcl::client_update::{
    fedavg_local_train, fedlwf2t_local_train, fedprox_local_train, fedproxplus_local_train, local_train,
    mfcl_local_train, split_head_local_train, ClientUpdate, LocalTrainConfig, Strategy, TaskContext, Teachers,
};
use mfcl::datasets::LocalData;
use mfcl::mfcl_grad::nn::{Layer, ParamKind, ParamStore};
use mfcl::mfcl_grad::Tensor;
use mfcl::model_zoo::{GlobalClassifier, HEAD_BIAS, HEAD_WEIGHT};
use mfcl::seed;

const TOL: f64 = 1e-7;

fn max_diff(a: &ParamStore, b: &ParamStore) -> f64 {
    assert!(a.same_layout(b));
    a.iter().zip(b.iter()).map(|(x, y)| x.tensor.max_abs_diff(&y.tensor)).fold(0.0, f64::max)
}

fn config(strategy: Strategy, epochs: usize) -> LocalTrainConfig {
    let mut c = LocalTrainConfig::new(strategy);
    c.epochs = epochs;
    c.batch_size = 4;
    c.synthetic_batch_size = 4;
    c
}

/// Runs `a` and `b` for one to three epochs from the same seed and checks
/// that every prefix of the trajectories agrees.
fn same_trajectory(
    a: impl Fn(&LocalTrainConfig, &mut rand_chacha::ChaCha8Rng) -> ClientUpdate,
    b: impl Fn(&LocalTrainConfig, &mut rand_chacha::ChaCha8Rng) -> ClientUpdate,
    strategy_a: Strategy,
    strategy_b: Strategy,
) {
    for epochs in 1..=3 {
        let ua = a(&config(strategy_a, epochs), &mut seed::rng(7, &[]));
        let ub = b(&config(strategy_b, epochs), &mut seed::rng(7, &[]));
        assert_eq!(ua.steps, ub.steps);
        let d = max_diff(&ua.params, &ub.params);
        assert!(d <= TOL, "epochs {epochs}: trajectories differ by {d:e}");
    }
}

#[test]
fn fedprox_without_penalty_is_fedavg() {
    let start = relu_classifier(4, 1);
    let data = local_data(10, 0..4, 2);
    same_trajectory(
        |c, rng| {
            let mut c = c.clone();
            c.prox_mu = 0.0;
            fedprox_local_train(0, &start, &data, &c, rng).unwrap()
        },
        |c, rng| fedavg_local_train(0, &start, &data, c, rng).unwrap(),
        Strategy::FedProx,
        Strategy::FedAvg,
    );
}

#[test]
fn mfcl_on_the_first_task_is_split_head_training() {
    let start = relu_classifier(2, 3);
    let data = local_data(10, 0..2, 4);
    let ctx = TaskContext { task: 0, range: 0..2 };
    same_trajectory(
        |c, rng| mfcl_local_train(0, &start, Teachers::default(), &data, c, &ctx, rng).unwrap(),
        |c, rng| split_head_local_train(0, &start, &data, c, &ctx, rng).unwrap(),
        Strategy::Mfcl,
        Strategy::FedAvg,
    );
    // With no old classes the split head is the full head.
    same_trajectory(
        |c, rng| local_train(0, &start, Teachers::default(), &data, c, &ctx, rng).unwrap(),
        |c, rng| fedavg_local_train(0, &start, &data, c, rng).unwrap(),
        Strategy::Mfcl,
        Strategy::FedAvg,
    );
}

#[test]
fn lwf_without_distillation_is_fedavg() {
    let start = relu_classifier(4, 5);
    let previous = relu_classifier(2, 6);
    let data = local_data(10, 2..4, 7);
    let ctx = TaskContext { task: 1, range: 2..4 };
    let teachers = Teachers {
        previous: Some(&previous),
        generator: None,
        local_previous: Some(&previous),
    };
    same_trajectory(
        |c, rng| {
            let mut c = c.clone();
            c.lwf_local_weight = 0.0;
            c.lwf_global_weight = 0.0;
            fedlwf2t_local_train(0, &start, teachers, &data, &c, &ctx, rng).unwrap()
        },
        |c, rng| fedavg_local_train(0, &start, &data, c, rng).unwrap(),
        Strategy::FedLwf2t,
        Strategy::FedAvg,
    );
    // With distillation on, the trajectories part.
    let c = config(Strategy::FedLwf2t, 1);
    let a = fedlwf2t_local_train(0, &start, teachers, &data, &c, &ctx, &mut seed::rng(7, &[])).unwrap();
    let b = fedavg_local_train(0, &start, &data, &c, &mut seed::rng(7, &[])).unwrap();
    assert!(max_diff(&a.params, &b.params) > 1e-6);
}

#[test]
fn mfcl_with_old_classes_differs_from_split_head() {
    let start = relu_classifier(4, 8);
    let previous = relu_classifier(2, 9);
    let generator = tiny_generator(10);
    let data = local_data(8, 2..4, 11);
    let ctx = TaskContext { task: 1, range: 2..4 };
    let teachers = Teachers {
        previous: Some(&previous),
        generator: Some(&generator),
        local_previous: None,
    };
    let c = config(Strategy::Mfcl, 1);
    let a = mfcl_local_train(0, &start, teachers, &data, &c, &ctx, &mut seed::rng(7, &[])).unwrap();
    let b = split_head_local_train(0, &start, &data, &c, &ctx, &mut seed::rng(7, &[])).unwrap();
    assert!(max_diff(&a.params, &b.params) > 1e-6);
    // Old head rows move only through fine-tuning on synthetic samples.
    let d = start.feature_dim;
    let old = |p: &ParamStore| p.expect(HEAD_WEIGHT).data()[..2 * d].to_vec();
    assert_eq!(old(&b.params), old(&start.params));
    assert_ne!(old(&a.params), old(&start.params));
}

/// Squared distance of the parameters FedProx+ anchors: everything the
/// previous model has, with the head cut to its rows.
fn anchored_distance(model: &ParamStore, previous: &GlobalClassifier) -> f64 {
    model
        .iter()
        .filter(|p| p.kind == ParamKind::Trainable)
        .map(|p| {
            let r = previous.params.expect(&p.name);
            (0..r.numel()).map(|i| (p.tensor.data()[i] - r.data()[i]).powi(2)).sum::<f64>()
        })
        .sum()
}

#[test]
fn fedproxplus_drift_shrinks_as_the_penalty_grows() {
    let previous = relu_classifier(2, 12);
    let mut start = previous.clone();
    start.expand_head(4, 0).unwrap();
    let data = local_data(16, 2..4, 13);
    let ctx = TaskContext { task: 1, range: 2..4 };
    let teachers = Teachers {
        previous: Some(&previous),
        ..Teachers::default()
    };
    let mut last = f64::INFINITY;
    for mu in [0.0, 0.5, 2.0, 8.0] {
        let mut c = config(Strategy::FedProxPlus, 3);
        c.prox_mu = mu;
        let u = fedproxplus_local_train(0, &start, teachers, &data, &c, &ctx, &mut seed::rng(7, &[])).unwrap();
        let d = anchored_distance(&u.params, &previous);
        assert!(d < last, "mu {mu}: drift {d} not below {last}");
        last = d;
    }
    // The first task has nothing to anchor to.
    let first = TaskContext { task: 0, range: 0..2 };
    let c = config(Strategy::FedProxPlus, 1);
    let a = fedproxplus_local_train(0, &previous, Teachers::default(), &data_first(), &c, &first, &mut seed::rng(7, &[]))
        .unwrap();
    let b = fedavg_local_train(0, &previous, &data_first(), &c, &mut seed::rng(7, &[])).unwrap();
    assert_eq!(a.params, b.params);
}

fn data_first() -> LocalData {
    local_data(8, 0..2, 14)
}

#[test]
fn one_sgd_step_on_a_linear_model() {
    // Identity features: logits = W x + b on 2-pixel inputs.
    let mut params = ParamStore::new();
    let w = Tensor::new(&[3, 2], vec![0.5, -0.2, 0.1, 0.3, -0.4, 0.2]);
    let b = Tensor::new(&[3], vec![0.05, -0.1, 0.0]);
    params.insert(HEAD_WEIGHT, ParamKind::Trainable, w.clone());
    params.insert(HEAD_BIAS, ParamKind::Trainable, b.clone());
    let model = GlobalClassifier {
        arch: "linear".into(),
        input_shape: [1, 1, 2],
        feature_dim: 2,
        extractor: vec![Layer::Flatten],
        params,
        task_tag: 0,
    };
    let x = [[1.0, 2.0], [-1.0, 0.5], [0.3, -0.7]];
    let y = [0usize, 2, 1];
    let data = LocalData {
        images: Tensor::new(&[3, 1, 1, 2], x.iter().flatten().copied().collect()),
        labels: y.to_vec(),
    };
    let mut c = config(Strategy::FedAvg, 1);
    c.batch_size = 3;
    c.lr = 0.5;
    let u = fedavg_local_train(0, &model, &data, &c, &mut seed::rng(0, &[])).unwrap();
    assert_eq!(u.steps, 1);

    let mut gw = [[0.0; 2]; 3];
    let mut gb = [0.0; 3];
    for (xi, &yi) in x.iter().zip(&y) {
        let z: Vec<f64> = (0..3).map(|k| w.row(k)[0] * xi[0] + w.row(k)[1] * xi[1] + b.data()[k]).collect();
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        for k in 0..3 {
            let d = z[k].exp() / s - if k == yi { 1.0 } else { 0.0 };
            gb[k] += d / 3.0;
            gw[k][0] += d * xi[0] / 3.0;
            gw[k][1] += d * xi[1] / 3.0;
        }
    }
    let new_w = u.params.expect(HEAD_WEIGHT);
    let new_b = u.params.expect(HEAD_BIAS);
    for k in 0..3 {
        assert!((new_b.data()[k] - (b.data()[k] - 0.5 * gb[k])).abs() < 1e-12);
        for j in 0..2 {
            assert!((new_w.row(k)[j] - (w.row(k)[j] - 0.5 * gw[k][j])).abs() < 1e-12);
        }
    }
}

#[test]
fn nothing_to_train_leaves_the_model_unchanged() {
    let start = relu_classifier(3, 15);
    let data = local_data(6, 0..3, 16);
    let u = fedavg_local_train(0, &start, &data, &config(Strategy::FedAvg, 0), &mut seed::rng(0, &[])).unwrap();
    assert_eq!((u.params, u.steps), (start.params.clone(), 0));
    let empty = LocalData {
        images: Tensor::zeros(&[0, 1, 4, 4]),
        labels: Vec::new(),
    };
    let u = fedavg_local_train(0, &start, &empty, &config(Strategy::FedAvg, 2), &mut seed::rng(0, &[])).unwrap();
    assert_eq!((u.params, u.num_samples), (start.params, 0));
}
