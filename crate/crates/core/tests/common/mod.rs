//! Tiny models and a finite-difference checker shared by the integration
//! tests.
#![allow(dead_code)]

use mfcl::datasets::LocalData;
use mfcl::mfcl_grad::nn::{self, Layer, ParamKind, ParamStore};
use mfcl::mfcl_grad::Tensor;
use mfcl::model_zoo::{GeneratorNet, GlobalClassifier, HEAD_BIAS, HEAD_WEIGHT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const IMAGE: [usize; 3] = [1, 4, 4];
pub const Z_DIM: usize = 4;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// conv 1→3, norm, tanh, global pooling, then a `q`-row head. Smooth
/// everywhere so finite differences behave. Running statistics are set away
/// from their defaults.
pub fn tiny_classifier(q: usize, seed: u64) -> GlobalClassifier {
    let extractor = vec![
        Layer::conv("c1", 1, 3, 3, 1, 1, false),
        Layer::bn("n1", 3),
        Layer::Tanh,
        Layer::GlobalAvgPool,
    ];
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nn::init_params(&extractor, &mut params, &mut rng);
    params.insert("n1.weight", ParamKind::Trainable, uniform(&[3], 0.7, 1.3, seed + 1));
    params.insert("n1.bias", ParamKind::Trainable, uniform(&[3], -0.2, 0.2, seed + 2));
    params.insert("n1.running_mean", ParamKind::Buffer, uniform(&[3], -0.3, 0.3, seed + 3));
    params.insert("n1.running_var", ParamKind::Buffer, uniform(&[3], 0.4, 1.6, seed + 4));
    params.insert(HEAD_WEIGHT, ParamKind::Trainable, uniform(&[q, 3], -1.0, 1.0, seed + 5));
    params.insert(HEAD_BIAS, ParamKind::Trainable, uniform(&[q], -0.5, 0.5, seed + 6));
    GlobalClassifier {
        arch: "tiny".into(),
        input_shape: IMAGE,
        feature_dim: 3,
        extractor,
        params,
        task_tag: 0,
    }
}

/// Same extractor shape as [`tiny_classifier`] but with rectifiers and more
/// channels; used where training dynamics matter more than smoothness.
pub fn relu_classifier(q: usize, seed: u64) -> GlobalClassifier {
    let extractor = vec![
        Layer::conv("c1", 1, 6, 3, 1, 1, false),
        Layer::bn("n1", 6),
        Layer::Relu,
        Layer::GlobalAvgPool,
    ];
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nn::init_params(&extractor, &mut params, &mut rng);
    params.insert(HEAD_WEIGHT, ParamKind::Trainable, uniform(&[q, 6], -0.4, 0.4, seed + 5));
    params.insert(HEAD_BIAS, ParamKind::Trainable, Tensor::zeros(&[q]));
    GlobalClassifier {
        arch: "tiny_relu".into(),
        input_shape: IMAGE,
        feature_dim: 6,
        extractor,
        params,
        task_tag: 0,
    }
}

/// Dense `4 → 2x2x2`, norm, upsample, conv 2→1, tanh, norm: 1x4x4 images.
pub fn tiny_generator(seed: u64) -> GeneratorNet {
    let layers = vec![
        Layer::linear("fc", Z_DIM, 8),
        Layer::Reshape { shape: vec![2, 2, 2] },
        Layer::bn("bn0", 2),
        Layer::Upsample2,
        Layer::conv("conv_out", 2, 1, 3, 1, 1, true),
        Layer::Tanh,
        Layer::bn("bn_out", 1),
    ];
    let mut params = ParamStore::new();
    nn::init_params(&layers, &mut params, &mut ChaCha8Rng::seed_from_u64(seed));
    params.insert("bn0.weight", ParamKind::Trainable, uniform(&[2], 0.8, 1.2, seed + 1));
    params.insert("bn_out.bias", ParamKind::Trainable, uniform(&[1], -0.1, 0.1, seed + 2));
    GeneratorNet {
        preset: "tiny".into(),
        z_dim: Z_DIM,
        output_shape: IMAGE,
        layers,
        params,
    }
}

/// `n` random images with labels cycling through `labels`.
pub fn local_data(n: usize, labels: std::ops::Range<usize>, seed: u64) -> LocalData {
    let images = uniform(&[n, IMAGE[0], IMAGE[1], IMAGE[2]], -1.0, 1.0, seed);
    let width = labels.end - labels.start;
    LocalData {
        images,
        labels: (0..n).map(|i| labels.start + i % width).collect(),
    }
}

/// Compares analytic gradients of every trainable entry of `store` with
/// central differences of `numeric`. `analytic` returns the gradient per
/// store entry (`None` meaning zero). Returns the worst relative error,
/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn max_relative_error(
    store: &ParamStore,
    analytic: &[Option<Tensor>],
    numeric: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, p) in store.entries().iter().enumerate() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let zeros = Tensor::zeros(p.tensor.shape());
        let a = analytic[i].as_ref().unwrap_or(&zeros);
        for k in 0..p.tensor.numel() {
            let mut plus = store.clone();
            plus.entries_mut()[i].tensor.data_mut()[k] += h;
            let mut minus = store.clone();
            minus.entries_mut()[i].tensor.data_mut()[k] -= h;
            let n = (numeric(&plus) - numeric(&minus)) / (2.0 * h);
            let av = a.data()[k];
            let err = (av - n).abs() / av.abs().max(n.abs()).max(1e-6);
            assert!(err.is_finite(), "{}[{k}]: analytic {av}, numeric {n}", p.name);
            if err > worst {
                worst = err;
                if err > 1e-4 {
                    eprintln!("{}[{k}]: analytic {av:.10e} numeric {n:.10e}", p.name);
                }
            }
        }
    }
    worst
}
