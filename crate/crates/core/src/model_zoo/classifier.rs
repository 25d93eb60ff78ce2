use mfcl_grad::nn::{self, Bound, Layer, Mode, ParamKind, ParamStore, Trace};
use mfcl_grad::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Floor applied to running standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-5;

/// Running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub layer_index: usize,
    pub name: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Feature extractor plus a linear head that grows with each task.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalClassifier {
    pub arch: String,
    pub input_shape: [usize; 3],
    pub feature_dim: usize,
    pub extractor: Vec<Layer>,
    /// Extractor parameters followed by `head.weight` `[q, d]` and `head.bias` `[q]`.
    pub params: ParamStore,
    /// Index of the last task this model was trained on.
    pub task_tag: usize,
}

/// Graph handles produced by [`GlobalClassifier::forward`].
pub struct ClassifierOutput {
    pub features: Var,
    pub logits: Var,
    pub trace: Trace,
}

fn conv_bn_relu(prefix: &str, cin: usize, cout: usize, stride: usize) -> Vec<Layer> {
    vec![
        Layer::conv(format!("{prefix}.conv"), cin, cout, 3, stride, 1, false),
        Layer::bn(format!("{prefix}.bn"), cout),
        Layer::Relu,
    ]
}

fn basic_block(prefix: &str, cin: usize, cout: usize, stride: usize) -> Vec<Layer> {
    let body = vec![
        Layer::conv(format!("{prefix}.conv1"), cin, cout, 3, stride, 1, false),
        Layer::bn(format!("{prefix}.bn1"), cout),
        Layer::Relu,
        Layer::conv(format!("{prefix}.conv2"), cout, cout, 3, 1, 1, false),
        Layer::bn(format!("{prefix}.bn2"), cout),
    ];
    let shortcut = if stride != 1 || cin != cout {
        vec![
            Layer::conv(format!("{prefix}.down"), cin, cout, 1, stride, 0, false),
            Layer::bn(format!("{prefix}.down_bn"), cout),
        ]
    } else {
        Vec::new()
    };
    vec![Layer::Residual { body, shortcut }, Layer::Relu]
}

/// ResNet18 body. Inputs up to 64 pixels get a 3x3 stride-1 stem without
/// pooling; larger inputs keep the 7x7 stride-2 stem followed by pooling.
fn resnet18(channels: usize, height: usize) -> (Vec<Layer>, usize) {
    let mut layers = if height <= 64 {
        vec![
            Layer::conv("stem.conv", channels, 64, 3, 1, 1, false),
            Layer::bn("stem.bn", 64),
            Layer::Relu,
        ]
    } else {
        vec![
            Layer::conv("stem.conv", channels, 64, 7, 2, 3, false),
            Layer::bn("stem.bn", 64),
            Layer::Relu,
            Layer::MaxPool2,
        ]
    };
    let mut cin = 64;
    for (stage, &width) in [64, 128, 256, 512].iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            layers.extend(basic_block(&format!("layer{}.{block}", stage + 1), cin, width, stride));
            cin = width;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    (layers, 512)
}

fn small_cnn(channels: usize) -> (Vec<Layer>, usize) {
    let mut layers = conv_bn_relu("block1", channels, 16, 1);
    layers.push(Layer::MaxPool2);
    layers.extend(conv_bn_relu("block2", 16, 32, 1));
    layers.push(Layer::MaxPool2);
    layers.extend(conv_bn_relu("block3", 32, 64, 1));
    layers.push(Layer::GlobalAvgPool);
    (layers, 64)
}

/// Registered architecture names.
pub const ARCHITECTURES: &[&str] = &["resnet18", "small_cnn"];

pub fn build_classifier(arch: &str, input_shape: [usize; 3], initial_classes: usize, seed: u64) -> Result<GlobalClassifier> {
    if initial_classes == 0 {
        return Err(Error::Config("a classifier needs at least one class".into()));
    }
    let [c, h, w] = input_shape;
    let (extractor, feature_dim) = match arch {
        "resnet18" => resnet18(c, h),
        "small_cnn" => small_cnn(c),
        other => {
            return Err(Error::Config(format!(
                "unknown architecture `{other}` (known: {})",
                ARCHITECTURES.join(", ")
            )))
        }
    };
    let out = nn::infer_shape(&extractor, &[c, h, w]).map_err(Error::Shape)?;
    debug_assert_eq!(out, vec![feature_dim]);
    let mut params = ParamStore::new();
    nn::init_params(&extractor, &mut params, &mut seed::rng(seed, &[seed::INIT]));
    let mut rng = seed::rng(seed, &[seed::HEAD, initial_classes as u64]);
    params.insert(
        HEAD_WEIGHT,
        ParamKind::Trainable,
        nn::uniform_fan_in(&[initial_classes, feature_dim], feature_dim, &mut rng),
    );
    params.insert(
        HEAD_BIAS,
        ParamKind::Trainable,
        nn::uniform_fan_in(&[initial_classes], feature_dim, &mut rng),
    );
    Ok(GlobalClassifier {
        arch: arch.into(),
        input_shape,
        feature_dim,
        extractor,
        params,
        task_tag: 0,
    })
}

impl GlobalClassifier {
    pub fn num_classes(&self) -> usize {
        self.params.expect(HEAD_BIAS).numel()
    }

    pub fn head_weight(&self) -> &Tensor {
        self.params.expect(HEAD_WEIGHT)
    }

    pub fn head_bias(&self) -> &Tensor {
        self.params.expect(HEAD_BIAS)
    }

    pub fn is_head_param(name: &str) -> bool {
        name == HEAD_WEIGHT || name == HEAD_BIAS
    }

    /// Adds rows `[q, new_q)` to the head; existing rows are untouched.
    pub fn expand_head(&mut self, new_q: usize, seed: u64) -> Result<()> {
        let q = self.num_classes();
        if new_q <= q {
            return Err(Error::Invalid(format!("head already has {q} rows, cannot expand to {new_q}")));
        }
        let d = self.feature_dim;
        let mut rng = seed::rng(seed, &[seed::HEAD, new_q as u64]);
        let extra_w = nn::uniform_fan_in(&[new_q - q, d], d, &mut rng);
        let extra_b = nn::uniform_fan_in(&[new_q - q], d, &mut rng);
        let w = Tensor::concat_rows(&[self.head_weight(), &extra_w]);
        let b = Tensor::concat_rows(&[self.head_bias(), &extra_b]);
        self.params.insert(HEAD_WEIGHT, ParamKind::Trainable, w);
        self.params.insert(HEAD_BIAS, ParamKind::Trainable, b);
        Ok(())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(Error::Shape(format!(
                "classifier expects [B, {}, {}, {}], got {shape:?}",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        Ok(())
    }

    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(graph, trainable)
    }

    /// Penultimate features and full logits on `x`.
    pub fn forward(&self, graph: &mut Graph, bound: &Bound, x: Var, mode: Mode) -> ClassifierOutput {
        let mut trace = Trace::default();
        let features = nn::forward(&self.extractor, graph, &self.params, bound, x, mode, &mut trace);
        let w = bound.var(&self.params, HEAD_WEIGHT);
        let b = bound.var(&self.params, HEAD_BIAS);
        let logits = graph.linear(features, w, Some(b));
        ClassifierOutput { features, logits, trace }
    }

    fn eval_chunks(&self, x: &Tensor, mut f: impl FnMut(&Graph, &ClassifierOutput)) -> Result<()> {
        self.check_input(x.shape())?;
        let per_sample: usize = self.input_shape.iter().product();
        let chunk = (1 << 21) / per_sample.max(1) + 1;
        let n = x.dim(0);
        let mut lo = 0;
        while lo < n {
            let hi = (lo + chunk).min(n);
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let xv = g.constant(x.slice_rows(lo, hi));
            let out = self.forward(&mut g, &bound, xv, Mode::Eval);
            f(&g, &out);
            lo = hi;
        }
        Ok(())
    }

    /// Eval-mode penultimate features, `[B, d]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut parts = Vec::new();
        self.eval_chunks(x, |g, out| parts.push(g.value(out.features).clone()))?;
        Ok(stack(parts, &[0, self.feature_dim]))
    }

    /// Eval-mode logits, `[B, q]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut parts = Vec::new();
        self.eval_chunks(x, |g, out| parts.push(g.value(out.logits).clone()))?;
        Ok(stack(parts, &[0, self.num_classes()]))
    }

    /// Eval-mode logits restricted to classes `[lo, hi)`.
    pub fn logits_slice(&self, x: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
        check_slice(lo, hi, self.num_classes())?;
        let full = self.logits(x)?;
        let q = self.num_classes();
        let n = full.dim(0);
        let mut data = Vec::with_capacity(n * (hi - lo));
        for r in 0..n {
            data.extend_from_slice(&full.data()[r * q + lo..r * q + hi]);
        }
        Ok(Tensor::new(&[n, hi - lo], data))
    }

    /// Arg-max class over the first `q` logits.
    pub fn predict(&self, x: &Tensor, q: usize) -> Result<Vec<usize>> {
        Ok(self.logits_slice(x, 0, q)?.argmax_rows())
    }

    /// Running mean and floored standard deviation of every normalization
    /// layer, in forward order.
    pub fn collect_norm_stats(&self) -> Result<Vec<NormStats>> {
        let names = nn::norm_layer_names(&self.extractor);
        if names.is_empty() {
            return Err(Error::Missing(
                "normalization layers with running statistics; \
                 supply substitute statistics for this architecture"
                    .into(),
            ));
        }
        Ok(names
            .into_iter()
            .enumerate()
            .map(|(layer_index, name)| NormStats {
                layer_index,
                mean: self.params.expect(&format!("{name}.running_mean")).data().to_vec(),
                std: self
                    .params
                    .expect(&format!("{name}.running_var"))
                    .data()
                    .iter()
                    .map(|v| v.max(0.0).sqrt().max(SIGMA_FLOOR))
                    .collect(),
                name,
            })
            .collect())
    }
}

fn stack(parts: Vec<Tensor>, empty: &[usize]) -> Tensor {
    if parts.is_empty() {
        return Tensor::zeros(empty);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

pub(crate) fn check_slice(lo: usize, hi: usize, q: usize) -> Result<()> {
    if lo >= hi || hi > q {
        return Err(Error::Invalid(format!("class range [{lo}, {hi}) is empty or exceeds {q} classes")));
    }
    Ok(())
}

/// Columns `[lo, hi)` of a `[B, q]` logit variable.
pub fn slice_logits(graph: &mut Graph, logits: Var, lo: usize, hi: usize) -> Result<Var> {
    let q = graph.shape(logits)[1];
    check_slice(lo, hi, q)?;
    Ok(graph.slice_cols(logits, lo, hi))
}
