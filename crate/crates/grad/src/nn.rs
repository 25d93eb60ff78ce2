//! Declarative layer stacks, parameter storage and forward passes.
//!
//! A network is a `Vec<Layer>` description plus a [`ParamStore`] holding
//! named tensors. The same description drives parameter initialization,
//! shape inference and the forward pass, so classifiers and generators
//! share one code path.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; averaged by aggregation but never differentiated.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i] = Param { name, kind, tensor };
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push(Param { name, kind, tensor });
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.entries[i].tensor)
    }

    /// Panicking lookup for names produced by the layer description itself.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    /// Total number of scalars across all entries.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Number of trainable scalars.
    pub fn trainable_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// True when both stores hold the same names, kinds and shapes in order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.kind == b.kind && a.tensor.shape() == b.tensor.shape()
            })
    }

    /// Adds every entry to the graph. Trainable entries track gradients
    /// only when `trainable` is set; buffers are always constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                let grad = trainable && p.kind == ParamKind::Trainable;
                graph.leaf(p.tensor.clone(), grad)
            })
            .collect();
        Bound { vars }
    }

    /// Folds batch moments from a training-mode forward pass into the
    /// running statistics.
    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate]) {
        for u in updates {
            let mean_name = format!("{}.running_mean", u.layer);
            let var_name = format!("{}.running_var", u.layer);
            let unbias = if u.count > 1 {
                u.count as f64 / (u.count as f64 - 1.0)
            } else {
                1.0
            };
            if let Some(rm) = self.get_mut(&mean_name) {
                for (r, m) in rm.data_mut().iter_mut().zip(&u.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
            }
            if let Some(rv) = self.get_mut(&var_name) {
                for (r, v) in rv.data_mut().iter_mut().zip(&u.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
            }
        }
    }
}

/// Graph handles for every entry of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, store: &ParamStore, name: &str) -> Var {
        let i = store
            .position(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        self.vars[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

/// Batch moments of one normalization layer, for running-stat updates.
#[derive(Clone, Debug)]
pub struct RunningUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Side outputs of a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// Input of every normalization layer, in network order.
    pub norm_inputs: Vec<Var>,
    /// Training-mode moments, in network order.
    pub running_updates: Vec<RunningUpdate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    MaxPool2,
    GlobalAvgPool,
    Upsample2,
    Flatten,
    /// Reshape each sample to `shape` (batch axis preserved).
    Reshape {
        shape: Vec<usize>,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

impl Layer {
    pub fn conv(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        Layer::Conv2d {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding,
            bias,
        }
    }

    pub fn bn(name: impl Into<String>, channels: usize) -> Self {
        Layer::BatchNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn linear(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Layer::Linear {
            name: name.into(),
            in_features: inputs,
            out_features: outputs,
        }
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn uniform_fan_in<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

/// Creates and initializes every parameter named by `layers`.
pub fn init_params<R: Rng + ?Sized>(layers: &[Layer], store: &mut ParamStore, rng: &mut R) {
    for layer in layers {
        match layer {
            Layer::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                let shape = [*out_channels, *in_channels, *kernel, *kernel];
                store.insert(format!("{name}.weight"), ParamKind::Trainable, uniform_fan_in(&shape, fan_in, rng));
                if *bias {
                    store.insert(format!("{name}.bias"), ParamKind::Trainable, uniform_fan_in(&[*out_channels], fan_in, rng));
                }
            }
            Layer::BatchNorm { name, channels } => {
                store.insert(format!("{name}.weight"), ParamKind::Trainable, Tensor::full(&[*channels], 1.0));
                store.insert(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[*channels]));
                store.insert(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[*channels]));
                store.insert(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[*channels], 1.0));
            }
            Layer::Linear {
                name,
                in_features,
                out_features,
            } => {
                store.insert(
                    format!("{name}.weight"),
                    ParamKind::Trainable,
                    uniform_fan_in(&[*out_features, *in_features], *in_features, rng),
                );
                store.insert(format!("{name}.bias"), ParamKind::Trainable, uniform_fan_in(&[*out_features], *in_features, rng));
            }
            Layer::Residual { body, shortcut } => {
                init_params(body, store, rng);
                init_params(shortcut, store, rng);
            }
            _ => {}
        }
    }
}

/// Names of normalization layers in forward order.
pub fn norm_layer_names(layers: &[Layer]) -> Vec<String> {
    let mut out = Vec::new();
    collect_norm_names(layers, &mut out);
    out
}

fn collect_norm_names(layers: &[Layer], out: &mut Vec<String>) {
    for layer in layers {
        match layer {
            Layer::BatchNorm { name, .. } => out.push(name.clone()),
            Layer::Residual { body, shortcut } => {
                collect_norm_names(body, out);
                collect_norm_names(shortcut, out);
            }
            _ => {}
        }
    }
}

/// Per-sample output shape of `layers` for a per-sample input shape.
pub fn infer_shape(layers: &[Layer], input: &[usize]) -> Result<Vec<usize>, String> {
    let mut shape = input.to_vec();
    for layer in layers {
        shape = match layer {
            Layer::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if shape.len() != 3 || shape[0] != *in_channels {
                    return Err(format!("{name}: expects [{in_channels}, H, W], got {shape:?}"));
                }
                if shape[1] + 2 * padding < *kernel || shape[2] + 2 * padding < *kernel {
                    return Err(format!("{name}: input {shape:?} smaller than kernel"));
                }
                let oh = (shape[1] + 2 * padding - kernel) / stride + 1;
                let ow = (shape[2] + 2 * padding - kernel) / stride + 1;
                vec![*out_channels, oh, ow]
            }
            Layer::BatchNorm { name, channels } => {
                if shape.is_empty() || shape[0] != *channels {
                    return Err(format!("{name}: expects {channels} channels, got {shape:?}"));
                }
                shape
            }
            Layer::Linear {
                name,
                in_features,
                out_features,
            } => {
                if shape != [*in_features] {
                    return Err(format!("{name}: expects [{in_features}], got {shape:?}"));
                }
                vec![*out_features]
            }
            Layer::Relu | Layer::LeakyRelu { .. } | Layer::Tanh => shape,
            Layer::MaxPool2 => {
                if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                    return Err(format!("max_pool2: bad input {shape:?}"));
                }
                vec![shape[0], shape[1] / 2, shape[2] / 2]
            }
            Layer::Upsample2 => {
                if shape.len() != 3 {
                    return Err(format!("upsample2: bad input {shape:?}"));
                }
                vec![shape[0], shape[1] * 2, shape[2] * 2]
            }
            Layer::GlobalAvgPool => {
                if shape.len() != 3 {
                    return Err(format!("global_avg_pool: bad input {shape:?}"));
                }
                vec![shape[0]]
            }
            Layer::Flatten => vec![shape.iter().product()],
            Layer::Reshape { shape: target } => {
                let a: usize = shape.iter().product();
                let b: usize = target.iter().product();
                if a != b {
                    return Err(format!("reshape: {shape:?} -> {target:?} changes size"));
                }
                target.clone()
            }
            Layer::Residual { body, shortcut } => {
                let main = infer_shape(body, &shape)?;
                let side = infer_shape(shortcut, &shape)?;
                if main != side {
                    return Err(format!("residual branches disagree: {main:?} vs {side:?}"));
                }
                main
            }
        };
    }
    Ok(shape)
}

/// Runs `layers` on the batch `x`.
pub fn forward(
    layers: &[Layer],
    graph: &mut Graph,
    store: &ParamStore,
    bound: &Bound,
    x: Var,
    mode: Mode,
    trace: &mut Trace,
) -> Var {
    let mut h = x;
    for layer in layers {
        h = match layer {
            Layer::Conv2d {
                name,
                stride,
                padding,
                bias,
                ..
            } => {
                let w = bound.var(store, &format!("{name}.weight"));
                let b = bias.then(|| bound.var(store, &format!("{name}.bias")));
                graph.conv2d(h, w, b, *stride, *padding)
            }
            Layer::BatchNorm { name, .. } => {
                trace.norm_inputs.push(h);
                let gamma = bound.var(store, &format!("{name}.weight"));
                let beta = bound.var(store, &format!("{name}.bias"));
                match mode {
                    Mode::Train => {
                        let (y, moments) = graph.batch_norm(h, gamma, beta, BN_EPS);
                        trace.running_updates.push(RunningUpdate {
                            layer: name.clone(),
                            mean: moments.mean,
                            var: moments.var,
                            count: moments.count,
                        });
                        y
                    }
                    Mode::Eval => {
                        let rm = store.expect(&format!("{name}.running_mean"));
                        let rv = store.expect(&format!("{name}.running_var"));
                        let inv = graph.constant(rv.map(|v| 1.0 / (v + BN_EPS).sqrt()));
                        let rm = graph.constant(rm.clone());
                        let scale = graph.mul(gamma, inv);
                        let centered = graph.mul(rm, scale);
                        let shift = graph.sub(beta, centered);
                        graph.channel_affine(h, scale, shift)
                    }
                }
            }
            Layer::Linear { name, .. } => {
                let w = bound.var(store, &format!("{name}.weight"));
                let b = bound.var(store, &format!("{name}.bias"));
                graph.linear(h, w, Some(b))
            }
            Layer::Relu => graph.relu(h),
            Layer::LeakyRelu { slope } => graph.leaky_relu(h, *slope),
            Layer::Tanh => graph.tanh(h),
            Layer::MaxPool2 => graph.max_pool2(h),
            Layer::GlobalAvgPool => graph.global_avg_pool(h),
            Layer::Upsample2 => graph.upsample2(h),
            Layer::Flatten => {
                let shape = graph.shape(h);
                let batch = shape[0];
                let rest: usize = shape[1..].iter().product();
                graph.reshape(h, &[batch, rest])
            }
            Layer::Reshape { shape } => {
                let batch = graph.shape(h)[0];
                let mut full = vec![batch];
                full.extend_from_slice(shape);
                graph.reshape(h, &full)
            }
            Layer::Residual { body, shortcut } => {
                let main = forward(body, graph, store, bound, h, mode, trace);
                let side = forward(shortcut, graph, store, bound, h, mode, trace);
                graph.add(main, side)
            }
        };
    }
    h
}
