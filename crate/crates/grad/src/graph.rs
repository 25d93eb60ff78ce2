//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that (transitively) depends on a leaf created with
//! `requires_grad`. Nodes that do not require gradients are skipped, so
//! frozen teachers and detached features cost nothing in the backward pass.
//!
//! Shape errors inside the graph are programming errors and panic with a
//! message naming the op; callers validate user-facing shapes beforehand.

use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ChannelMean(Var),
    ChannelVar {
        x: Var,
        mean: Vec<f64>,
    },
    Upsample2(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        lo: usize,
    },
    SliceCols {
        x: Var,
        lo: usize,
    },
    LogSoftmax(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Blur {
        x: Var,
        kernel: [[f64; 3]; 3],
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel batch statistics computed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased variance (divides by the number of reduced elements).
    pub var: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()))
    }

    /// Borrowed gradient data for `v`.
    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Splits `[B, C, rest..]` into `(B, C, prod(rest))`.
fn channel_dims(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "channel op needs [B, C, ..], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Gradients are tracked only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copies the value of `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ----- elementwise ---------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape(), data)
        } else if bv.numel() == 1 {
            let y = bv.data()[0];
            av.map(|x| f(x, y))
        } else if av.numel() == 1 {
            let x = av.data()[0];
            bv.map(|y| f(x, y))
        } else {
            panic!("{name}: incompatible shapes {:?} and {:?}", av.shape(), bv.shape());
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "add", |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "sub", |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "mul", |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "div", |x, y| x / y);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(v, Op::Offset(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    /// `max(a, floor)`; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor), &[a])
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    /// Mean over the leading (batch) axis: `[B, rest..] -> [rest..]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let rows = t.dim(0);
        assert!(rows > 0, "mean_rows over empty batch");
        let width = t.numel() / rows;
        let mut out = vec![0.0; width];
        for r in 0..rows {
            for (o, x) in out.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let v = Tensor::new(&t.shape()[1..], out);
        self.push(v, Op::MeanRows(a), &[a])
    }

    /// Adds a list of scalars in order.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    // ----- dense layers --------------------------------------------------

    /// `x[B,d] * w[o,d]^T + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        assert_eq!(xv.shape().len(), 2, "linear: input must be [B, d]");
        assert_eq!(wv.shape().len(), 2, "linear: weight must be [o, d]");
        let (batch, d) = (xv.dim(0), xv.dim(1));
        let o = wv.dim(0);
        assert_eq!(wv.dim(1), d, "linear: feature dim {d} vs weight {:?}", wv.shape());
        let mut out = vec![0.0; batch * o];
        kernels::gemm(batch, d, o, xv.data(), false, wv.data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data();
            assert_eq!(bv.len(), o, "linear: bias length");
            for row in out.chunks_mut(o) {
                for (y, bias) in row.iter_mut().zip(bv) {
                    *y += bias;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Tensor::new(&[batch, o], out), Op::Linear { x, w, b }, &parents)
    }

    /// 2-D convolution of `x[B,C,H,W]` with `w[O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        assert_eq!(xv.shape().len(), 4, "conv2d: input must be [B,C,H,W], got {:?}", xv.shape());
        assert_eq!(wv.shape().len(), 4, "conv2d: weight must be [O,C,k,k]");
        let (batch, c, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (o, k) = (wv.dim(0), wv.dim(2));
        assert_eq!(wv.dim(1), c, "conv2d: channel mismatch {:?} vs {:?}", xv.shape(), wv.shape());
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            padding,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let img = c * h * wd;
        let mut cols = vec![0.0; batch * rows * ncols];
        let mut out = vec![0.0; batch * o * ncols];
        for bi in 0..batch {
            let col = &mut cols[bi * rows * ncols..(bi + 1) * rows * ncols];
            kernels::im2col(&xv.data()[bi * img..(bi + 1) * img], &geom, col);
            kernels::gemm(
                o,
                rows,
                ncols,
                wv.data(),
                false,
                col,
                false,
                &mut out[bi * o * ncols..(bi + 1) * o * ncols],
                false,
            );
        }
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data();
            for bi in 0..batch {
                for oc in 0..o {
                    let base = (bi * o + oc) * ncols;
                    for y in &mut out[base..base + ncols] {
                        *y += bv[oc];
                    }
                }
            }
        }
        let shape = [batch, o, geom.out_height(), geom.out_width()];
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            Tensor::new(&shape, out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &parents,
        )
    }

    // ----- normalization -------------------------------------------------

    /// Training-mode batch norm over `[B, C, ..]` using batch statistics.
    ///
    /// Returns the output and the batch moments so the caller can update
    /// running statistics outside the graph.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchMoments) {
        let xv = &self.nodes[x.0].value;
        let (batch, c, s) = channel_dims(xv.shape());
        let count = batch * s;
        assert!(count > 0, "batch_norm over empty input");
        let g = self.nodes[gamma.0].value.data();
        let be = self.nodes[beta.0].value.data();
        assert_eq!(g.len(), c, "batch_norm: gamma length");
        assert_eq!(be.len(), c, "batch_norm: beta length");
        let data = xv.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..batch {
            for ch in 0..c {
                let base = (bi * c + ch) * s;
                mean[ch] += data[base..base + s].iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for bi in 0..batch {
            for ch in 0..c {
                let base = (bi * c + ch) * s;
                var[ch] += data[base..base + s]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for bi in 0..batch {
            for ch in 0..c {
                let base = (bi * c + ch) * s;
                for i in base..base + s {
                    xhat[i] = (data[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + be[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        let y = self.push(
            Tensor::new(&shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        (y, BatchMoments { mean, var, count })
    }

    /// `y[b,c,..] = x[b,c,..] * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (batch, c, s) = channel_dims(xv.shape());
        let sc = self.nodes[scale.0].value.data();
        let sh = self.nodes[shift.0].value.data();
        assert_eq!(sc.len(), c, "channel_affine: scale length");
        assert_eq!(sh.len(), c, "channel_affine: shift length");
        let mut out = xv.data().to_vec();
        for bi in 0..batch {
            for ch in 0..c {
                let base = (bi * c + ch) * s;
                for y in &mut out[base..base + s] {
                    *y = *y * sc[ch] + sh[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&shape, out), Op::ChannelAffine { x, scale, shift }, &[x, scale, shift])
    }

    /// Per-channel mean over batch and spatial axes: `[B,C,..] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (batch, c, s) = channel_dims(xv.shape());
        let mean = channel_means(xv.data(), batch, c, s);
        self.push(Tensor::new(&[c], mean), Op::ChannelMean(x), &[x])
    }

    /// Per-channel biased variance over batch and spatial axes.
    pub fn channel_var(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (batch, c, s) = channel_dims(xv.shape());
        let mean = channel_means(xv.data(), batch, c, s);
        let data = xv.data();
        let mut var = vec![0.0; c];
        for bi in 0..batch {
            for ch in 0..c {
                let base = (bi * c + ch) * s;
                var[ch] += data[base..base + s]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        let count = (batch * s) as f64;
        for v in &mut var {
            *v /= count;
        }
        self.push(Tensor::new(&[c], var), Op::ChannelVar { x, mean }, &[x])
    }

    // ----- spatial -------------------------------------------------------

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape().len(), 4, "upsample2 expects [B,C,H,W]");
        let (batch, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let mut out = vec![0.0; batch * c * 4 * h * w];
        let data = xv.data();
        for p in 0..batch * c {
            let src = &data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        self.push(Tensor::new(&[batch, c, 2 * h, 2 * w], out), Op::Upsample2(x), &[x])
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols are dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape().len(), 4, "max_pool2 expects [B,C,H,W]");
        let (batch, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (oh, ow) = (h / 2, w / 2);
        let data = xv.data();
        let mut out = vec![0.0; batch * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        for p in 0..batch * c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = p * h * w + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = p * h * w + (2 * i + di) * w + 2 * j + dj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    let o = p * oh * ow + i * ow + j;
                    out[o] = data[best];
                    argmax[o] = best;
                }
            }
        }
        self.push(Tensor::new(&[batch, c, oh, ow], out), Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Spatial mean: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (batch, c, s) = channel_dims(xv.shape());
        let out: Vec<f64> = xv
            .data()
            .chunks(s)
            .map(|p| p.iter().sum::<f64>() / s as f64)
            .collect();
        self.push(Tensor::new(&[batch, c], out), Op::GlobalAvgPool(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0].value.clone().reshape(shape);
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let v = Tensor::concat_rows(&tensors);
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `[lo, hi)` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let v = self.nodes[x.0].value.slice_rows(lo, hi);
        self.push(v, Op::SliceRows { x, lo }, &[x])
    }

    /// Columns `[lo, hi)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape().len(), 2, "slice_cols expects a matrix");
        let (rows, cols) = (xv.dim(0), xv.dim(1));
        assert!(lo < hi && hi <= cols, "slice_cols: [{lo}, {hi}) outside {cols} columns");
        let mut out = Vec::with_capacity(rows * (hi - lo));
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[lo..hi]);
        }
        self.push(Tensor::new(&[rows, hi - lo], out), Op::SliceCols { x, lo }, &[x])
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape().len(), 2, "log_softmax expects a matrix");
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..xv.dim(0) {
            let row = xv.row(r);
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&shape, out), Op::LogSoftmax(x), &[x])
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape().len(), 2, "softmax expects a matrix");
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..xv.dim(0) {
            out.extend(softmax_row(xv.row(r)));
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&shape, out), Op::Softmax(x), &[x])
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.shape().len(), 2, "cross_entropy expects [B, n] logits");
        let (batch, n) = (lv.dim(0), lv.dim(1));
        assert_eq!(batch, labels.len(), "cross_entropy: {batch} rows vs {} labels", labels.len());
        assert!(batch > 0, "cross_entropy over empty batch");
        let mut probs = Vec::with_capacity(batch * n);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            assert!(y < n, "cross_entropy: label {y} outside {n} classes");
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            total += lse - row[y];
            probs.extend(softmax_row(row));
        }
        let v = Tensor::scalar(total / batch as f64);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Depthwise 3x3 convolution with a fixed kernel and reflect padding.
    pub fn blur3x3(&mut self, x: Var, kernel: [[f64; 3]; 3]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape().len(), 4, "blur3x3 expects [B,C,H,W]");
        let (batch, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        assert!(h >= 2 && w >= 2, "blur3x3 reflect padding needs H, W >= 2");
        let data = xv.data();
        let mut out = vec![0.0; data.len()];
        for p in 0..batch * c {
            let src = &data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for (ki, krow) in kernel.iter().enumerate() {
                        let ii = kernels::reflect(i as isize + ki as isize - 1, h);
                        for (kj, kv) in krow.iter().enumerate() {
                            let jj = kernels::reflect(j as isize + kj as isize - 1, w);
                            acc += kv * src[ii * w + jj];
                        }
                    }
                    dst[i * w + j] = acc;
                }
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&shape, out), Op::Blur { x, kernel }, &[x])
    }

    // ----- backward ------------------------------------------------------

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.acc_broadcast(grads, a, g.len(), |i| g[i]);
                self.acc_broadcast(grads, b, g.len(), |i| g[i]);
            }
            &Op::Sub(a, b) => {
                self.acc_broadcast(grads, a, g.len(), |i| g[i]);
                self.acc_broadcast(grads, b, g.len(), |i| -g[i]);
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                self.acc_broadcast(grads, a, g.len(), |i| g[i] * pick(bv, i));
                self.acc_broadcast(grads, b, g.len(), |i| g[i] * pick(av, i));
            }
            &Op::Div(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                self.acc_broadcast(grads, a, g.len(), |i| g[i] / pick(bv, i));
                self.acc_broadcast(grads, b, g.len(), |i| {
                    let d = pick(bv, i);
                    -g[i] * pick(av, i) / (d * d)
                });
            }
            &Op::Scale(a, s) => self.acc_map(grads, a, |i| g[i] * s),
            &Op::Offset(a) => self.acc_map(grads, a, |i| g[i]),
            &Op::Log(a) => {
                let av = self.val(a);
                self.acc_map(grads, a, |i| g[i] / av[i]);
            }
            &Op::Exp(a) => self.acc_map(grads, a, |i| g[i] * y[i]),
            &Op::Sqrt(a) => self.acc_map(grads, a, |i| g[i] / (2.0 * y[i])),
            &Op::Square(a) => {
                let av = self.val(a);
                self.acc_map(grads, a, |i| 2.0 * av[i] * g[i]);
            }
            &Op::Tanh(a) => self.acc_map(grads, a, |i| g[i] * (1.0 - y[i] * y[i])),
            &Op::Relu(a) => {
                let av = self.val(a);
                self.acc_map(grads, a, |i| if av[i] > 0.0 { g[i] } else { 0.0 });
            }
            &Op::LeakyRelu(a, slope) => {
                let av = self.val(a);
                self.acc_map(grads, a, |i| if av[i] > 0.0 { g[i] } else { slope * g[i] });
            }
            &Op::ClampMin(a, floor) => {
                let av = self.val(a);
                self.acc_map(grads, a, |i| if av[i] >= floor { g[i] } else { 0.0 });
            }
            &Op::Sum(a) => self.acc_map(grads, a, |_| g[0]),
            &Op::Mean(a) => {
                let n = self.val(a).len() as f64;
                self.acc_map(grads, a, |_| g[0] / n);
            }
            &Op::MeanRows(a) => {
                let width = g.len();
                let rows = self.val(a).len() / width;
                self.acc_map(grads, a, |i| g[i % width] / rows as f64);
            }
            &Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (batch, d, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.wants(x) {
                    let mut gx = vec![0.0; batch * d];
                    kernels::gemm(batch, o, d, g, false, wv.data(), false, &mut gx, false);
                    acc(grads, x, &gx);
                }
                if self.wants(w) {
                    let mut gw = vec![0.0; o * d];
                    kernels::gemm(o, batch, d, g, true, xv.data(), false, &mut gw, false);
                    acc(grads, w, &gw);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let mut gb = vec![0.0; o];
                    for row in g.chunks(o) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(grads, b, &gb);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (x, w) = (*x, *w);
                let wv = &self.nodes[w.0].value;
                let batch = self.nodes[x.0].value.dim(0);
                let o = wv.dim(0);
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.height * geom.width;
                if self.wants(w) {
                    let mut gw = vec![0.0; o * rows];
                    for bi in 0..batch {
                        kernels::gemm(
                            o,
                            ncols,
                            rows,
                            &g[bi * o * ncols..(bi + 1) * o * ncols],
                            false,
                            &cols[bi * rows * ncols..(bi + 1) * rows * ncols],
                            true,
                            &mut gw,
                            bi > 0,
                        );
                    }
                    acc(grads, w, &gw);
                }
                if self.wants(x) {
                    let mut gx = vec![0.0; batch * img];
                    let mut gcol = vec![0.0; rows * ncols];
                    for bi in 0..batch {
                        kernels::gemm(
                            rows,
                            o,
                            ncols,
                            wv.data(),
                            true,
                            &g[bi * o * ncols..(bi + 1) * o * ncols],
                            false,
                            &mut gcol,
                            false,
                        );
                        kernels::col2im(&gcol, geom, &mut gx[bi * img..(bi + 1) * img]);
                    }
                    acc(grads, x, &gx);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let mut gb = vec![0.0; o];
                    for bi in 0..batch {
                        for (oc, s) in gb.iter_mut().enumerate() {
                            let base = (bi * o + oc) * ncols;
                            *s += g[base..base + ncols].iter().sum::<f64>();
                        }
                    }
                    acc(grads, b, &gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (batch, c, s) = channel_dims(node.value.shape());
                let m = (batch * s) as f64;
                let gam = self.val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..batch {
                    for ch in 0..c {
                        let base = (bi * c + ch) * s;
                        for i in base..base + s {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, &sum_gx);
                }
                if self.wants(*beta) {
                    acc(grads, *beta, &sum_g);
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for bi in 0..batch {
                        for ch in 0..c {
                            let base = (bi * c + ch) * s;
                            let k = gam[ch] * inv_std[ch] / m;
                            for i in base..base + s {
                                gx[i] = k * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                    acc(grads, *x, &gx);
                }
            }
            &Op::ChannelAffine { x, scale, shift } => {
                let (batch, c, s) = channel_dims(node.value.shape());
                let xv = self.val(x);
                let sc = self.val(scale);
                if self.wants(x) {
                    let mut gx = vec![0.0; g.len()];
                    for (i, v) in gx.iter_mut().enumerate() {
                        *v = g[i] * sc[(i / s) % c];
                    }
                    acc(grads, x, &gx);
                }
                let mut gs = vec![0.0; c];
                let mut gt = vec![0.0; c];
                for bi in 0..batch {
                    for ch in 0..c {
                        let base = (bi * c + ch) * s;
                        for i in base..base + s {
                            gs[ch] += g[i] * xv[i];
                            gt[ch] += g[i];
                        }
                    }
                }
                if self.wants(scale) {
                    acc(grads, scale, &gs);
                }
                if self.wants(shift) {
                    acc(grads, shift, &gt);
                }
            }
            &Op::ChannelMean(x) => {
                let (batch, c, s) = channel_dims(self.nodes[x.0].value.shape());
                let m = (batch * s) as f64;
                self.acc_map(grads, x, |i| g[(i / s) % c] / m);
            }
            Op::ChannelVar { x, mean } => {
                let (batch, c, s) = channel_dims(self.nodes[x.0].value.shape());
                let m = (batch * s) as f64;
                let xv = self.val(*x);
                self.acc_map(grads, *x, |i| {
                    let ch = (i / s) % c;
                    g[ch] * 2.0 * (xv[i] - mean[ch]) / m
                });
            }
            &Op::Upsample2(x) => {
                let shape = self.nodes[x.0].value.shape();
                let (h, w) = (shape[2], shape[3]);
                let planes = shape[0] * shape[1];
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                acc(grads, x, &gx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; self.val(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
                acc(grads, *x, &gx);
            }
            &Op::GlobalAvgPool(x) => {
                let (_, _, s) = channel_dims(self.nodes[x.0].value.shape());
                self.acc_map(grads, x, |i| g[i / s] / s as f64);
            }
            &Op::Reshape(x) => acc(grads, x, g),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    if self.wants(p) {
                        acc(grads, p, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            &Op::SliceRows { x, lo } => {
                let xv = &self.nodes[x.0].value;
                let width = xv.numel() / xv.dim(0).max(1);
                let mut gx = vec![0.0; xv.numel()];
                gx[lo * width..lo * width + g.len()].copy_from_slice(g);
                acc(grads, x, &gx);
            }
            &Op::SliceCols { x, lo } => {
                let xv = &self.nodes[x.0].value;
                let (rows, cols) = (xv.dim(0), xv.dim(1));
                let width = g.len() / rows.max(1);
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + lo..r * cols + lo + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                acc(grads, x, &gx);
            }
            &Op::LogSoftmax(x) => {
                let cols = node.value.dim(1);
                let mut gx = vec![0.0; g.len()];
                for (r, (gr, yr)) in g.chunks(cols).zip(y.chunks(cols)).enumerate() {
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        gx[r * cols + j] = gr[j] - yr[j].exp() * total;
                    }
                }
                acc(grads, x, &gx);
            }
            &Op::Softmax(x) => {
                let cols = node.value.dim(1);
                let mut gx = vec![0.0; g.len()];
                for (r, (gr, yr)) in g.chunks(cols).zip(y.chunks(cols)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        gx[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, x, &gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let batch = labels.len();
                let n = probs.len() / batch;
                let k = g[0] / batch as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * k).collect();
                for (r, &lab) in labels.iter().enumerate() {
                    gx[r * n + lab] -= k;
                }
                acc(grads, *logits, &gx);
            }
            Op::Blur { x, kernel } => {
                let shape = node.value.shape();
                let (h, w) = (shape[2], shape[3]);
                let planes = shape[0] * shape[1];
                let mut gx = vec![0.0; g.len()];
                for p in 0..planes {
                    let src = &g[p * h * w..(p + 1) * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            let gij = src[i * w + j];
                            for (ki, krow) in kernel.iter().enumerate() {
                                let ii = kernels::reflect(i as isize + ki as isize - 1, h);
                                for (kj, kv) in krow.iter().enumerate() {
                                    let jj = kernels::reflect(j as isize + kj as isize - 1, w);
                                    dst[ii * w + jj] += kv * gij;
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, &gx);
            }
        }
    }

    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.wants(v) {
            return;
        }
        let n = self.val(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        for (i, s) in slot.iter_mut().enumerate() {
            *s += f(i);
        }
    }

    /// Accumulates an output-shaped gradient into `v`, summing when `v` was
    /// broadcast from a single element.
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        out_len: usize,
        f: impl Fn(usize) -> f64,
    ) {
        if !self.wants(v) {
            return;
        }
        let n = self.val(v).len();
        if n == out_len {
            self.acc_map(grads, v, f);
        } else {
            let total: f64 = (0..out_len).map(f).sum();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            slot[0] += total;
        }
    }
}

#[inline]
fn pick(values: &[f64], i: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[i]
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(slot) => {
            for (s, x) in slot.iter_mut().zip(g) {
                *s += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn channel_means(data: &[f64], batch: usize, c: usize, s: usize) -> Vec<f64> {
    let mut mean = vec![0.0; c];
    for bi in 0..batch {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (bi * c + ch) * s;
            *m += data[base..base + s].iter().sum::<f64>();
        }
    }
    let count = (batch * s) as f64;
    for m in &mut mean {
        *m /= count;
    }
    mean
}

/// Numerically stable `log(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
