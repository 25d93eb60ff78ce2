//! Local training on one client, for MFCL and each baseline strategy.

use std::fmt;
use std::ops::Range;
use std::time::Instant;

use mfcl_grad::nn::{Bound, Mode, ParamKind, ParamStore, Trace};
use mfcl_grad::optim::Sgd;
use mfcl_grad::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LocalData;
use crate::error::{Error, Result};
use crate::generative_replay::{synthesize, SyntheticBatch};
use crate::model_zoo::{slice_logits, GeneratorNet, GlobalClassifier, HEAD_BIAS, HEAD_WEIGHT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Mfcl,
    FedAvg,
    FedProx,
    FedProxPlus,
    FedLwf2t,
    Oracle,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Mfcl,
        Strategy::FedAvg,
        Strategy::FedProx,
        Strategy::FedProxPlus,
        Strategy::FedLwf2t,
        Strategy::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mfcl => "mfcl",
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::FedProxPlus => "fedproxplus",
            Strategy::FedLwf2t => "fedlwf2t",
            Strategy::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientLossWeights {
    pub ft: f64,
    pub kd: f64,
}

impl Default for ClientLossWeights {
    fn default() -> Self {
        Self { ft: 1.0, kd: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub synthetic_batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: ClientLossWeights,
    /// Proximal coefficient for FedProx and FedProx+.
    pub prox_mu: f64,
    /// Softmax temperature for FedLwF-2T distillation.
    pub lwf_temperature: f64,
    /// FedLwF-2T weight of the client's previous-task model.
    pub lwf_local_weight: f64,
    /// FedLwF-2T weight of the current global model.
    pub lwf_global_weight: f64,
}

impl LocalTrainConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            epochs: 10,
            batch_size: 32,
            synthetic_batch_size: 32,
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            weights: ClientLossWeights::default(),
            prox_mu: 0.01,
            lwf_temperature: 2.0,
            lwf_local_weight: 1.0,
            lwf_global_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.synthetic_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        for (name, v) in [
            ("w_ft", self.weights.ft),
            ("w_kd", self.weights.kd),
            ("prox_mu", self.prox_mu),
            ("lwf_local_weight", self.lwf_local_weight),
            ("lwf_global_weight", self.lwf_global_weight),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.lwf_temperature > 0.0 && self.lwf_temperature.is_finite()) {
            return Err(Error::Config("lwf_temperature must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Where the current task sits in the class space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskContext {
    pub task: usize,
    /// Global ids of the current task's classes.
    pub range: Range<usize>,
}

impl TaskContext {
    pub fn q(&self) -> usize {
        self.range.end
    }

    pub fn q_prev(&self) -> usize {
        self.range.start
    }
}

/// Frozen models a client may learn from.
#[derive(Clone, Copy, Default)]
pub struct Teachers<'a> {
    /// Global model at the end of the previous task.
    pub previous: Option<&'a GlobalClassifier>,
    pub generator: Option<&'a GeneratorNet>,
    /// This client's own model from the previous task (FedLwF-2T).
    pub local_previous: Option<&'a GlobalClassifier>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamStore,
    pub num_samples: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

/// Cross-entropy over logit columns `[lo, hi)` with labels shifted by `-lo`.
/// Head rows outside the range receive exactly zero gradient.
pub fn ce_current_task_loss(g: &mut Graph, logits: Var, labels: &[usize], range: Range<usize>) -> Result<Var> {
    if let Some(&y) = labels.iter().find(|y| !range.contains(y)) {
        return Err(Error::Invalid(format!("label {y} outside current task classes {range:?}")));
    }
    let slice = slice_logits(g, logits, range.start, range.end)?;
    let shifted: Vec<usize> = labels.iter().map(|y| y - range.start).collect();
    Ok(g.cross_entropy(slice, &shifted))
}

/// Cross-entropy of the head applied to detached features, over all classes.
/// Only the head receives gradient.
pub fn finetune_loss(g: &mut Graph, features: Var, head_w: Var, head_b: Var, labels: &[usize]) -> Result<Var> {
    let q = g.shape(head_w)[0];
    if g.shape(features)[0] != labels.len() {
        return Err(Error::Shape(format!("{} feature rows for {} labels", g.shape(features)[0], labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= q) {
        return Err(Error::Invalid(format!("label {y} outside the {q}-class head")));
    }
    let frozen = g.detach(features);
    let logits = g.linear(frozen, head_w, Some(head_b));
    Ok(g.cross_entropy(logits, labels))
}

/// Mean over rows of `‖W (φ − φ_teacher)‖²` with `W` the teacher's head.
pub fn feature_kd_loss(g: &mut Graph, features: Var, teacher_features: &Tensor, teacher_head: &Tensor) -> Result<Var> {
    if g.shape(features) != teacher_features.shape() {
        return Err(Error::Shape(format!(
            "student features {:?} vs teacher features {:?}",
            g.shape(features),
            teacher_features.shape()
        )));
    }
    if teacher_head.shape().len() != 2 || teacher_head.dim(1) != teacher_features.dim(1) {
        return Err(Error::Shape(format!("teacher head {:?} does not match features", teacher_head.shape())));
    }
    let rows = teacher_features.dim(0).max(1);
    let t = g.constant(teacher_features.clone());
    let w = g.constant(teacher_head.clone());
    let diff = g.sub(features, t);
    let proj = g.linear(diff, w, None);
    let sq = g.square(proj);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / rows as f64))
}

/// `(μ/2) Σ ‖w − w_ref‖²` over trainable parameters present in both
/// models. With `head_rows = Some(k)` only the first `k` head rows count.
pub fn prox_term(
    g: &mut Graph,
    model: &GlobalClassifier,
    bound: &Bound,
    reference: &GlobalClassifier,
    mu: f64,
    head_rows: Option<usize>,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (i, p) in model.params.iter().enumerate() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let Some(r) = reference.params.get(&p.name) else { continue };
        let mut w = bound.vars[i];
        let mut r = r.clone();
        if let (Some(k), true) = (head_rows, GlobalClassifier::is_head_param(&p.name)) {
            if k == 0 {
                continue;
            }
            w = g.slice_rows(w, 0, k);
            r = r.slice_rows(0, k);
        }
        if g.shape(w) != r.shape() {
            return Err(Error::Shape(format!("proximal reference `{}` has shape {:?}", p.name, r.shape())));
        }
        let rv = g.constant(r);
        let d = g.sub(w, rv);
        let sq = g.square(d);
        terms.push(g.sum(sq));
    }
    let total = if terms.is_empty() { g.scalar(0.0) } else { g.add_all(&terms) };
    Ok(g.scale(total, mu / 2.0))
}

/// `T² · mean_rows KL(softmax(t/T) ‖ softmax(s/T))` over the first `q_old`
/// logit columns.
pub fn lwf_kd_loss(g: &mut Graph, student_logits: Var, teacher_logits: &Tensor, q_old: usize, temperature: f64) -> Result<Var> {
    let rows = teacher_logits.dim(0);
    if g.shape(student_logits)[0] != rows || teacher_logits.dim(1) < q_old {
        return Err(Error::Shape("teacher and student logits disagree".into()));
    }
    let s = slice_logits(g, student_logits, 0, q_old)?;
    let s = g.scale(s, 1.0 / temperature);
    let log_ps = g.log_softmax(s);
    let mut target = Vec::with_capacity(rows * q_old);
    let mut entropy = 0.0;
    for r in 0..rows {
        let soft: Vec<f64> = teacher_logits.row(r)[..q_old].iter().map(|v| v / temperature).collect();
        let p = mfcl_grad::graph::softmax_row(&soft);
        entropy += p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        target.extend(p);
    }
    let pt = g.constant(Tensor::new(&[rows, q_old], target));
    let cross = g.mul(pt, log_ps);
    let cross = g.sum(cross);
    let kl = g.neg(cross);
    let kl = g.offset(kl, entropy);
    Ok(g.scale(kl, temperature * temperature / rows.max(1) as f64))
}

/// Per-batch loss closure: builds the objective for `(x, y)` on the bound
/// model and returns it with the model's forward trace.
type BatchLoss<'a, R> = dyn FnMut(&mut Graph, &GlobalClassifier, &Bound, &Tensor, &[usize], &mut R) -> Result<(Var, Trace)> + 'a;

fn run_local<R: Rng + ?Sized>(
    client_id: usize,
    start: &GlobalClassifier,
    data: &LocalData,
    config: &LocalTrainConfig,
    rng: &mut R,
    loss: &mut BatchLoss<'_, R>,
) -> Result<ClientUpdate> {
    config.validate()?;
    let clock = Instant::now();
    let mut model = start.clone();
    let mut sgd = Sgd::new(config.lr, config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    let mut loss_sum = 0.0;
    for _ in 0..config.epochs {
        if data.is_empty() {
            break;
        }
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = data.select(chunk);
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let (objective, trace) = loss(&mut g, &model, &bound, &x, &y, rng)?;
            let value = g.item(objective);
            if !value.is_finite() {
                return Err(Error::Invalid(format!("client {client_id}: local loss became {value} at step {steps}")));
            }
            let grads = g.backward(objective);
            sgd.step(&mut model.params, &bound, &grads);
            model.params.apply_running_updates(&trace.running_updates);
            loss_sum += value;
            steps += 1;
        }
    }
    Ok(ClientUpdate {
        client_id,
        params: model.params,
        num_samples: data.len(),
        steps,
        mean_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
        seconds: clock.elapsed().as_secs_f64(),
    })
}

fn forward_train(g: &mut Graph, model: &GlobalClassifier, bound: &Bound, x: &Tensor) -> crate::model_zoo::ClassifierOutput {
    let xv = g.constant(x.clone());
    model.forward(g, bound, xv, Mode::Train)
}

/// Plain cross-entropy over the full current head.
pub fn fedavg_local_train<R: Rng + ?Sized>(
    client_id: usize,
    start: &GlobalClassifier,
    data: &LocalData,
    config: &LocalTrainConfig,
    rng: &mut R,
) -> Result<ClientUpdate> {
    run_local(client_id, start, data, config, rng, &mut |g, model, bound, x, y, _| {
        let out = forward_train(g, model, bound, x);
        Ok((g.cross_entropy(out.logits, y), out.trace))
    })
}

/// Split-head cross-entropy restricted to the current task's classes.
pub fn split_head_local_train<R: Rng + ?Sized>(
    client_id: usize,
    start: &GlobalClassifier,
    data: &LocalData,
    config: &LocalTrainConfig,
    ctx: &TaskContext,
    rng: &mut R,
) -> Result<ClientUpdate> {
    run_local(client_id, start, data, config, rng, &mut |g, model, bound, x, y, _| {
        let out = forward_train(g, model, bound, x);
        Ok((ce_current_task_loss(g, out.logits, y, ctx.range.clone())?, out.trace))
    })
}

/// Cross-entropy plus a proximal pull towards the round's global model.
pub fn fedprox_local_train<R: Rng + ?Sized>(
    client_id: usize,
    start: &GlobalClassifier,
    data: &LocalData,
    config: &LocalTrainConfig,
    rng: &mut R,
) -> Result<ClientUpdate> {
    if config.prox_mu < 0.0 {
        return Err(Error::Config("prox_mu must be non-negative".into()));
    }
    run_local(client_id, start, data, config, rng, &mut |g, model, bound, x, y, _| {
        let out = forward_train(g, model, bound, x);
        let ce = g.cross_entropy(out.logits, y);
        let prox = prox_term(g, model, bound, start, config.prox_mu, None)?;
        Ok((g.add(ce, prox), out.trace))
    })
}

/// Cross-entropy plus a proximal pull towards the previous task's final
/// global model, over the parameters both share (old head rows only).
/// Falls back to FedAvg on the first task.
pub fn fedproxplus_local_train<R: Rng + ?Sized>(
    client_id: usize,
    start: &GlobalClassifier,
    teachers: Teachers<'_>,
    data: &LocalData,
    config: &LocalTrainConfig,
    ctx: &TaskContext,
    rng: &mut R,
) -> Result<ClientUpdate> {
    if ctx.task == 0 {
        return fedavg_local_train(client_id, start, data, config, rng);
    }
    let previous = teachers
        .previous
        .ok_or_else(|| Error::Missing(format!("previous-task model for FedProx+ at task {}", ctx.task)))?;
    run_local(client_id, start, data, config, rng, &mut |g, model, bound, x, y, _| {
        let out = forward_train(g, model, bound, x);
        let ce = g.cross_entropy(out.logits, y);
        let prox = prox_term(g, model, bound, previous, config.prox_mu, Some(ctx.q_prev()))?;
        Ok((g.add(ce, prox), out.trace))
    })
}

/// Cross-entropy plus temperature-scaled distillation over old classes from
/// the client's previous-task model and from the round's global model.
pub fn fedlwf2t_local_train<R: Rng + ?Sized>(
    client_id: usize,
    start: &GlobalClassifier,
    teachers: Teachers<'_>,
    data: &LocalData,
    config: &LocalTrainConfig,
    ctx: &TaskContext,
    rng: &mut R,
) -> Result<ClientUpdate> {
    let q_old = ctx.q_prev();
    let local_teacher = teachers.local_previous.or(teachers.previous);
    run_local(client_id, start, data, config, rng, &mut |g, model, bound, x, y, _| {
        let out = forward_train(g, model, bound, x);
        let mut total = g.cross_entropy(out.logits, y);
        if q_old > 0 {
            if let (Some(teacher), true) = (local_teacher, config.lwf_local_weight > 0.0) {
                let t = teacher.logits(x)?;
                let kd = lwf_kd_loss(g, out.logits, &t, q_old, config.lwf_temperature)?;
                let kd = g.scale(kd, config.lwf_local_weight);
                total = g.add(total, kd);
            }
            if config.lwf_global_weight > 0.0 {
                let t = start.logits(x)?;
                let kd = lwf_kd_loss(g, out.logits, &t, q_old, config.lwf_temperature)?;
                let kd = g.scale(kd, config.lwf_global_weight);
                total = g.add(total, kd);
            }
        }
        Ok((total, out.trace))
    })
}

/// The MFCL client objective. On the first task only split-head
/// cross-entropy is used; afterwards each real batch is paired with a fresh
/// synthetic batch of old classes, adding head fine-tuning on frozen
/// features and importance-weighted feature distillation.
pub fn mfcl_local_train<R: Rng + ?Sized>(
    client_id: usize,
    start: &GlobalClassifier,
    teachers: Teachers<'_>,
    data: &LocalData,
    config: &LocalTrainConfig,
    ctx: &TaskContext,
    rng: &mut R,
) -> Result<ClientUpdate> {
    if ctx.task == 0 {
        return split_head_local_train(client_id, start, data, config, ctx, rng);
    }
    let previous = teachers
        .previous
        .ok_or_else(|| Error::Missing(format!("previous-task model for MFCL at task {}", ctx.task)))?;
    let generator = teachers
        .generator
        .ok_or_else(|| Error::Missing(format!("generator for MFCL at task {}", ctx.task)))?;
    run_local(client_id, start, data, config, rng, &mut |g, model, bound, x, y, rng| {
        let synthetic = synthesize(generator, config.synthetic_batch_size, ctx.q_prev(), rng)?;
        let obj = mfcl_objective(g, model, bound, previous, x, y, &synthetic, ctx, &config.weights)?;
        Ok((obj.total, obj.trace))
    })
}

/// Graph handles of the MFCL client objective terms.
pub struct ClientObjective {
    pub total: Var,
    pub ce: Var,
    pub ft: Var,
    pub kd: Var,
    /// Student forward trace, for its running statistics.
    pub trace: Trace,
}

/// The MFCL client objective for real rows `(x, y)` and a synthetic batch,
/// with the student bound as `bound` in training mode and `previous` as the
/// frozen teacher: split-head cross-entropy on the real rows, head
/// fine-tuning on frozen features of all rows, and feature distillation
/// weighted by the teacher's head.
#[allow(clippy::too_many_arguments)]
pub fn mfcl_objective(
    g: &mut Graph,
    model: &GlobalClassifier,
    bound: &Bound,
    previous: &GlobalClassifier,
    x: &Tensor,
    y: &[usize],
    synthetic: &SyntheticBatch,
    ctx: &TaskContext,
    weights: &ClientLossWeights,
) -> Result<ClientObjective> {
    if previous.num_classes() != ctx.q_prev() {
        return Err(Error::Invalid(format!(
            "previous model has {} classes, task {} starts at {}",
            previous.num_classes(),
            ctx.task,
            ctx.q_prev()
        )));
    }
    let joint = Tensor::concat_rows(&[x, &synthetic.images]);
    let out = forward_train(g, model, bound, &joint);
    let real = g.slice_rows(out.logits, 0, y.len());
    let ce = ce_current_task_loss(g, real, y, ctx.range.clone())?;
    let labels: Vec<usize> = y.iter().chain(&synthetic.labels).copied().collect();
    let w = bound.var(&model.params, HEAD_WEIGHT);
    let b = bound.var(&model.params, HEAD_BIAS);
    let ft = finetune_loss(g, out.features, w, b, &labels)?;
    let teacher_features = previous.features(&joint)?;
    let kd = feature_kd_loss(g, out.features, &teacher_features, previous.head_weight())?;
    let wft = g.scale(ft, weights.ft);
    let wkd = g.scale(kd, weights.kd);
    let total = g.add_all(&[ce, wft, wkd]);
    Ok(ClientObjective {
        total,
        ce,
        ft,
        kd,
        trace: out.trace,
    })
}

/// Dispatches on `config.strategy`. For the oracle, `data` must already hold
/// the client's shards of every task so far.
pub fn local_train<R: Rng + ?Sized>(
    client_id: usize,
    start: &GlobalClassifier,
    teachers: Teachers<'_>,
    data: &LocalData,
    config: &LocalTrainConfig,
    ctx: &TaskContext,
    rng: &mut R,
) -> Result<ClientUpdate> {
    match config.strategy {
        Strategy::Mfcl => mfcl_local_train(client_id, start, teachers, data, config, ctx, rng),
        Strategy::FedAvg | Strategy::Oracle => fedavg_local_train(client_id, start, data, config, rng),
        Strategy::FedProx => fedprox_local_train(client_id, start, data, config, rng),
        Strategy::FedProxPlus => fedproxplus_local_train(client_id, start, teachers, data, config, ctx, rng),
        Strategy::FedLwf2t => fedlwf2t_local_train(client_id, start, teachers, data, config, ctx, rng),
    }
}
