//! Data-free generator training against a frozen classifier, and synthetic
//! replay batches.
//!
//! The generator objective combines four terms on a synthetic batch `x̃ =
//! G(z)`: cross-entropy of the frozen classifier against the labels encoded
//! in `z`, an information-entropy diversity term, a match between the
//! classifier's stored normalization statistics and the batch statistics of
//! `x̃`, and a smoothness prior.

use mfcl_grad::kernels::gaussian_kernel3;
use mfcl_grad::nn::{Mode, Trace};
use mfcl_grad::optim::Adam;
use mfcl_grad::tensor::argmax;
use mfcl_grad::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::{slice_logits, GeneratorNet, GlobalClassifier, NormStats, SIGMA_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenLossWeights {
    pub div: f64,
    pub bn: f64,
    pub prior: f64,
}

impl Default for GenLossWeights {
    fn default() -> Self {
        Self {
            div: 1.0,
            bn: 75.0,
            prior: 0.001,
        }
    }
}

impl GenLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_div", self.div), ("w_bn", self.bn), ("w_prior", self.prior)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenTrainConfig {
    /// Optimizer steps, one fresh noise batch each.
    pub iterations: usize,
    pub batch_size: usize,
    pub z_dim: usize,
    /// Adam learning rate.
    pub lr: f64,
    pub weights: GenLossWeights,
    /// Start from the previous task's generator instead of a fresh one.
    pub warm_start: bool,
}

impl GenTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("generator iterations must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("generator batch size must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("generator learning rate must be positive, got {}", self.lr)));
        }
        self.weights.validate()
    }
}

/// Synthetic images with the labels their noise vectors encode.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Scalar values of each objective term for one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenLosses {
    pub ce: f64,
    pub div: f64,
    pub bn: f64,
    pub prior: f64,
    pub total: f64,
}

/// Channelwise batch mean and floored standard deviation of one layer input.
#[derive(Clone, Copy, Debug)]
pub struct MeasuredStats {
    pub mean: Var,
    pub std: Var,
}

/// Standard normal noise and labels `argmax(z[..q])`.
pub fn sample_noise_labels<R: Rng + ?Sized>(bs: usize, z_dim: usize, q: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    if q > z_dim {
        return Err(Error::Invalid(format!("{q} classes exceed the {z_dim}-dimensional noise prefix")));
    }
    if bs == 0 || q == 0 {
        return Err(Error::Invalid("noise batch and class count must be positive".into()));
    }
    let data: Vec<f64> = (0..bs * z_dim).map(|_| rng.sample(StandardNormal)).collect();
    let labels = data.chunks_exact(z_dim).map(|row| argmax(&row[..q])).collect();
    Ok((Tensor::new(&[bs, z_dim], data), labels))
}

/// Mean cross-entropy of `logits` `[B, q]` against `labels`.
pub fn gen_ce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let [b, q] = g.shape(logits)[..] else {
        return Err(Error::Shape(format!("logits must be [B, q], got {:?}", g.shape(logits))));
    };
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= q) {
        return Err(Error::Invalid(format!("label {bad} outside the {q} seen classes")));
    }
    Ok(g.cross_entropy(logits, labels))
}

/// `(1/q) Σ p̄ log p̄` for the batch-mean softmax `p̄`, i.e. the negated
/// information entropy. Lies in `[-(ln q)/q, 0]`.
pub fn gen_diversity_loss(g: &mut Graph, logits: Var) -> Result<Var> {
    let [_, q] = g.shape(logits)[..] else {
        return Err(Error::Shape(format!("logits must be [B, q], got {:?}", g.shape(logits))));
    };
    let p = g.softmax(logits);
    let mean = g.mean_rows(p);
    let safe = g.clamp_min(mean, f64::MIN_POSITIVE);
    let log = g.log(safe);
    let plogp = g.mul(mean, log);
    let s = g.sum(plogp);
    Ok(g.scale(s, 1.0 / q as f64))
}

/// Batch statistics of each normalization layer's input. Gradients reach
/// whatever produced the inputs.
pub fn measure_batch_stats(g: &mut Graph, norm_inputs: &[Var]) -> Result<Vec<MeasuredStats>> {
    norm_inputs
        .iter()
        .map(|&x| {
            if g.shape(x)[0] < 2 {
                return Err(Error::Invalid("batch statistics need at least two samples".into()));
            }
            let mean = g.channel_mean(x);
            let var = g.channel_var(x);
            let var = g.clamp_min(var, SIGMA_FLOOR * SIGMA_FLOOR);
            let std = g.sqrt(var);
            Ok(MeasuredStats { mean, std })
        })
        .collect()
}

/// `(1/L) Σ_l mean_c [ln(σ̂/σ) − ½(1 − (σ² + (μ − μ̂)²)/σ̂²)]` with stored
/// `(μ, σ)` and measured `(μ̂, σ̂)`.
pub fn gen_bn_loss(g: &mut Graph, stored: &[NormStats], measured: &[MeasuredStats]) -> Result<Var> {
    if stored.len() != measured.len() || stored.is_empty() {
        return Err(Error::Shape(format!(
            "{} stored vs {} measured normalization layers",
            stored.len(),
            measured.len()
        )));
    }
    let mut terms = Vec::with_capacity(stored.len());
    for (s, m) in stored.iter().zip(measured) {
        let c = s.mean.len();
        if g.shape(m.mean) != [c] || g.shape(m.std) != [c] || s.std.len() != c {
            return Err(Error::Shape(format!("layer `{}`: channel counts differ", s.name)));
        }
        let mu = g.constant(Tensor::new(&[c], s.mean.clone()));
        let sigma = g.constant(Tensor::new(&[c], s.std.iter().map(|v| v.max(SIGMA_FLOOR)).collect()));
        let sigma_sq = g.constant(Tensor::new(&[c], s.std.iter().map(|v| v.max(SIGMA_FLOOR).powi(2)).collect()));
        let std_hat = g.clamp_min(m.std, SIGMA_FLOOR);
        let ratio = g.div(std_hat, sigma);
        let log_ratio = g.log(ratio);
        let diff = g.sub(mu, m.mean);
        let diff_sq = g.square(diff);
        let num = g.add(sigma_sq, diff_sq);
        let den = g.square(std_hat);
        let frac = g.div(num, den);
        let one_minus = g.neg(frac);
        let one_minus = g.offset(one_minus, 1.0);
        let half = g.scale(one_minus, 0.5);
        let kl = g.sub(log_ratio, half);
        terms.push(g.mean(kl));
    }
    let total = g.add_all(&terms);
    Ok(g.scale(total, 1.0 / stored.len() as f64))
}

/// [`gen_bn_loss`] on plain numbers.
pub fn bn_loss_value(stored: &[NormStats], measured: &[NormStats]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<MeasuredStats> = measured
        .iter()
        .map(|m| MeasuredStats {
            mean: g.constant(Tensor::new(&[m.mean.len()], m.mean.clone())),
            std: g.constant(Tensor::new(&[m.std.len()], m.std.clone())),
        })
        .collect();
    let loss = gen_bn_loss(&mut g, stored, &vars)?;
    Ok(g.item(loss))
}

/// Mean over the batch of `‖x − blur(x)‖²`, with a 3x3 Gaussian (σ = 1)
/// and reflect padding.
pub fn gen_prior_loss(g: &mut Graph, x: Var) -> Var {
    let batch = g.shape(x)[0].max(1);
    let smooth = g.blur3x3(x, gaussian_kernel3(1.0));
    let d = g.sub(x, smooth);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, 1.0 / batch as f64)
}

/// Graph handles of every objective term.
pub struct GenObjective {
    pub total: Var,
    pub ce: Var,
    pub div: Var,
    pub bn: Var,
    pub prior: Var,
    /// Generator forward trace, for its own running statistics.
    pub generator_trace: Trace,
}

impl GenObjective {
    pub fn values(&self, g: &Graph) -> GenLosses {
        GenLosses {
            ce: g.item(self.ce),
            div: g.item(self.div),
            bn: g.item(self.bn),
            prior: g.item(self.prior),
            total: g.item(self.total),
        }
    }
}

/// Builds the full generator objective for noise `z` and `labels`. The
/// generator runs in training mode under `gen_bound`; the teacher is bound
/// as constants and runs in evaluation mode.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective(
    g: &mut Graph,
    teacher: &GlobalClassifier,
    stored: &[NormStats],
    generator: &GeneratorNet,
    gen_bound: &mfcl_grad::Bound,
    z: &Tensor,
    labels: &[usize],
    q: usize,
    weights: &GenLossWeights,
) -> Result<GenObjective> {
    let zv = g.constant(z.clone());
    let mut generator_trace = Trace::default();
    let x = generator.forward(g, gen_bound, zv, Mode::Train, &mut generator_trace);
    teacher.check_input(g.shape(x))?;
    let teacher_bound = teacher.bind(g, false);
    let out = teacher.forward(g, &teacher_bound, x, Mode::Eval);
    let logits = slice_logits(g, out.logits, 0, q)?;
    let ce = gen_ce_loss(g, logits, labels)?;
    let div = gen_diversity_loss(g, logits)?;
    let measured = measure_batch_stats(g, &out.trace.norm_inputs)?;
    let bn = gen_bn_loss(g, stored, &measured)?;
    let prior = gen_prior_loss(g, x);
    let wd = g.scale(div, weights.div);
    let wb = g.scale(bn, weights.bn);
    let wp = g.scale(prior, weights.prior);
    let total = g.add_all(&[ce, wd, wb, wp]);
    Ok(GenObjective {
        total,
        ce,
        div,
        bn,
        prior,
        generator_trace,
    })
}

/// Trains `generator` in place against the frozen `teacher` for the first
/// `q` classes. `on_iter` sees every iteration's term values. The teacher is
/// only read; no training data is involved.
pub fn train_generator<R: Rng + ?Sized>(
    teacher: &GlobalClassifier,
    q: usize,
    config: &GenTrainConfig,
    generator: &mut GeneratorNet,
    rng: &mut R,
    mut on_iter: impl FnMut(usize, &GenLosses),
) -> Result<()> {
    config.validate()?;
    if q == 0 || q > teacher.num_classes() {
        return Err(Error::Invalid(format!(
            "cannot train for {q} classes with a {}-class teacher",
            teacher.num_classes()
        )));
    }
    if config.z_dim != generator.z_dim {
        return Err(Error::Config(format!(
            "config noise dimension {} differs from the generator's {}",
            config.z_dim, generator.z_dim
        )));
    }
    let stored = teacher.collect_norm_stats()?;
    let mut adam = Adam::new(config.lr);
    for iteration in 0..config.iterations {
        let (z, labels) = sample_noise_labels(config.batch_size, config.z_dim, q, rng)?;
        let mut g = Graph::new();
        let bound = generator.bind(&mut g, true);
        let obj = generator_objective(&mut g, teacher, &stored, generator, &bound, &z, &labels, q, &config.weights)?;
        let losses = obj.values(&g);
        if !losses.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                ce: losses.ce,
                div: losses.div,
                bn: losses.bn,
                prior: losses.prior,
            });
        }
        let grads = g.backward(obj.total);
        adam.step(&mut generator.params, &bound, &grads);
        generator.params.apply_running_updates(&obj.generator_trace.running_updates);
        on_iter(iteration, &losses);
    }
    Ok(())
}

/// Draws `bs` synthetic samples for the first `q` classes from a frozen
/// generator.
pub fn synthesize<R: Rng + ?Sized>(generator: &GeneratorNet, bs: usize, q: usize, rng: &mut R) -> Result<SyntheticBatch> {
    let (z, labels) = sample_noise_labels(bs, generator.z_dim, q, rng)?;
    let images = generator.generate(&z)?;
    Ok(SyntheticBatch { images, labels })
}
