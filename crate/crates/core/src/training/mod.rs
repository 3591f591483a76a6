//! Training: the composite loss, Adam with gradient accumulation, the batch
//! entropy diagnostic, and checkpoints.
//!
//! The loss for one example is
//!
//! ```text
//! l_chosen = mean over stages of L(R[i, c_i], X)
//! l_all    = mean over stages and options of L(R[i, j], X)
//! l_total  = l_chosen + alpha * l_all
//! ```
//!
//! averaged over the batch. The chosen indices are recomputed every step and
//! treated as constants; gradients reach every option through `l_all`.

mod adam;
mod checkpoint;
mod entropy;
mod metrics;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use entropy::{batch_entropy, BatchEntropy};
pub use metrics::{MetricsRow, MetricsWriter, METRICS_HEADER};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codec::{encode_batch, encode_on_graph, GraphTrace, LatentCode, MeanSquaredError};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::refiner::{Refiner, RefinerConfig};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the all-options loss.
    pub alpha: f64,
    pub batch_size: usize,
    /// Examples per forward/backward pass; must divide `batch_size`.
    pub micro_batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Record zero wall-clock time so metrics are byte-reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            alpha: 0.01,
            batch_size: 32,
            micro_batch_size: 32,
            steps: 50_000,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            ));
        }
        if self.batch_size == 0 || self.micro_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !self.batch_size.is_multiple_of(self.micro_batch_size) {
            return bad(format!(
                "micro_batch_size {} does not divide batch_size {}",
                self.micro_batch_size, self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed must be at most {}", i64::MAX));
        }
        Ok(())
    }
}

/// Scalar graph nodes of the three loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub chosen: Var,
    pub all: Var,
    pub total: Var,
}

/// Builds the loss terms from an encoding trace, batch-averaged.
pub fn loss_terms<T: Scalar>(
    g: &mut Graph<T>,
    trace: &GraphTrace,
    alpha: f64,
) -> Result<LossTerms> {
    if trace.losses.is_empty() {
        return Err(Error::InvalidArgument(
            "loss of a trace with no stages".into(),
        ));
    }
    let mut chosen = Vec::with_capacity(trace.losses.len());
    let mut all = Vec::with_capacity(trace.losses.len());
    for (&losses, choice) in trace.losses.iter().zip(&trace.chosen) {
        chosen.push(g.select(losses, choice.clone())?);
        all.push(g.reshape(losses, [trace.batch * trace.options])?);
    }
    let chosen = g.concat(&chosen, 0)?;
    let chosen = g.mean(chosen)?;
    let all = g.concat(&all, 0)?;
    let all = g.mean(all)?;
    let weighted = g.scale(all, alpha)?;
    let total = g.add(chosen, weighted)?;
    Ok(LossTerms { chosen, all, total })
}

/// [`loss_terms`] for training: the trace must carry gradients.
pub fn loss_total<T: Scalar>(
    g: &mut Graph<T>,
    trace: &GraphTrace,
    alpha: f64,
) -> Result<LossTerms> {
    if !trace.losses.iter().all(|&l| g.is_tracked(l)) {
        return Err(Error::InvalidArgument(
            "trace was recorded without differentiable parameters".into(),
        ));
    }
    loss_terms(g, trace, alpha)
}

/// Loss values and codes of one applied training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss_chosen: f64,
    pub loss_all: f64,
    pub loss_total: f64,
    pub codes: Vec<LatentCode>,
}

pub(crate) fn codes_from_trace(trace: &GraphTrace) -> Result<Vec<LatentCode>> {
    (0..trace.batch)
        .map(|b| {
            LatentCode::new(
                trace.options,
                trace.chosen.iter().map(|s| s[b] + 1).collect(),
            )
        })
        .collect()
}

fn rows<T: Scalar>(batch: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let inner: usize = batch.shape()[1..].iter().product();
    let mut shape = batch.shape().to_vec();
    shape[0] = len;
    Tensor::new(
        shape,
        batch.data()[start * inner..(start + len) * inner].to_vec(),
    )
}

/// Loss gradients of a batch, accumulated over micro-batches. Parameters are
/// not modified.
pub fn batch_gradients<T: Scalar>(
    batch: &Tensor<T>,
    refiner: &Refiner<T>,
    config: &TrainConfig,
) -> Result<(StepOutcome, Vec<Tensor<T>>)> {
    config.validate()?;
    let size = batch.shape().first().copied().unwrap_or(0);
    let micro = config.micro_batch_size.min(size);
    if size == 0 || size % micro != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch of {size} cannot be split into micro-batches of {micro}"
        )));
    }
    let weight = micro as f64 / size as f64;
    let mut grads: Vec<Tensor<T>> = refiner
        .params()
        .tensors()
        .iter()
        .map(|p| Tensor::zeros(p.shape().to_vec()))
        .collect();
    let mut outcome = StepOutcome {
        loss_chosen: 0.0,
        loss_all: 0.0,
        loss_total: 0.0,
        codes: Vec::with_capacity(size),
    };
    for start in (0..size).step_by(micro) {
        let xs = rows(batch, start, micro)?;
        let mut g = Graph::new();
        let bound = refiner.params().bind(&mut g, true);
        let target = g.constant(xs);
        let trace = encode_on_graph(&mut g, refiner, &bound, target, &MeanSquaredError, None)?;
        let terms = loss_total(&mut g, &trace, config.alpha)?;
        let total = g.value(terms.total).item().to_f64().unwrap_or(f64::NAN);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {total} on examples {start}..{}",
                start + micro
            )));
        }
        outcome.loss_chosen += weight * g.value(terms.chosen).item().to_f64().unwrap_or(f64::NAN);
        outcome.loss_all += weight * g.value(terms.all).item().to_f64().unwrap_or(f64::NAN);
        outcome.loss_total += weight * total;
        outcome.codes.extend(codes_from_trace(&trace)?);
        let scaled = g.scale(terms.total, weight)?;
        let back = g.backward(scaled)?;
        for (acc, part) in grads.iter_mut().zip(bound.gradients(&g, &back)) {
            for (a, p) in acc.data_mut().iter_mut().zip(part.data()) {
                *a = *a + *p;
            }
        }
    }
    if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {} is not finite",
            refiner.params().name(crate::params::ParamId(i))
        )));
    }
    Ok((outcome, grads))
}

/// One optimizer step on `batch`. On a non-finite loss or gradient the step
/// is abandoned, the parameters and optimizer state stay as they were, and
/// the error is returned after logging.
pub fn train_step<T: Scalar>(
    batch: &Tensor<T>,
    refiner: &mut Refiner<T>,
    adam: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<StepOutcome> {
    let (outcome, grads) = match batch_gradients(batch, refiner, config) {
        Ok(v) => v,
        Err(e @ Error::NonFinite(_)) => {
            log::warn!("skipping step {}: {e}", adam.step + 1);
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    adam_step(
        refiner.params_mut().tensors_mut(),
        &grads,
        adam,
        &config.adam(),
    )?;
    Ok(outcome)
}

/// Loss statistics of a model on held-out data, without gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub examples: usize,
    pub loss_chosen: f64,
    pub loss_all: f64,
    /// Loss of the final reconstruction.
    pub final_loss: f64,
    pub entropy: BatchEntropy,
}

pub fn evaluate(
    refiner: &Refiner<f32>,
    data: &Dataset,
    max_examples: usize,
    chunk: usize,
) -> Result<EvalStats> {
    let n = data.len().min(max_examples);
    if n == 0 || chunk == 0 {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one example".into(),
        ));
    }
    let (mut chosen, mut all, mut last) = (0.0, 0.0, 0.0);
    let mut codes = Vec::with_capacity(n);
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        for trace in encode_batch(refiner, &data.batch(&idx)?)? {
            let stages = trace.stages.len() as f64;
            for rec in &trace.stages {
                chosen += rec.losses[rec.chosen - 1] as f64 / stages;
                all += rec.losses.iter().map(|&l| l as f64).sum::<f64>()
                    / (stages * rec.losses.len() as f64);
            }
            last += trace.final_loss() as f64;
            codes.push(trace.code);
        }
    }
    Ok(EvalStats {
        examples: n,
        loss_chosen: chosen / n as f64,
        loss_all: all / n as f64,
        final_loss: last / n as f64,
        entropy: batch_entropy(&codes)?,
    })
}

/// Complete mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub refiner: Refiner<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    /// Steps attempted, including skipped ones.
    pub step: u64,
    pub skipped: u64,
    pub elapsed_seconds: f64,
}

impl Trainer {
    /// Fresh parameters drawn from the training seed.
    pub fn new(refiner: RefinerConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let refiner = Refiner::new(refiner, &mut rng)?;
        let adam = AdamState::new(refiner.params().tensors());
        Ok(Trainer {
            refiner,
            adam,
            config,
            rng,
            step: 0,
            skipped: 0,
            elapsed_seconds: 0.0,
        })
    }

    /// Draws a batch from `data` and trains on it. A skipped step returns
    /// `Ok(None)`.
    pub fn step(&mut self, data: &Dataset) -> Result<Option<MetricsRow>> {
        if data.example_shape() != self.refiner.config().data_shape.as_slice() {
            return Err(Error::shape(
                "train",
                data.example_shape(),
                &self.refiner.config().data_shape,
            ));
        }
        let batch = data.sample_batch(self.config.batch_size, &mut self.rng)?;
        let started = Instant::now();
        self.step += 1;
        let result = train_step(&batch, &mut self.refiner, &mut self.adam, &self.config);
        if !self.config.deterministic {
            self.elapsed_seconds += started.elapsed().as_secs_f64();
        }
        match result {
            Ok(out) => {
                let entropy = batch_entropy(&out.codes)?;
                Ok(Some(MetricsRow {
                    step: self.step,
                    loss_chosen: out.loss_chosen,
                    loss_all: out.loss_all,
                    loss_total: out.loss_total,
                    entropy: entropy.mean,
                    pooled_entropy: entropy.pooled,
                    wall_seconds: self.elapsed_seconds,
                }))
            }
            Err(Error::NonFinite(_)) => {
                self.skipped += 1;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}
