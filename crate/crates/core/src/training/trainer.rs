use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::{backward_batch, forward_batch, head_backward, head_forward};
use crate::model::{eligible_positions, mean_rows, mean_rows_backward, EncoderWeights, PoolingPolicy};
use crate::numkernel::{Matrix, Scalar};
use crate::tokenizer::{encode_pair, encode_single, Encoding, Vocab};

use super::loss::{ce_pair_loss, mnrl_loss};
use super::optim::{adamw_step, AdamWParams, OptimizerState};

/// A query, its positive passage and optional hard negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub query: String,
    pub positive: String,
    #[serde(default)]
    pub negatives: Vec<String>,
}

impl TrainExample {
    pub fn new(query: impl Into<String>, positive: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            positive: positive.into(),
            negatives: Vec::new(),
        }
    }
}

/// A `(query, document)` pair with a relevance label in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub query: String,
    pub doc: String,
    pub label: f32,
}

/// Training data; the variant selects the objective.
#[derive(Debug, Clone)]
pub enum TrainData {
    /// Dual encoder with multiple-negatives ranking loss.
    Mnrl(Vec<TrainExample>),
    /// Cross encoder with binary cross-entropy on the head logit.
    CeBinary(Vec<LabeledPair>),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Mnrl(v) => v.len(),
            TrainData::CeBinary(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Hard negatives used per example (MNRL only).
    pub negatives_per_example: usize,
    /// Multiplier applied to cosine similarities (MNRL only).
    pub scale: f64,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_len: usize,
    pub pooling: PoolingPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            negatives_per_example: 4,
            scale: 20.0,
            learning_rate: 2e-4,
            warmup_fraction: 0.1,
            epochs: 1,
            max_steps: None,
            weight_decay: 0.01,
            seed: 0,
            max_len: 64,
            pooling: PoolingPolicy::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self, data: &TrainData) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyInput("training dataset is empty".into()));
        }
        if matches!(data, TrainData::Mnrl(_)) && self.batch_size < 2 {
            return Err(Error::Config("MNRL needs a batch size of at least 2".into()));
        }
        if self.batch_size == 0 || self.batch_size > data.len() {
            return Err(Error::Config(format!(
                "batch size {} does not fit a dataset of {} examples",
                self.batch_size,
                data.len()
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config("similarity scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup fraction must lie in [0, 1]".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::Config("need at least one epoch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Linear warmup over the first `warmup` steps, then linear decay to zero.
pub fn learning_rate_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        peak * (total - step) as f64 / (total - warmup) as f64
    } else {
        peak
    }
}

/// MNRL loss over one batch; accumulates gradients when `grads` is given.
///
/// Queries and candidates share one packed forward pass through the same
/// weights. Candidates are the positives in batch order, then each example's
/// first `negatives_per_example` hard negatives.
pub(crate) fn mnrl_batch<T: Scalar>(
    weights: &EncoderWeights<T>,
    vocab: &Vocab,
    batch: &[&TrainExample],
    negatives_per_example: usize,
    scale: f64,
    max_len: usize,
    pooling: PoolingPolicy,
    grads: Option<&mut EncoderWeights<T>>,
) -> Result<f64> {
    let mut texts: Vec<&str> = batch.iter().map(|e| e.query.as_str()).collect();
    texts.extend(batch.iter().map(|e| e.positive.as_str()));
    for e in batch {
        texts.extend(e.negatives.iter().take(negatives_per_example).map(String::as_str));
    }
    let encs = texts
        .iter()
        .map(|t| encode_single(t, vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    let positions = encs
        .iter()
        .map(|e| eligible_positions(e, pooling))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Encoding> = encs.iter().collect();
    let out = forward_batch(weights, &refs, weights.layers.len(), false, grads.is_some())?;
    let last = out.last();
    let pooled: Vec<Vec<T>> = (0..encs.len())
        .map(|s| mean_rows(last, out.packed.offsets[s], &positions[s]))
        .collect();
    let b = batch.len();
    let queries = Matrix::from_rows(&pooled[..b])?;
    let candidates = Matrix::from_rows(&pooled[b..])?;
    let loss = mnrl_loss(&queries, &candidates, T::lit(scale))?;
    if let Some(grads) = grads {
        let mut d_last = Matrix::zeros(last.rows(), last.cols());
        for s in 0..encs.len() {
            let g = if s < b {
                loss.d_queries.row(s)
            } else {
                loss.d_candidates.row(s - b)
            };
            mean_rows_backward(g, out.packed.offsets[s], &positions[s], &mut d_last);
        }
        backward_batch(weights, &refs, &out, d_last, grads)?;
    }
    Ok(loss.loss.as_f64())
}

/// Mean binary cross-entropy over one batch of labeled pairs.
pub(crate) fn ce_batch<T: Scalar>(
    weights: &EncoderWeights<T>,
    vocab: &Vocab,
    batch: &[&LabeledPair],
    max_len: usize,
    grads: Option<&mut EncoderWeights<T>>,
) -> Result<f64> {
    let head = weights
        .head
        .as_ref()
        .ok_or_else(|| Error::Validation("cross-encoder training needs a classification head".into()))?;
    let encs = batch
        .iter()
        .map(|p| encode_pair(&p.query, &p.doc, vocab, max_len, false))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Encoding> = encs.iter().collect();
    let out = forward_batch(weights, &refs, weights.layers.len(), false, grads.is_some())?;
    let (logits, head_cache) = head_forward(head, out.last(), &out.packed)?;
    let n = T::from_usize(batch.len()).unwrap();
    let mut loss = T::zero();
    let mut d_logits = Vec::with_capacity(batch.len());
    for (z, p) in logits.iter().zip(batch) {
        let (l, d) = ce_pair_loss(*z, T::lit(p.label as f64));
        loss += l;
        d_logits.push(d / n);
    }
    if let Some(grads) = grads {
        let head_grads = grads.head.as_mut().expect("gradient buffer mirrors the head");
        let d_last = head_backward(head, &head_cache, &d_logits, &out.packed, head_grads)?;
        backward_batch(weights, &refs, &out, d_last, grads)?;
    }
    Ok((loss / n).as_f64())
}

/// Trains `weights` in place and returns the per-step loss curve.
///
/// Batches are drawn from a fresh seeded shuffle every epoch; an incomplete
/// final batch is dropped.
pub fn train(
    weights: &mut EncoderWeights<f32>,
    vocab: &Vocab,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<Vec<LossPoint>> {
    config.validate(data)?;
    let per_epoch = data.len() / config.batch_size;
    let mut total = per_epoch * config.epochs;
    if let Some(max) = config.max_steps {
        total = if config.epochs == 0 { max } else { total.min(max) };
    }
    let warmup = (config.warmup_fraction * total as f64).ceil() as usize;
    let params = AdamWParams {
        weight_decay: config.weight_decay,
        ..AdamWParams::default()
    };
    let mut state = OptimizerState::new(weights);
    let mut grads = weights.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(total);

    let mut step = 0;
    while step < total {
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(config.batch_size) {
            if step >= total {
                break;
            }
            for (_, g) in grads.named_tensors_mut() {
                g.fill(0.0);
            }
            let loss = match data {
                TrainData::Mnrl(examples) => {
                    let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
                    mnrl_batch(
                        weights,
                        vocab,
                        &batch,
                        config.negatives_per_example,
                        config.scale,
                        config.max_len,
                        config.pooling,
                        Some(&mut grads),
                    )?
                }
                TrainData::CeBinary(pairs) => {
                    let batch: Vec<&LabeledPair> = chunk.iter().map(|&i| &pairs[i]).collect();
                    ce_batch(weights, vocab, &batch, config.max_len, Some(&mut grads))?
                }
            };
            let lr = learning_rate_at(step, total, warmup, config.learning_rate);
            adamw_step(weights, &grads, &mut state, lr, &params)?;
            curve.push(LossPoint { step, loss, lr });
            step += 1;
        }
        if per_epoch == 0 {
            break;
        }
    }
    log::debug!(
        "trained {} steps, final loss {:.4}",
        curve.len(),
        curve.last().map_or(f64::NAN, |p| p.loss)
    );
    Ok(curve)
}

/// Writes a loss curve as CSV (`step,loss,lr`) under optional `#` header lines.
pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[LossPoint], header: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for h in header {
        writeln!(out, "# {h}").unwrap();
    }
    writeln!(out, "step,loss,lr").unwrap();
    for p in curve {
        writeln!(out, "{},{},{}", p.step, p.loss, p.lr).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let lrs: Vec<f64> = (0..10).map(|s| learning_rate_at(s, 10, 2, 1.0)).collect();
        assert_eq!(lrs[0], 0.5);
        assert_eq!(lrs[1], 1.0);
        assert_eq!(lrs[2], 1.0);
        assert!((lrs[9] - 0.125).abs() < 1e-12);
        assert!(lrs.windows(2).skip(2).all(|w| w[1] < w[0]));
    }
}
