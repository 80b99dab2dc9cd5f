//! End-to-end gradient verification of the encoder and both training losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderWeights, ModelConfig, PoolingPolicy, Role};
use crate::numkernel::Matrix;
use crate::tokenizer::{Vocab, CLS, PAD, SEP, UNK};

use super::trainer::{ce_batch, mnrl_batch, LabeledPair, TrainExample};

const FD_STEP: f64 = 1e-5;
/// Tensors whose gradient norm is below this fraction of the whole-model
/// gradient norm are compared against that floor instead (structurally zero
/// gradients such as attention key biases would otherwise measure FD noise).
const FLOOR_FRACTION: f64 = 1e-6;
const WORDS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mnrl,
    CeBinary,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnrl" => Ok(Objective::Mnrl),
            "ce" | "ce_binary" | "ce-binary" => Ok(Objective::CeBinary),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

/// A deliberate bug used to confirm the harness notices wrong gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flips the sign of every feed-forward weight and bias gradient.
    NegateFfnGrad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    /// `(tensor name, relative error)` in the canonical tensor order.
    pub per_tensor: Vec<(String, f64)>,
}

/// The tiny shape used for full-model checks: d=8, h=2, ff=16, L=2, 8 positions.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden: 8,
        heads: 2,
        ff: 16,
        vocab_size: WORDS + 4,
        max_positions: 8,
        segment_types: 2,
        layer_norm_eps: 1e-12,
        init_std: 0.3,
    }
}

fn toy_vocab() -> Vocab {
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
    tokens.extend((0..WORDS).map(|i| format!("w{i}")));
    Vocab::from_tokens(tokens).expect("static vocabulary is valid")
}

fn sentence(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.random_range(1..=max_words);
    (0..n)
        .map(|_| format!("w{}", rng.random_range(0..WORDS)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Compares the analytic gradient of a full training loss against central
/// finite differences, in `f64`, for every weight tensor.
///
/// Error per tensor is `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6·‖g‖)` with `g` the
/// whole-model analytic gradient; the result reports the maximum. `config` must be small: every scalar costs two forward passes.
pub fn model_grad_check(
    config: &ModelConfig,
    objective: Objective,
    seed: u64,
    fault: Option<Fault>,
) -> Result<ModelGradCheck> {
    if config.hidden > 16 || config.num_layers > 2 || config.max_positions > 8 {
        return Err(Error::Config(
            "model gradient check expects d ≤ 16, L ≤ 2 and max_len ≤ 8".into(),
        ));
    }
    let vocab = toy_vocab();
    if config.vocab_size < vocab.len() {
        return Err(Error::Config(format!(
            "model gradient check needs a vocabulary of at least {} tokens",
            vocab.len()
        )));
    }
    let role = match objective {
        Objective::Mnrl => Role::DualEncoder,
        Objective::CeBinary => Role::CrossEncoder,
    };
    let mut weights: EncoderWeights<f64> = EncoderWeights::init_random(config, seed, role)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let max_len = config.max_positions;
    // Non-trivial layer-norm and bias parameters so their gradients are exercised.
    for (name, t) in weights.named_tensors_mut() {
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            let base = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            for x in t.data_mut() {
                *x = base + rng.random_range(-0.2..0.2);
            }
        }
    }

    let loss_fn: Box<dyn Fn(&EncoderWeights<f64>, Option<&mut EncoderWeights<f64>>) -> Result<f64>> =
        match objective {
            Objective::Mnrl => {
                let examples: Vec<TrainExample> = (0..2)
                    .map(|_| TrainExample {
                        query: sentence(&mut rng, max_len - 2),
                        positive: sentence(&mut rng, max_len - 2),
                        negatives: vec![sentence(&mut rng, max_len - 2)],
                    })
                    .collect();
                let vocab = vocab.clone();
                Box::new(move |w, g| {
                    let batch: Vec<&TrainExample> = examples.iter().collect();
                    mnrl_batch(w, &vocab, &batch, 1, 20.0, max_len, PoolingPolicy::default(), g)
                })
            }
            Objective::CeBinary => {
                let pairs: Vec<LabeledPair> = (0..3)
                    .map(|i| LabeledPair {
                        query: sentence(&mut rng, 3),
                        doc: sentence(&mut rng, 4),
                        label: (i % 2) as f32,
                    })
                    .collect();
                let vocab = vocab.clone();
                Box::new(move |w, g| {
                    let batch: Vec<&LabeledPair> = pairs.iter().collect();
                    ce_batch(w, &vocab, &batch, max_len, g)
                })
            }
        };

    let mut grads = weights.zeros_like();
    loss_fn(&weights, Some(&mut grads))?;
    if fault == Some(Fault::NegateFfnGrad) {
        for (name, g) in grads.named_tensors_mut() {
            if name.contains(".ffn.") && !name.contains(".ln.") {
                g.scale(-1.0);
            }
        }
    }

    let names: Vec<String> = weights.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Matrix<f64>> = grads.named_tensors().into_iter().map(|(_, g)| g.clone()).collect();
    let global = analytic.iter().map(|g| g.frobenius().powi(2)).sum::<f64>().sqrt();
    let floor = (FLOOR_FRACTION * global).max(f64::MIN_POSITIVE);
    let mut per_tensor = Vec::with_capacity(names.len());
    for (t, name) in names.iter().enumerate() {
        let len = analytic[t].len();
        let mut numeric = Matrix::zeros(analytic[t].rows(), analytic[t].cols());
        for i in 0..len {
            let orig = weights.named_tensors()[t].1.data()[i];
            set_entry(&mut weights, t, i, orig + FD_STEP);
            let plus = loss_fn(&weights, None)?;
            set_entry(&mut weights, t, i, orig - FD_STEP);
            let minus = loss_fn(&weights, None)?;
            set_entry(&mut weights, t, i, orig);
            numeric.data_mut()[i] = (plus - minus) / (2.0 * FD_STEP);
        }
        per_tensor.push((name.clone(), floored_rel_error(&analytic[t], &numeric, floor)));
    }
    let (worst_tensor, max_rel_error) = per_tensor
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    Ok(ModelGradCheck {
        max_rel_error,
        worst_tensor,
        per_tensor,
    })
}

fn set_entry(w: &mut EncoderWeights<f64>, tensor: usize, index: usize, value: f64) {
    w.named_tensors_mut()[tensor].1.data_mut()[index] = value;
}

fn floored_rel_error(a: &Matrix<f64>, b: &Matrix<f64>, floor: f64) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / a.frobenius().max(b.frobenius()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnrl_gradients_match_finite_differences() {
        let r = model_grad_check(&small_config(), Objective::Mnrl, 1, None).unwrap();
        assert!(r.max_rel_error < 1e-4, "{} at {}", r.max_rel_error, r.worst_tensor);
    }

    #[test]
    fn ce_gradients_match_finite_differences() {
        let r = model_grad_check(&small_config(), Objective::CeBinary, 2, None).unwrap();
        assert!(r.max_rel_error < 1e-4, "{} at {}", r.max_rel_error, r.worst_tensor);
    }

    #[test]
    fn negated_ffn_gradient_is_detected() {
        for objective in [Objective::Mnrl, Objective::CeBinary] {
            let r = model_grad_check(&small_config(), objective, 3, Some(Fault::NegateFfnGrad)).unwrap();
            assert!(r.max_rel_error > 1e-1, "{objective:?}: {}", r.max_rel_error);
            assert!(r.worst_tensor.contains(".ffn."));
        }
    }

    #[test]
    fn oversized_config_is_rejected() {
        let cfg = ModelConfig { hidden: 32, heads: 2, ..small_config() };
        assert!(matches!(model_grad_check(&cfg, Objective::Mnrl, 0, None), Err(Error::Config(_))));
    }
}
