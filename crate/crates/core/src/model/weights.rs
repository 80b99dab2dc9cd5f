use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Scalar};

use super::config::{ModelConfig, Role};

/// One post-layer-norm transformer encoder layer. Linear weights are stored
/// `in × out` so a layer applies `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T: Scalar = f32> {
    pub query_w: Matrix<T>,
    pub query_b: Matrix<T>,
    pub key_w: Matrix<T>,
    pub key_b: Matrix<T>,
    pub value_w: Matrix<T>,
    pub value_b: Matrix<T>,
    pub attn_out_w: Matrix<T>,
    pub attn_out_b: Matrix<T>,
    pub attn_ln_gamma: Matrix<T>,
    pub attn_ln_beta: Matrix<T>,
    pub ffn_in_w: Matrix<T>,
    pub ffn_in_b: Matrix<T>,
    pub ffn_out_w: Matrix<T>,
    pub ffn_out_b: Matrix<T>,
    pub ffn_ln_gamma: Matrix<T>,
    pub ffn_ln_beta: Matrix<T>,
}

/// Sequence-classification head of a cross encoder: BERT pooler plus a
/// single-logit linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T: Scalar = f32> {
    pub pooler_w: Matrix<T>,
    pub pooler_b: Matrix<T>,
    pub classifier_w: Matrix<T>,
    pub classifier_b: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T: Scalar = f32> {
    pub config: ModelConfig,
    pub role: Role,
    pub word: Matrix<T>,
    pub position: Matrix<T>,
    pub segment: Matrix<T>,
    pub emb_ln_gamma: Matrix<T>,
    pub emb_ln_beta: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub head: Option<HeadWeights<T>>,
}

const LAYER_TENSORS: [&str; 16] = [
    "attention.query.weight",
    "attention.query.bias",
    "attention.key.weight",
    "attention.key.bias",
    "attention.value.weight",
    "attention.value.bias",
    "attention.output.weight",
    "attention.output.bias",
    "attention.ln.gamma",
    "attention.ln.beta",
    "ffn.in.weight",
    "ffn.in.bias",
    "ffn.out.weight",
    "ffn.out.bias",
    "ffn.ln.gamma",
    "ffn.ln.beta",
];

impl<T: Scalar> LayerWeights<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (d, ff) = (cfg.hidden, cfg.ff);
        Self {
            query_w: Matrix::zeros(d, d),
            query_b: Matrix::zeros(1, d),
            key_w: Matrix::zeros(d, d),
            key_b: Matrix::zeros(1, d),
            value_w: Matrix::zeros(d, d),
            value_b: Matrix::zeros(1, d),
            attn_out_w: Matrix::zeros(d, d),
            attn_out_b: Matrix::zeros(1, d),
            attn_ln_gamma: Matrix::zeros(1, d),
            attn_ln_beta: Matrix::zeros(1, d),
            ffn_in_w: Matrix::zeros(d, ff),
            ffn_in_b: Matrix::zeros(1, ff),
            ffn_out_w: Matrix::zeros(ff, d),
            ffn_out_b: Matrix::zeros(1, d),
            ffn_ln_gamma: Matrix::zeros(1, d),
            ffn_ln_beta: Matrix::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Matrix<T>; 16] {
        [
            &self.query_w,
            &self.query_b,
            &self.key_w,
            &self.key_b,
            &self.value_w,
            &self.value_b,
            &self.attn_out_w,
            &self.attn_out_b,
            &self.attn_ln_gamma,
            &self.attn_ln_beta,
            &self.ffn_in_w,
            &self.ffn_in_b,
            &self.ffn_out_w,
            &self.ffn_out_b,
            &self.ffn_ln_gamma,
            &self.ffn_ln_beta,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix<T>; 16] {
        [
            &mut self.query_w,
            &mut self.query_b,
            &mut self.key_w,
            &mut self.key_b,
            &mut self.value_w,
            &mut self.value_b,
            &mut self.attn_out_w,
            &mut self.attn_out_b,
            &mut self.attn_ln_gamma,
            &mut self.attn_ln_beta,
            &mut self.ffn_in_w,
            &mut self.ffn_in_b,
            &mut self.ffn_out_w,
            &mut self.ffn_out_b,
            &mut self.ffn_ln_gamma,
            &mut self.ffn_ln_beta,
        ]
    }
}

impl<T: Scalar> HeadWeights<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            pooler_w: Matrix::zeros(cfg.hidden, cfg.hidden),
            pooler_b: Matrix::zeros(1, cfg.hidden),
            classifier_w: Matrix::zeros(cfg.hidden, 1),
            classifier_b: Matrix::zeros(1, 1),
        }
    }
}

/// True for tensors that hold layer-norm parameters or biases.
pub fn is_norm_or_bias(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

impl<T: Scalar> EncoderWeights<T> {
    /// All-zero weights with the shapes implied by `config` and `role`.
    pub fn zeros(config: &ModelConfig, role: Role) -> Self {
        let d = config.hidden;
        Self {
            config: config.clone(),
            role,
            word: Matrix::zeros(config.vocab_size, d),
            position: Matrix::zeros(config.max_positions, d),
            segment: Matrix::zeros(config.segment_types, d),
            emb_ln_gamma: Matrix::zeros(1, d),
            emb_ln_beta: Matrix::zeros(1, d),
            layers: (0..config.num_layers).map(|_| LayerWeights::zeros(config)).collect(),
            head: (role == Role::CrossEncoder).then(|| HeadWeights::zeros(config)),
        }
    }

    /// Zero tensors shaped like `self`, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config, self.role)
    }

    /// Truncated-normal weights (σ = `init_std`, clipped at ±2σ by
    /// resampling), zero biases, unit layer-norm gains. Deterministic in `seed`.
    pub fn init_random(config: &ModelConfig, seed: u64, role: Role) -> Result<Self> {
        config.validate()?;
        let mut w = Self::zeros(config, role);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        for (name, t) in w.named_tensors_mut() {
            if name.ends_with(".gamma") {
                t.fill(T::one());
            } else if !is_norm_or_bias(&name) {
                for x in t.data_mut() {
                    *x = T::lit(truncated_normal(&mut rng) * std);
                }
            }
        }
        Ok(w)
    }

    /// Tensor names and references in a fixed, documented order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out: Vec<(String, &Matrix<T>)> = vec![
            ("embeddings.word".into(), &self.word),
            ("embeddings.position".into(), &self.position),
            ("embeddings.segment".into(), &self.segment),
            ("embeddings.ln.gamma".into(), &self.emb_ln_gamma),
            ("embeddings.ln.beta".into(), &self.emb_ln_beta),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        if let Some(h) = &self.head {
            out.push(("head.pooler.weight".into(), &h.pooler_w));
            out.push(("head.pooler.bias".into(), &h.pooler_b));
            out.push(("head.classifier.weight".into(), &h.classifier_w));
            out.push(("head.classifier.bias".into(), &h.classifier_b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out: Vec<(String, &mut Matrix<T>)> = vec![
            ("embeddings.word".into(), &mut self.word),
            ("embeddings.position".into(), &mut self.position),
            ("embeddings.segment".into(), &mut self.segment),
            ("embeddings.ln.gamma".into(), &mut self.emb_ln_gamma),
            ("embeddings.ln.beta".into(), &mut self.emb_ln_beta),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors_mut()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        if let Some(h) = &mut self.head {
            out.push(("head.pooler.weight".into(), &mut h.pooler_w));
            out.push(("head.pooler.bias".into(), &mut h.pooler_b));
            out.push(("head.classifier.weight".into(), &mut h.classifier_w));
            out.push(("head.classifier.bias".into(), &mut h.classifier_b));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderWeights<U> {
        let mut out = EncoderWeights::<U>::zeros(&self.config, self.role);
        for ((_, dst), (_, src)) in out.named_tensors_mut().into_iter().zip(self.named_tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Checks tensor shapes against the config and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.head.is_some() != (self.role == Role::CrossEncoder) {
            return Err(Error::Validation(format!(
                "{} weights must {} a classification head",
                self.role.as_str(),
                if self.role == Role::CrossEncoder { "carry" } else { "not carry" }
            )));
        }
        let reference = Self::zeros(&self.config, self.role);
        let expected = reference.named_tensors();
        let actual = self.named_tensors();
        if expected.len() != actual.len() {
            return Err(Error::Validation(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, e), (_, a)) in expected.iter().zip(&actual) {
            if e.shape() != a.shape() {
                return Err(Error::Validation(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    a.shape(),
                    e.shape()
                )));
            }
            if !a.all_finite() {
                return Err(Error::Validation(format!("tensor {name} holds non-finite values")));
            }
        }
        Ok(())
    }

    /// Makes initial attention content-based: every layer's key projection
    /// starts equal to its query projection (so identical tokens attract each
    /// other) and the position and segment tables start at zero. Used for
    /// cross encoders trained from scratch, where matching query tokens
    /// against document tokens is otherwise slow to emerge.
    pub fn content_attention_init(&mut self) {
        for l in &mut self.layers {
            l.key_w = l.query_w.clone();
            l.key_b = l.query_b.clone();
        }
        self.position.fill(T::zero());
        self.segment.fill(T::zero());
    }

    /// Zeroes every tensor of encoder layers `from..`.
    pub fn zero_layers_from(&mut self, from: usize) {
        for layer in self.layers.iter_mut().skip(from) {
            for t in layer.tensors_mut() {
                t.fill(T::zero());
            }
        }
    }
}

fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}
