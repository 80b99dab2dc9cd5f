//! BERT-style encoder: weights, forward pass with per-layer hidden-state
//! capture, mean-pooled sentence embeddings and the cross-encoder head.

mod config;
pub(crate) mod forward;
mod pooling;
mod weights;

use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, Role};
pub use pooling::{eligible_positions, pool_mean, PoolingPolicy};
pub(crate) use pooling::{mean_rows, mean_rows_backward};
pub use weights::{is_norm_or_bias, EncoderWeights, HeadWeights, LayerWeights};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Scalar};
use crate::tokenizer::{encode_pair, encode_single, Encoding, Vocab, DEFAULT_MAX_LEN};

use forward::{forward_batch, head_forward};

/// Per-layer token matrices of one sequence, each `max_len × hidden`.
///
/// With capture, index 0 is the embedding-layer output (after its layer norm)
/// and index `i` is the output of encoder layer `i − 1`, so there are `L + 1`
/// entries. Without capture the list holds only the final layer. Rows at
/// padded positions are not computed and are left at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<T: Scalar = f32> {
    pub layers: Vec<Matrix<T>>,
}

impl<T: Scalar> HiddenStates<T> {
    pub fn last(&self) -> &Matrix<T> {
        self.layers.last().expect("non-empty hidden states")
    }
}

pub fn forward<T: Scalar>(weights: &EncoderWeights<T>, encoding: &Encoding, capture: bool) -> Result<HiddenStates<T>> {
    let out = forward_batch(weights, &[encoding], weights.layers.len(), capture, false)?;
    let n = out.packed.lens[0];
    let layers = out
        .hidden
        .iter()
        .map(|h| {
            let mut full = Matrix::zeros(encoding.len(), h.cols());
            full.set_block(0, 0, &h.slice_rows(0, n));
            full
        })
        .collect();
    Ok(HiddenStates { layers })
}

/// How a sentence is presented to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// `[CLS] s [SEP]`, the dual-encoder path.
    Single,
    /// `[CLS] s [SEP] s [SEP]`, the cross-encoder self-pairing path.
    SelfPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedOptions {
    pub max_len: usize,
    pub pooling: PoolingPolicy,
    /// Sequences per packed forward pass.
    pub batch_size: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            max_len: DEFAULT_MAX_LEN,
            pooling: PoolingPolicy::default(),
            batch_size: 64,
        }
    }
}

/// Embeds sentences with a fixed set of weights.
#[derive(Debug, Clone, Copy)]
pub struct SentenceEncoder<'a> {
    pub weights: &'a EncoderWeights<f32>,
    pub vocab: &'a Vocab,
    pub mode: EmbedMode,
    pub options: EmbedOptions,
}

impl<'a> SentenceEncoder<'a> {
    pub fn new(weights: &'a EncoderWeights<f32>, vocab: &'a Vocab, mode: EmbedMode, options: EmbedOptions) -> Self {
        Self {
            weights,
            vocab,
            mode,
            options,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.weights.layers.len()
    }

    pub fn encode(&self, text: &str) -> Result<Encoding> {
        match self.mode {
            EmbedMode::Single => encode_single(text, self.vocab, self.options.max_len),
            EmbedMode::SelfPair => encode_pair(text, text, self.vocab, self.options.max_len, true),
        }
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer > self.num_layers() {
            return Err(Error::Validation(format!(
                "layer {layer} out of range 0..={}",
                self.num_layers()
            )));
        }
        Ok(())
    }

    /// Pooled embedding of `text` at hidden-state index `layer` (0..=L).
    pub fn embed(&self, text: &str, layer: usize) -> Result<Vec<f32>> {
        self.embed_batch(&[text], layer)?.pop().expect("one result")
    }

    /// Pooled embeddings at one layer. Only the layers needed are computed.
    /// The outer `Result` fails for invalid arguments, the inner ones per text.
    pub fn embed_batch(&self, texts: &[&str], layer: usize) -> Result<Vec<Result<Vec<f32>>>> {
        self.check_layer(layer)?;
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.options.batch_size.max(1)) {
            self.run_chunk(chunk, layer, false, &mut |r| out.push(r.map(|mut v| v.pop().unwrap())))?;
        }
        Ok(out)
    }

    /// Pooled embeddings at every hidden-state index `0..=L`, one vector per layer.
    pub fn embed_batch_all_layers(&self, texts: &[&str]) -> Result<Vec<Result<Vec<Vec<f32>>>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.options.batch_size.max(1)) {
            self.run_chunk(chunk, self.num_layers(), true, &mut |r| out.push(r))?;
        }
        Ok(out)
    }

    fn run_chunk(
        &self,
        chunk: &[&str],
        depth: usize,
        all_layers: bool,
        sink: &mut dyn FnMut(Result<Vec<Vec<f32>>>),
    ) -> Result<()> {
        let mut encodings = Vec::with_capacity(chunk.len());
        let mut positions = Vec::with_capacity(chunk.len());
        let mut failures: Vec<Option<Error>> = Vec::with_capacity(chunk.len());
        for text in chunk {
            match self
                .encode(text)
                .and_then(|e| eligible_positions(&e, self.options.pooling).map(|p| (e, p)))
            {
                Ok((e, p)) => {
                    encodings.push(e);
                    positions.push(p);
                    failures.push(None);
                }
                Err(err) => failures.push(Some(err)),
            }
        }
        let refs: Vec<&Encoding> = encodings.iter().collect();
        let out = forward_batch(self.weights, &refs, depth, all_layers, false)?;
        let mut next = 0;
        for failure in failures {
            match failure {
                Some(err) => sink(Err(err)),
                None => {
                    let o = out.packed.offsets[next];
                    let pooled = out.hidden.iter().map(|h| mean_rows(h, o, &positions[next])).collect();
                    sink(Ok(pooled));
                    next += 1;
                }
            }
        }
        Ok(())
    }
}

/// Dual-encoder embedding: single encoding, pooled at `layer`.
pub fn embed_sentence_de(
    weights: &EncoderWeights<f32>,
    vocab: &Vocab,
    text: &str,
    layer: usize,
    options: EmbedOptions,
) -> Result<Vec<f32>> {
    SentenceEncoder::new(weights, vocab, EmbedMode::Single, options).embed(text, layer)
}

/// Cross-encoder embedding: the sentence paired with itself, pooled at `layer`.
pub fn embed_sentence_ce(
    weights: &EncoderWeights<f32>,
    vocab: &Vocab,
    text: &str,
    layer: usize,
    options: EmbedOptions,
) -> Result<Vec<f32>> {
    SentenceEncoder::new(weights, vocab, EmbedMode::SelfPair, options).embed(text, layer)
}

/// Relevance logit of `(query, doc)` from the cross-encoder head.
pub fn ce_score(weights: &EncoderWeights<f32>, vocab: &Vocab, query: &str, doc: &str, max_len: usize) -> Result<f32> {
    Ok(ce_score_batch(weights, vocab, query, &[doc], max_len, 1)?[0])
}

/// Scores one query against many documents in packed batches.
pub fn ce_score_batch(
    weights: &EncoderWeights<f32>,
    vocab: &Vocab,
    query: &str,
    docs: &[&str],
    max_len: usize,
    batch_size: usize,
) -> Result<Vec<f32>> {
    let head = weights
        .head
        .as_ref()
        .ok_or_else(|| Error::Validation("cross-encoder head is missing".into()))?;
    let mut scores = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(batch_size.max(1)) {
        let encs = chunk
            .iter()
            .map(|d| encode_pair(query, d, vocab, max_len, false))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Encoding> = encs.iter().collect();
        let out = forward_batch(weights, &refs, weights.layers.len(), false, false)?;
        let (logits, _) = head_forward(head, out.last(), &out.packed)?;
        scores.extend(logits);
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::from_tokens(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "red", "green", "blue", "cat", "dog", "##s"]).unwrap()
    }

    fn cfg(v: &Vocab) -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            hidden: 16,
            heads: 4,
            ff: 32,
            vocab_size: v.len(),
            max_positions: 32,
            // Larger init so layers visibly change the representation.
            init_std: 0.2,
            ..ModelConfig::default()
        }
    }

    fn opts(max_len: usize) -> EmbedOptions {
        EmbedOptions {
            max_len,
            ..Default::default()
        }
    }

    #[test]
    fn capture_on_and_off_agree_on_final_layer() {
        let v = vocab();
        let w = EncoderWeights::<f32>::init_random(&cfg(&v), 1, Role::DualEncoder).unwrap();
        let enc = encode_single("red cats", &v, 10).unwrap();
        let on = forward(&w, &enc, true).unwrap();
        let off = forward(&w, &enc, false).unwrap();
        assert_eq!(on.layers.len(), 4);
        assert_eq!(off.layers.len(), 1);
        assert_eq!(on.last(), off.last());
        assert!(on.layers.iter().all(|m| m.all_finite()));
    }

    #[test]
    fn padding_does_not_change_embeddings() {
        let v = vocab();
        let w = EncoderWeights::init_random(&cfg(&v), 2, Role::CrossEncoder).unwrap();
        for mode in [EmbedMode::Single, EmbedMode::SelfPair] {
            let short = SentenceEncoder::new(&w, &v, mode, opts(12));
            let long = SentenceEncoder::new(&w, &v, mode, opts(32));
            for layer in 0..=3 {
                let a = short.embed("blue dogs red", layer).unwrap();
                let b = long.embed("blue dogs red", layer).unwrap();
                let dev = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
                assert!(dev < 1e-5, "{mode:?} layer {layer}: {dev}");
            }
        }
    }

    #[test]
    fn last_layer_embedding_matches_capture_off_pooling() {
        let v = vocab();
        let w = EncoderWeights::init_random(&cfg(&v), 3, Role::DualEncoder).unwrap();
        let e = embed_sentence_de(&w, &v, "green cat", 3, opts(8)).unwrap();
        let enc = encode_single("green cat", &v, 8).unwrap();
        let h = forward(&w, &enc, false).unwrap();
        assert_eq!(e, pool_mean(h.last(), &enc, PoolingPolicy::default()).unwrap());
        assert_eq!(e, embed_sentence_de(&w, &v, "green cat", 3, opts(8)).unwrap());
    }

    #[test]
    fn self_pairing_changes_the_embedding() {
        let v = vocab();
        let w = EncoderWeights::init_random(&cfg(&v), 4, Role::CrossEncoder).unwrap();
        let de = embed_sentence_de(&w, &v, "red dog", 3, opts(16)).unwrap();
        let ce = embed_sentence_ce(&w, &v, "red dog", 3, opts(16)).unwrap();
        assert!(de.iter().zip(&ce).any(|(a, b)| (a - b).abs() > 1e-4));
    }

    #[test]
    fn ce_embedding_edge_cases() {
        let v = vocab();
        let w = EncoderWeights::init_random(&cfg(&v), 5, Role::CrossEncoder).unwrap();
        assert!(matches!(
            embed_sentence_ce(&w, &v, "", 1, opts(16)),
            Err(Error::EmptyInput(_))
        ));
        assert!(embed_sentence_ce(&w, &v, "red", 4, opts(16)).is_err());

        let e = embed_sentence_ce(&w, &v, "blue cat", 2, opts(16)).unwrap();
        let dot: f32 = e.iter().map(|x| x * x).sum();
        let cos = dot / (dot.sqrt() * dot.sqrt());
        assert!((cos - 1.0).abs() < 1e-6);

        // Layer 0 only sees the embedding tables and their layer norm.
        let mut zeroed = w.clone();
        zeroed.zero_layers_from(0);
        assert_eq!(
            embed_sentence_ce(&w, &v, "blue cat", 0, opts(16)).unwrap(),
            embed_sentence_ce(&zeroed, &v, "blue cat", 0, opts(16)).unwrap()
        );
    }

    #[test]
    fn layers_compose_sequentially() {
        let v = vocab();
        let w = EncoderWeights::<f32>::init_random(&cfg(&v), 6, Role::DualEncoder).unwrap();
        let enc = encode_single("red green blue", &v, 8).unwrap();
        let full = forward(&w, &enc, true).unwrap();
        for i in 0..=3 {
            let mut cut = w.clone();
            cut.zero_layers_from(i);
            let partial = forward(&cut, &enc, true).unwrap();
            assert_eq!(partial.layers[i], full.layers[i], "index {i}");
        }
    }

    #[test]
    fn ce_head_cases() {
        let v = vocab();
        let mut w = EncoderWeights::init_random(&cfg(&v), 7, Role::CrossEncoder).unwrap();
        let a = ce_score(&w, &v, "red cat", "blue dog", 16).unwrap();
        assert_eq!(a, ce_score(&w, &v, "red cat", "blue dog", 16).unwrap());
        let batch = ce_score_batch(&w, &v, "red cat", &["blue dog", "cats"], 16, 1).unwrap();
        assert_eq!(batch[0], a);

        let head = w.head.as_mut().unwrap();
        head.pooler_w.fill(0.0);
        head.pooler_b.fill(0.0);
        head.classifier_w.fill(0.0);
        head.classifier_b.fill(0.375);
        assert_eq!(ce_score(&w, &v, "red", "dog", 16).unwrap(), 0.375);

        let de = EncoderWeights::init_random(&cfg(&v), 7, Role::DualEncoder).unwrap();
        assert!(ce_score(&de, &v, "red", "dog", 16).is_err());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let v = vocab();
        let w = EncoderWeights::<f32>::init_random(&cfg(&v), 8, Role::DualEncoder).unwrap();
        let mut enc = encode_single("red", &v, 8).unwrap();
        enc.ids[1] = 999;
        assert!(matches!(forward(&w, &enc, false), Err(Error::Validation(_))));
        let long = encode_single("red", &v, 33).unwrap();
        assert!(matches!(forward(&w, &long, false), Err(Error::Validation(_))));
    }
}
