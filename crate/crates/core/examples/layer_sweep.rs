//! Retrieval quality of every hidden-state layer of a cross encoder
//! (self-paired) against a dual encoder (single sentence), next to the
//! random-ranking baseline k/N.

use ceinfuse::data::{build_vocab, synth_data, SynthSpec};
use ceinfuse::eval::layer_sweep;
use ceinfuse::model::{EmbedMode, EmbedOptions, EncoderWeights, ModelConfig, Role, SentenceEncoder};

fn main() -> ceinfuse::Result<()> {
    let spec = SynthSpec {
        corpus_size: 1000,
        num_queries: 200,
        num_train_queries: 0,
        ..SynthSpec::default()
    };
    let data = synth_data(&spec)?;
    let texts: Vec<&str> = data.corpus.iter().map(|r| r.text.as_str()).collect();
    let vocab = build_vocab(&texts, 4096)?;
    let dataset = data.dataset("synthetic");
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let ce = EncoderWeights::init_random(&config, 1, Role::CrossEncoder)?;
    let de = EncoderWeights::init_random(&config, 2, Role::DualEncoder)?;
    let k = 10;
    let ce_rows = layer_sweep(&SentenceEncoder::new(&ce, &vocab, EmbedMode::SelfPair, EmbedOptions::default()), &dataset, k)?;
    let de_rows = layer_sweep(&SentenceEncoder::new(&de, &vocab, EmbedMode::Single, EmbedOptions::default()), &dataset, k)?;

    println!("random baseline Hits@{k}: {:.4}", k as f64 / dataset.docs.len() as f64);
    println!("layer  CE hits  CE mrr  DE hits  DE mrr");
    for (c, d) in ce_rows.iter().zip(&de_rows) {
        println!("{:>5}  {:>7.3}  {:>6.3}  {:>7.3}  {:>6.3}", c.layer, c.hits, c.mrr, d.hits, d.mrr);
    }
    Ok(())
}
