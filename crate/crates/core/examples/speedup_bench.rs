//! Single-threaded embedding throughput of a 12-layer encoder against its
//! 2-layer truncation on the same corpus.

use ceinfuse::bench::{speedup, time_embedding};
use ceinfuse::checkpoint::infuse;
use ceinfuse::data::{build_vocab, synth_data, SynthSpec};
use ceinfuse::model::{EmbedMode, EmbedOptions, EncoderWeights, ModelConfig, Role, SentenceEncoder};

fn main() -> ceinfuse::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let data = synth_data(&SynthSpec {
        corpus_size: n,
        num_queries: 1,
        num_train_queries: 0,
        ..SynthSpec::default()
    })?;
    let corpus: Vec<&str> = data.corpus.iter().map(|r| r.text.as_str()).collect();
    let vocab = build_vocab(&corpus, 4096)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    }
    .with_layers(12);
    let deep = EncoderWeights::init_random(&config, 0, Role::DualEncoder)?;
    let shallow = infuse(&deep, 2, 2, 0)?;

    let opts = EmbedOptions::default();
    let a = time_embedding("DE-12", &SentenceEncoder::new(&deep, &vocab, EmbedMode::Single, opts), &corpus, 5)?;
    let b = time_embedding("DE-2", &SentenceEncoder::new(&shallow, &vocab, EmbedMode::Single, opts), &corpus, 5)?;
    for r in [&a, &b] {
        println!("{:<6} median {:.3}s  {:.0} sentences/s", r.model, r.median_seconds, r.sentences_per_sec);
    }
    println!("speedup {:.2}x", speedup(&a, &b)?);
    Ok(())
}
