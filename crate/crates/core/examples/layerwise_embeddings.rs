//! Sentence embeddings read out at every layer of a cross encoder via
//! self-pairing, compared with the single-sentence dual-encoder readout.

use ceinfuse::data::build_vocab;
use ceinfuse::model::{EmbedMode, EmbedOptions, EncoderWeights, ModelConfig, Role, SentenceEncoder};

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    dot / (na * nb)
}

fn main() -> ceinfuse::Result<()> {
    let sentences = [
        "red apples grow on tall trees",
        "green apples grow on short trees",
        "the train left the station late",
    ];
    let vocab = build_vocab(&sentences, 64)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        init_std: 0.1,
        ..ModelConfig::default()
    };
    let ce = EncoderWeights::init_random(&config, 7, Role::CrossEncoder)?;
    let opts = EmbedOptions::default();
    let self_pair = SentenceEncoder::new(&ce, &vocab, EmbedMode::SelfPair, opts);
    let single = SentenceEncoder::new(&ce, &vocab, EmbedMode::Single, opts);

    let all = self_pair.embed_batch_all_layers(&sentences)?;
    let all: Vec<Vec<Vec<f32>>> = all.into_iter().collect::<ceinfuse::Result<_>>()?;
    println!("layer  cos(s0,s1)  cos(s0,s2)  cos(self-pair, single)");
    for layer in 0..=self_pair.num_layers() {
        let s = single.embed(sentences[0], layer)?;
        println!(
            "{layer:>5}  {:>10.4}  {:>10.4}  {:>22.4}",
            cosine(&all[0][layer], &all[1][layer]),
            cosine(&all[0][layer], &all[2][layer]),
            cosine(&all[0][layer], &s)
        );
    }
    Ok(())
}
