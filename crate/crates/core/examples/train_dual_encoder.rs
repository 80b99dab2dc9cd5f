//! Contrastive (MNRL) training of a small dual encoder on synthetic data with
//! BM25 hard negatives, comparing retrieval before and after.

use ceinfuse::bm25::{mine_hard_negatives, Bm25Index, MiningParams, MiningQuery};
use ceinfuse::data::{build_vocab, synth_data, SynthSpec};
use ceinfuse::eval::layer_sweep;
use ceinfuse::model::{EmbedMode, EmbedOptions, EncoderWeights, ModelConfig, Role, SentenceEncoder};
use ceinfuse::training::{train, TrainConfig, TrainData};

fn main() -> ceinfuse::Result<()> {
    let spec = SynthSpec {
        topics: 30,
        corpus_size: 600,
        num_queries: 100,
        num_train_queries: 600,
        ..SynthSpec::default()
    };
    let data = synth_data(&spec)?;
    let docs: Vec<&str> = data.corpus.iter().map(|r| r.text.as_str()).collect();
    let vocab = build_vocab(&docs, 2048)?;

    let index = Bm25Index::build(&docs)?;
    let by_id: std::collections::HashMap<&str, usize> =
        data.corpus.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let queries: Vec<MiningQuery> = data
        .train_queries
        .iter()
        .zip(&data.pairs)
        .map(|(q, (_, pos))| MiningQuery {
            query: q.text.clone(),
            positive: pos.clone(),
            positive_ids: data.train_qrels.relevant(&q.id).into_iter().flatten().map(|d| by_id[d.as_str()]).collect(),
        })
        .collect();
    let examples = mine_hard_negatives(&index, &docs, &queries, MiningParams { n_neg: 2, ..MiningParams::default() })?;

    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    }
    .with_layers(2);
    let mut w = EncoderWeights::init_random(&config, 0, Role::DualEncoder)?;
    let eval = data.dataset("synthetic");
    let hits = |w: &EncoderWeights<f32>| -> ceinfuse::Result<f64> {
        let enc = SentenceEncoder::new(w, &vocab, EmbedMode::Single, EmbedOptions::default());
        Ok(layer_sweep(&enc, &eval, 10)?.last().unwrap().hits)
    };
    println!("Hits@10 before training: {:.3}", hits(&w)?);

    let tc = TrainConfig {
        negatives_per_example: 2,
        learning_rate: 1e-3,
        epochs: 2,
        ..TrainConfig::default()
    };
    let curve = train(&mut w, &vocab, &TrainData::Mnrl(examples), &tc)?;
    for p in curve.iter().step_by(curve.len().div_ceil(8)) {
        println!("step {:>4}  loss {:.4}  lr {:.2e}", p.step, p.loss, p.lr);
    }
    println!("Hits@10 after training:  {:.3}", hits(&w)?);
    Ok(())
}
