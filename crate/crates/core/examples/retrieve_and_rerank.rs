//! Exact cosine retrieval from an embedding index followed by reranking of
//! the candidates with a small cross encoder trained on BM25 and random
//! negatives.

use std::collections::HashMap;

use ceinfuse::bm25::{mine_hard_negatives, Bm25Index, MiningParams, MiningQuery};
use ceinfuse::data::{build_vocab, synth_data, SynthSpec};
use ceinfuse::eval::{evaluate, EvalOptions};
use ceinfuse::model::{EmbedMode, EmbedOptions, EncoderWeights, ModelConfig, Role, SentenceEncoder};
use ceinfuse::pipeline::{train_cross_encoder, CeSchedule};
use ceinfuse::retrieval::{build_index, rerank, CrossEncoderScorer, LayerEmbedder, Provenance};
use ceinfuse::training::TrainConfig;

fn main() -> ceinfuse::Result<()> {
    let data = synth_data(&SynthSpec {
        corpus_size: 500,
        num_queries: 50,
        num_train_queries: 3000,
        ..SynthSpec::default()
    })?;
    let ds = data.dataset("synthetic");
    let docs: Vec<&str> = ds.docs.iter().map(String::as_str).collect();
    let vocab = build_vocab(&docs, 4096)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let de = EncoderWeights::init_random(&config.with_layers(2), 0, Role::DualEncoder)?;

    let doc_index: HashMap<&str, usize> = ds.doc_ids.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
    let train: Vec<MiningQuery> = data
        .train_queries
        .iter()
        .map(|q| {
            let positive_ids: Vec<usize> = data.train_qrels.relevant(&q.id).into_iter().flatten().map(|d| doc_index[d.as_str()]).collect();
            MiningQuery {
                query: q.text.clone(),
                positive: ds.docs[positive_ids[0]].clone(),
                positive_ids,
            }
        })
        .collect();
    let examples = mine_hard_negatives(&Bm25Index::build(&docs)?, &docs, &train, MiningParams::default())?;
    let ce_config = ModelConfig {
        num_layers: 2,
        init_std: 0.125,
        ..config.clone()
    };
    let tc = TrainConfig {
        batch_size: 32,
        learning_rate: 3e-4,
        epochs: 3,
        ..TrainConfig::default()
    };
    let (ce, _, curve) = train_cross_encoder(&ce_config, &vocab, &examples, &train, &ds.docs, &CeSchedule::default(), &tc)?;
    println!("cross encoder trained, final loss {:.3}", curve.last().map_or(f64::NAN, |p| p.loss));

    // Layer 0 of an untrained encoder is a bag of token embeddings: a
    // reasonable lexical retriever without any training.
    let encoder = SentenceEncoder::new(&de, &vocab, EmbedMode::Single, EmbedOptions::default());
    let embedder = LayerEmbedder { encoder, layer: 0 };
    let index = build_index(&ds.doc_ids, &docs, &embedder, Provenance {
        model: "DE-2".into(),
        layer: 0,
        pooling: "mean".into(),
    })?;
    let queries: Vec<&str> = ds.queries.iter().map(String::as_str).collect();
    let q_emb: Vec<Vec<f32>> = encoder.embed_batch(&queries, 0)?.into_iter().collect::<ceinfuse::Result<_>>()?;
    let retrieved = index.search_many(&q_emb, 20)?;

    let scorer = CrossEncoderScorer::new(&ce, &vocab, 64)?;
    let text = |d: usize| ds.docs[d].clone();
    let reranked = queries
        .iter()
        .zip(&retrieved)
        .map(|(q, r)| rerank(q, r, &text, &scorer, 20))
        .collect::<ceinfuse::Result<Vec<_>>>()?;

    let ranks = |rs: &[ceinfuse::retrieval::SearchResult]| -> Vec<(String, Vec<String>)> {
        ds.query_ids
            .iter()
            .zip(rs)
            .map(|(q, r)| (q.clone(), r.docs().iter().map(|&d| index.id(d).to_string()).collect()))
            .collect()
    };
    for (name, rs) in [("retrieve", &retrieved), ("retrieve+rerank", &reranked)] {
        let m = evaluate(&ranks(rs), &ds.qrels, 10, EvalOptions::default())?;
        println!("{name:<16} Hits@10 {:.3}  MRR@10 {:.3}", m.hits, m.mrr);
    }
    Ok(())
}
