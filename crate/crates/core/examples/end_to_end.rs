//! The whole experiment on a small synthetic setup: data, cross-encoder
//! training, layer sweeps, infusion, dual-encoder training, retrieval,
//! reranking, significance tests and throughput.
//!
//! The built-in setup is sized to finish in a few minutes. Its cross encoder
//! sees only 1,000 training queries, too few to become a useful reranker, so
//! the interesting rows here are the retrieve ones. The default
//! configuration (`ceinfuse run-pipeline`, about 30 minutes on one core)
//! trains the cross encoder on 10,000 queries, and there reranking helps.
//!
//! Pass a TOML file to override the configuration, e.g.
//! `cargo run --release --example end_to_end -- pipeline.toml`.

use ceinfuse::data::SynthSpec;
use ceinfuse::pipeline::{run_pipeline, PipelineConfig};

fn main() -> ceinfuse::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = match std::env::args().nth(1) {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let mut c = PipelineConfig::default();
            c.data.synth = SynthSpec {
                corpus_size: 1000,
                num_queries: 100,
                num_train_queries: 1000,
                ..SynthSpec::default()
            };
            c.bench.corpus_size = 200;
            c
        }
    };
    let run_dir = std::env::temp_dir().join(format!("ceinfuse-e2e-seed{}", config.seed));
    let out = run_pipeline(&config, &run_dir)?;
    println!("{:<10} {:<10} {:<16} {:>6} {:>8}", "dataset", "model", "stage", "hits", "mrr");
    for r in &out.report.rows {
        println!("{:<10} {:<10} {:<16} {:>6.3} {:>8.3}", r.dataset, r.model, r.stage, r.hits, r.mrr);
    }
    for s in &out.report.significance {
        println!("{} [{} {}]: t={:.3} p={:.3} n={}", s.comparison, s.stage, s.metric, s.t, s.p, s.n);
    }
    println!("artifacts: {}", out.run_dir.display());
    Ok(())
}
