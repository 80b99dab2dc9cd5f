//! End-to-end experiment: data, cross-encoder training, layer sweeps,
//! infusion, dual-encoder training, retrieval, reranking, metrics,
//! significance tests and throughput.
//!
//! Every stage writes its artifacts under the run directory and a `.done`
//! marker; rerunning into the same directory skips finished stages.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::bench::{speedup, time_embedding, BenchResult};
use crate::bm25::{mine_hard_negatives, random_negatives, Bm25Index, MiningParams, MiningQuery};
use crate::checkpoint::{self, infuse};
use crate::data::{build_vocab, config_hash, load_dataset, read_jsonl, read_pairs, synth_data, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, layer_sweep, on_par, paired_t_test, write_report, write_significance, write_sweep, Dataset,
    EvalOptions, EvalReport, Qrels, ReportRow, SignificanceRow, SweepRow,
};
use crate::model::{EmbedMode, EmbedOptions, EncoderWeights, ModelConfig, Role, SentenceEncoder};
use crate::retrieval::{rerank, write_results_tsv, CachingScorer, CrossEncoderScorer, EmbeddingIndex, Provenance};
use crate::tokenizer::{load_vocab, Vocab};
use crate::training::{train, write_loss_curve, LabeledPair, LossPoint, TrainConfig, TrainData, TrainExample};

pub const BASELINE: &str = "Baseline";
pub const DE_RAND: &str = "DE-2 Rand";
pub const DE_CE: &str = "DE-2 CE";
pub const STAGE_RETRIEVE: &str = "retrieve";
pub const STAGE_RERANK: &str = "retrieve+rerank";

/// Where the datasets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Number of synthetic datasets; dataset `i` uses `synth.seed + i`.
    pub synthetic: usize,
    pub synth: SynthSpec,
    /// Directories holding `corpus.jsonl`, `queries.jsonl`, `qrels.tsv` and
    /// `pairs.tsv` (optionally `train_queries.jsonl` + `train_qrels.tsv`),
    /// used in addition to the synthetic sets.
    pub dirs: Vec<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: 3,
            synth: SynthSpec {
                num_train_queries: 10_000,
                ..SynthSpec::default()
            },
            dirs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub k_retrieve: usize,
    pub rerank_depth: usize,
    /// Queries used by the layer sweeps; all when unset.
    pub sweep_sample: Option<usize>,
    pub exclude_self: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            k_retrieve: 50,
            rerank_depth: 50,
            sweep_sample: None,
            exclude_self: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub enabled: bool,
    pub runs: usize,
    /// Leading corpus documents timed per model.
    pub corpus_size: usize,
    pub batch_size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            runs: 5,
            corpus_size: 1000,
            batch_size: 64,
        }
    }
}

/// Full experiment configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Parent of the run directory.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub vocab_size: usize,
    /// Cross-encoder architecture; `vocab_size` is filled from the vocabulary.
    pub model: ModelConfig,
    pub de_layers: usize,
    pub k_copy: usize,
    pub max_len: usize,
    pub mining: MiningParams,
    pub ce_schedule: CeSchedule,
    pub ce_train: TrainConfig,
    pub de_train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            vocab_size: 4096,
            model: ModelConfig {
                init_std: 0.125,
                ..ModelConfig::default()
            },
            de_layers: 2,
            k_copy: 1,
            max_len: 64,
            mining: MiningParams::default(),
            ce_schedule: CeSchedule::default(),
            ce_train: TrainConfig {
                batch_size: 32,
                learning_rate: 3e-4,
                epochs: 2,
                ..TrainConfig::default()
            },
            de_train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 1,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("pipeline config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.synthetic == 0 && self.data.dirs.is_empty() {
            return Err(Error::Config("no datasets configured".into()));
        }
        if self.data.synthetic > 0 {
            self.data.synth.validate()?;
        }
        for d in &self.data.dirs {
            if !d.is_dir() {
                return Err(Error::Config(format!("dataset directory {} does not exist", d.display())));
            }
        }
        if self.k_copy > self.de_layers || self.k_copy > self.model.num_layers {
            return Err(Error::Config("k_copy exceeds the available layers".into()));
        }
        if self.eval.k == 0 || self.eval.k_retrieve < self.eval.k {
            return Err(Error::Config("need 1 ≤ k ≤ k_retrieve".into()));
        }
        ModelConfig {
            vocab_size: self.vocab_size,
            ..self.model.clone()
        }
        .validate()
    }

    /// Hash of everything that influences results (output location excluded).
    pub fn hash(&self) -> String {
        config_hash(&PipelineConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        })
    }

    fn header(&self) -> Vec<String> {
        vec![format!("seed={} config={}", self.seed, self.hash())]
    }

    fn embed_options(&self) -> EmbedOptions {
        EmbedOptions {
            max_len: self.max_len,
            ..EmbedOptions::default()
        }
    }
}

/// Per-dataset outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetOutcome {
    pub name: String,
    pub rows: Vec<ReportRow>,
    pub ce_sweep: Vec<SweepRow>,
    pub baseline_sweep: Vec<SweepRow>,
    pub bench: Vec<BenchResult>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub run_dir: PathBuf,
    pub report: EvalReport,
    pub datasets: Vec<DatasetOutcome>,
}

/// `run-<unix seconds>-seed<seed>` under the configured output directory.
pub fn default_run_dir(config: &PipelineConfig) -> PathBuf {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    config.output_dir.join(format!("run-{secs}-seed{}", config.seed))
}

fn stage<T>(name: &str, artifacts: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = std::time::Instant::now();
    let out = f();
    log::info!("{name}: {:.1}s", start.elapsed().as_secs_f64());
    out.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name.to_string(),
            artifacts: artifacts.display().to_string(),
            source: Box::new(e),
        },
    })
}

fn done_marker(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!(".{name}.done"))
}

fn is_done(dir: &Path, name: &str) -> bool {
    done_marker(dir, name).exists()
}

fn mark_done(dir: &Path, name: &str) -> Result<()> {
    let p = done_marker(dir, name);
    std::fs::write(&p, b"").map_err(|e| Error::io(&p, e))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Training inputs of one dataset.
struct TrainingSet {
    pairs: Vec<(String, String)>,
    /// Corpus indices relevant to each training pair, for negative exclusion.
    positive_ids: Vec<Vec<usize>>,
}

fn training_set(dir: &Path, dataset: &Dataset) -> Result<TrainingSet> {
    let pairs = read_pairs(dir.join("pairs.tsv"))?;
    let by_id: std::collections::HashMap<&str, usize> =
        dataset.doc_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let tq = dir.join("train_queries.jsonl");
    let tr = dir.join("train_qrels.tsv");
    let positive_ids = if tq.exists() && tr.exists() {
        let queries = read_jsonl(&tq)?;
        let qrels = Qrels::load(&tr)?;
        if queries.len() != pairs.len() {
            return Err(Error::Validation("train_queries.jsonl and pairs.tsv differ in length".into()));
        }
        queries
            .iter()
            .map(|q| {
                qrels
                    .relevant(&q.id)
                    .map(|s| s.iter().filter_map(|d| by_id.get(d.as_str()).copied()).collect())
                    .unwrap_or_default()
            })
            .collect()
    } else {
        let by_text: std::collections::HashMap<&str, usize> =
            dataset.docs.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        pairs.iter().map(|(_, p)| by_text.get(p.as_str()).copied().into_iter().collect()).collect()
    };
    Ok(TrainingSet { pairs, positive_ids })
}

pub fn save_examples(path: &Path, examples: &[TrainExample]) -> Result<()> {
    let mut out = Vec::new();
    for e in examples {
        serde_json::to_writer(&mut out, e).expect("examples serialize");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_examples(path: &Path) -> Result<Vec<TrainExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Training queries of a dataset with their positives; queries without a
/// judged positive in the corpus are dropped.
pub fn mining_queries(data_dir: &Path, dataset: &Dataset) -> Result<Vec<MiningQuery>> {
    let tset = training_set(data_dir, dataset)?;
    Ok(tset
        .pairs
        .into_iter()
        .zip(tset.positive_ids)
        .map(|((query, positive), positive_ids)| MiningQuery {
            query,
            positive,
            positive_ids,
        })
        .filter(|m| !m.positive_ids.is_empty())
        .collect())
}

/// Reads the training pairs next to a dataset and mines BM25 hard negatives
/// for each, excluding every document judged relevant to the query.
pub fn mine_training_examples(data_dir: &Path, dataset: &Dataset, params: MiningParams) -> Result<Vec<TrainExample>> {
    let queries = mining_queries(data_dir, dataset)?;
    let index = Bm25Index::build(&dataset.docs)?;
    mine_hard_negatives(&index, &dataset.docs, &queries, params)
}

/// Vocabulary over the corpus and the training queries.
pub fn dataset_vocab(data_dir: &Path, dataset: &Dataset, size: usize) -> Result<Vocab> {
    let tset = training_set(data_dir, dataset)?;
    let mut texts: Vec<&str> = dataset.docs.iter().map(String::as_str).collect();
    texts.extend(tset.pairs.iter().map(|(q, _)| q.as_str()));
    build_vocab(&texts, size)
}

/// Positive and negatives of each example as binary cross-encoder pairs.
pub fn ce_pairs(examples: &[TrainExample]) -> Vec<LabeledPair> {
    let mut out = Vec::new();
    for e in examples {
        out.push(LabeledPair {
            query: e.query.clone(),
            doc: e.positive.clone(),
            label: 1.0,
        });
        for n in &e.negatives {
            out.push(LabeledPair {
                query: e.query.clone(),
                doc: n.clone(),
                label: 0.0,
            });
        }
    }
    out
}

/// Cross-encoder training schedule.
///
/// A from-scratch cross encoder first has to discover that relevance means
/// query tokens reappearing in the document. BM25 negatives share words with
/// the query by construction, so on them alone that signal is too weak to
/// get started. Training therefore opens with a matching phase against
/// random negatives only, then continues on a mix of BM25 and random
/// negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CeSchedule {
    /// Tie query/key projections and zero position/segment tables at init.
    pub content_init: bool,
    /// Steps of the random-negative phase (0 skips it).
    pub matching_steps: usize,
    pub matching_negatives: usize,
    /// Negatives per query in the main phase.
    pub hard_negatives: usize,
    pub random_negatives: usize,
}

impl Default for CeSchedule {
    fn default() -> Self {
        Self {
            content_init: true,
            matching_steps: 1500,
            matching_negatives: 2,
            hard_negatives: 1,
            random_negatives: 1,
        }
    }
}

/// Examples for the two cross-encoder phases: random negatives only, and
/// the first `hard_negatives` mined negatives plus fresh random ones.
pub fn ce_phase_examples(
    examples: &[TrainExample],
    queries: &[MiningQuery],
    corpus: &[String],
    schedule: &CeSchedule,
    seed: u64,
) -> Result<(Vec<TrainExample>, Vec<TrainExample>)> {
    if examples.len() != queries.len() {
        return Err(Error::Validation(format!(
            "{} mined examples for {} training queries",
            examples.len(),
            queries.len()
        )));
    }
    let easy = random_negatives(corpus, queries, schedule.matching_negatives, seed)?;
    let extra = random_negatives(corpus, queries, schedule.random_negatives, seed.wrapping_add(1 << 32))?;
    let matching = examples
        .iter()
        .zip(easy)
        .map(|(e, negatives)| TrainExample {
            negatives,
            ..e.clone()
        })
        .collect();
    let main = examples
        .iter()
        .zip(extra)
        .map(|(e, rand)| {
            let mut negatives: Vec<String> = e.negatives.iter().take(schedule.hard_negatives).cloned().collect();
            negatives.extend(rand);
            TrainExample {
                negatives,
                ..e.clone()
            }
        })
        .collect();
    Ok((matching, main))
}

/// Trains a cross encoder from scratch under `schedule`, seeded by
/// `train.seed`. Returns the weights and the loss curves of the matching
/// (possibly empty) and main phases.
pub fn train_cross_encoder(
    model: &ModelConfig,
    vocab: &Vocab,
    examples: &[TrainExample],
    queries: &[MiningQuery],
    corpus: &[String],
    schedule: &CeSchedule,
    train_config: &TrainConfig,
) -> Result<(EncoderWeights<f32>, Vec<LossPoint>, Vec<LossPoint>)> {
    let seed = train_config.seed;
    let (matching, main) = ce_phase_examples(examples, queries, corpus, schedule, seed)?;
    let mut w = EncoderWeights::init_random(model, seed, Role::CrossEncoder)?;
    if schedule.content_init {
        w.content_attention_init();
    }
    let mut matching_curve = Vec::new();
    if schedule.matching_steps > 0 {
        let phase = TrainConfig {
            epochs: 0,
            max_steps: Some(schedule.matching_steps),
            ..train_config.clone()
        };
        matching_curve = train(&mut w, vocab, &TrainData::CeBinary(ce_pairs(&matching)), &phase)?;
    }
    let main_curve = train(&mut w, vocab, &TrainData::CeBinary(ce_pairs(&main)), train_config)?;
    Ok((w, matching_curve, main_curve))
}

fn train_or_load(
    dir: &Path,
    name: &str,
    vocab: &Vocab,
    vocab_path: &Path,
    data: &TrainData,
    config: &TrainConfig,
    header: &[String],
    init: impl FnOnce() -> Result<EncoderWeights<f32>>,
) -> Result<EncoderWeights<f32>> {
    let ckpt = dir.join(format!("{name}.ntc"));
    if is_done(dir, name) {
        return Ok(checkpoint::load(&ckpt)?.0);
    }
    let mut w = init()?;
    let curve = train(&mut w, vocab, data, config)?;
    write_loss_curve(dir.join(format!("{name}_loss.csv")), &curve, header)?;
    checkpoint::save(&w, &ckpt, Some(vocab_path))?;
    mark_done(dir, name)?;
    Ok(w)
}

fn rankings_for(index: &EmbeddingIndex, query_ids: &[String], results: &[crate::retrieval::SearchResult]) -> Vec<(String, Vec<String>)> {
    query_ids
        .iter()
        .zip(results)
        .map(|(q, r)| (q.clone(), r.docs().iter().map(|&d| index.id(d).to_string()).collect()))
        .collect()
}

/// Runs every stage for one dataset directory.
fn run_dataset(config: &PipelineConfig, name: &str, data_dir: &Path, dir: &Path, seed: u64) -> Result<DatasetOutcome> {
    let header = config.header();
    let dataset = stage("load-data", data_dir, || load_dataset(data_dir, name))?;

    let vocab_path = dir.join("vocab.txt");
    let vocab = stage("build-vocab", &vocab_path, || {
        if !is_done(dir, "vocab") {
            dataset_vocab(data_dir, &dataset, config.vocab_size)?.save(&vocab_path)?;
            mark_done(dir, "vocab")?;
        }
        load_vocab(&vocab_path)
    })?;

    let negatives_path = dir.join("train_negatives.jsonl");
    let examples = stage("mine-negatives", &negatives_path, || {
        if is_done(dir, "mining") {
            return load_examples(&negatives_path);
        }
        let params = MiningParams {
            seed,
            ..config.mining
        };
        let examples = mine_training_examples(data_dir, &dataset, params)?;
        save_examples(&negatives_path, &examples)?;
        mark_done(dir, "mining")?;
        Ok(examples)
    })?;

    let ce_config = ModelConfig {
        vocab_size: vocab.len(),
        ..config.model.clone()
    };
    let ce = stage("train-ce", &dir.join("ce.ntc"), || {
        let ckpt = dir.join("ce.ntc");
        if is_done(dir, "ce") {
            return Ok(checkpoint::load(&ckpt)?.0);
        }
        let queries = mining_queries(data_dir, &dataset)?;
        let tc = TrainConfig {
            seed,
            max_len: config.max_len,
            ..config.ce_train.clone()
        };
        let (w, matching, main) =
            train_cross_encoder(&ce_config, &vocab, &examples, &queries, &dataset.docs, &config.ce_schedule, &tc)?;
        if !matching.is_empty() {
            write_loss_curve(dir.join("ce_matching_loss.csv"), &matching, &header)?;
        }
        write_loss_curve(dir.join("ce_loss.csv"), &main, &header)?;
        checkpoint::save(&w, &ckpt, Some(&vocab_path))?;
        mark_done(dir, "ce")?;
        Ok(w)
    })?;

    let de_tc = TrainConfig {
        seed,
        max_len: config.max_len,
        ..config.de_train.clone()
    };
    let mnrl = TrainData::Mnrl(examples.clone());
    let baseline = stage("train-baseline", &dir.join("baseline.ntc"), || {
        train_or_load(dir, "baseline", &vocab, &vocab_path, &mnrl, &de_tc, &header, || {
            EncoderWeights::init_random(&ce_config, seed.wrapping_add(1), Role::DualEncoder)
        })
    })?;

    let opts = config.embed_options();
    let sweep_data = dataset.with_query_sample(config.eval.sweep_sample);
    let ce_sweep_path = dir.join("sweep_ce.csv");
    let (ce_sweep, baseline_sweep) = stage("sweep-layers", &ce_sweep_path, || {
        let ce_enc = SentenceEncoder::new(&ce, &vocab, EmbedMode::SelfPair, opts);
        let de_enc = SentenceEncoder::new(&baseline, &vocab, EmbedMode::Single, opts);
        let a = layer_sweep(&ce_enc, &sweep_data, config.eval.k)?;
        let b = layer_sweep(&de_enc, &sweep_data, config.eval.k)?;
        write_sweep(&a, config.eval.k, &ce_sweep_path, &header)?;
        write_sweep(&b, config.eval.k, dir.join("sweep_baseline.csv"), &header)?;
        Ok((a, b))
    })?;

    let de_ce = stage("train-de-2-ce", &dir.join("de2_ce.ntc"), || {
        train_or_load(dir, "de2_ce", &vocab, &vocab_path, &mnrl, &de_tc, &header, || {
            infuse(&ce, config.de_layers, config.k_copy, seed.wrapping_add(2))
        })
    })?;
    let de_rand = stage("train-de-2-rand", &dir.join("de2_rand.ntc"), || {
        train_or_load(dir, "de2_rand", &vocab, &vocab_path, &mnrl, &de_tc, &header, || {
            EncoderWeights::init_random(&ce_config.with_layers(config.de_layers), seed.wrapping_add(2), Role::DualEncoder)
        })
    })?;

    let models: [(&str, &str, &EncoderWeights<f32>); 3] =
        [(BASELINE, "baseline", &baseline), (DE_RAND, "de2_rand", &de_rand), (DE_CE, "de2_ce", &de_ce)];
    let eval_opts = EvalOptions {
        exclude_self: config.eval.exclude_self,
    };
    let scorer = CachingScorer::new(CrossEncoderScorer::new(&ce, &vocab, config.max_len)?);
    let mut rows = Vec::new();
    for (label, file, weights) in models {
        let results_path = dir.join(format!("results_{file}.tsv"));
        stage("retrieve-rerank", &results_path, || {
            let enc = SentenceEncoder::new(weights, &vocab, EmbedMode::Single, opts);
            let layer = weights.layers.len();
            let doc_refs: Vec<&str> = dataset.docs.iter().map(String::as_str).collect();
            let index = crate::retrieval::build_index(
                &dataset.doc_ids,
                &doc_refs,
                &crate::retrieval::LayerEmbedder { encoder: enc, layer },
                Provenance {
                    model: label.to_string(),
                    layer,
                    pooling: "mean".into(),
                },
            )?;
            let query_refs: Vec<&str> = dataset.queries.iter().map(String::as_str).collect();
            let q_emb = enc
                .embed_batch(&query_refs, layer)?
                .into_iter()
                .zip(&dataset.query_ids)
                .map(|(r, id)| r.map_err(|e| Error::Validation(format!("failed to embed query {id}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let retrieved = index.search_many(&q_emb, config.eval.k_retrieve)?;
            let text = |d: usize| dataset.docs[d].clone();
            let reranked = dataset
                .queries
                .iter()
                .zip(&retrieved)
                .map(|(q, r)| rerank(q, r, &text, &scorer, config.eval.rerank_depth))
                .collect::<Result<Vec<_>>>()?;

            let labeled = |rs: &[crate::retrieval::SearchResult]| -> Vec<(String, crate::retrieval::SearchResult)> {
                dataset.query_ids.iter().cloned().zip(rs.iter().cloned()).collect()
            };
            write_results_tsv(&results_path, &index, &labeled(&retrieved))?;
            write_results_tsv(dir.join(format!("results_{file}_reranked.tsv")), &index, &labeled(&reranked))?;
            for (stage_name, rs) in [(STAGE_RETRIEVE, &retrieved), (STAGE_RERANK, &reranked)] {
                let m = evaluate(&rankings_for(&index, &dataset.query_ids, rs), &dataset.qrels, config.eval.k, eval_opts)?;
                rows.push(ReportRow {
                    dataset: name.to_string(),
                    model: label.to_string(),
                    stage: stage_name.to_string(),
                    layer,
                    hits: m.hits,
                    mrr: m.mrr,
                    speedup: None,
                });
            }
            Ok(())
        })?;
    }

    let mut bench = Vec::new();
    if config.bench.enabled {
        stage("bench", &dir.join("bench.csv"), || {
            let n = config.bench.corpus_size.min(dataset.docs.len());
            let corpus: Vec<&str> = dataset.docs[..n].iter().map(String::as_str).collect();
            let bopts = EmbedOptions {
                batch_size: config.bench.batch_size,
                ..opts
            };
            for (label, _, weights) in models {
                let enc = SentenceEncoder::new(weights, &vocab, EmbedMode::Single, bopts);
                bench.push(time_embedding(label, &enc, &corpus, config.bench.runs)?);
            }
            for row in rows.iter_mut() {
                let base = &bench[0];
                let me = bench.iter().find(|b| b.model == row.model).expect("every model is timed");
                row.speedup = Some(speedup(base, me)?);
            }
            write_bench(&dir.join("bench.csv"), &bench, &header)
        })?;
    }

    Ok(DatasetOutcome {
        name: name.to_string(),
        rows,
        ce_sweep,
        baseline_sweep,
        bench,
    })
}

fn write_bench(path: &Path, results: &[BenchResult], header: &[String]) -> Result<()> {
    use std::io::Write;
    let mut out = Vec::new();
    for h in header {
        writeln!(out, "# {h}").unwrap();
    }
    writeln!(out, "model,corpus_size,batch_size,threads,median_seconds,sentences_per_sec,runs").unwrap();
    for b in results {
        let runs: Vec<String> = b.run_seconds.iter().map(|s| format!("{s:.6}")).collect();
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.2},{}",
            b.model,
            b.corpus_size,
            b.batch_size,
            b.threads,
            b.median_seconds,
            b.sentences_per_sec,
            runs.join(" ")
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Paired t-tests across datasets for the comparisons of interest.
pub fn significance(rows: &[ReportRow], datasets: &[String]) -> Vec<SignificanceRow> {
    let mut out = Vec::new();
    for (a, b) in [(DE_CE, DE_RAND), (DE_CE, BASELINE)] {
        for stage in [STAGE_RETRIEVE, STAGE_RERANK] {
            for metric in ["hits", "mrr"] {
                let pick = |model: &str| -> Option<Vec<f64>> {
                    datasets
                        .iter()
                        .map(|d| {
                            rows.iter()
                                .find(|r| &r.dataset == d && r.model == model && r.stage == stage)
                                .map(|r| if metric == "hits" { r.hits } else { r.mrr })
                        })
                        .collect()
                };
                let (Some(va), Some(vb)) = (pick(a), pick(b)) else { continue };
                match paired_t_test(&va, &vb) {
                    Ok(t) => out.push(SignificanceRow {
                        comparison: format!("{a} vs {b}"),
                        stage: stage.to_string(),
                        metric: metric.to_string(),
                        t: t.t,
                        p: t.p,
                        n: t.n,
                    }),
                    Err(e) => log::warn!("t-test {a} vs {b} ({stage}, {metric}) skipped: {e}"),
                }
            }
        }
    }
    out
}

fn write_parity(path: &Path, rows: &[ReportRow], header: &[String]) -> Result<()> {
    use std::io::Write;
    let mut out = Vec::new();
    for h in header {
        writeln!(out, "# {h}").unwrap();
    }
    writeln!(out, "dataset,stage,model,hits,baseline_hits,within_0.01,within_1pct").unwrap();
    for r in rows.iter().filter(|r| r.model != BASELINE) {
        if let Some(base) = rows
            .iter()
            .find(|b| b.dataset == r.dataset && b.stage == r.stage && b.model == BASELINE)
        {
            let (abs, rel) = on_par(r.hits, base.hits);
            writeln!(out, "{},{},{},{},{},{abs},{rel}", r.dataset, r.stage, r.model, r.hits, base.hits).unwrap();
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Runs the whole experiment into `run_dir` (created if missing).
pub fn run_pipeline(config: &PipelineConfig, run_dir: &Path) -> Result<PipelineOutcome> {
    config.validate()?;
    mkdir(run_dir)?;
    let header = config.header();
    let cfg_path = run_dir.join("config.toml");
    std::fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    let mut sources: Vec<(String, PathBuf, u64)> = Vec::new();
    for i in 0..config.data.synthetic {
        let name = format!("synth-{i}");
        let dir = run_dir.join(&name).join("data");
        let seed = config.data.synth.seed.wrapping_add(i as u64);
        stage("synth-data", &dir, || {
            if !is_done(&dir, "synth") {
                let spec = SynthSpec {
                    seed,
                    ..config.data.synth.clone()
                };
                synth_data(&spec)?.write(&dir, &header)?;
                mark_done(&dir, "synth")?;
            }
            Ok(())
        })?;
        sources.push((name, dir, config.seed.wrapping_add(i as u64)));
    }
    for (i, d) in config.data.dirs.iter().enumerate() {
        let name = d
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("data-{i}"));
        sources.push((name, d.clone(), config.seed.wrapping_add((config.data.synthetic + i) as u64)));
    }

    let mut outcomes = Vec::new();
    for (name, data_dir, seed) in &sources {
        let dir = run_dir.join(name);
        mkdir(&dir)?;
        log::info!("dataset {name}");
        outcomes.push(run_dataset(config, name, data_dir, &dir, *seed)?);
    }

    let mut report = EvalReport::new(config.eval.k);
    for o in &outcomes {
        report.rows.extend(o.rows.iter().cloned());
    }
    let names: Vec<String> = outcomes.iter().map(|o| o.name.clone()).collect();
    report.significance = significance(&report.rows, &names);

    stage("report", run_dir, || {
        let deterministic = EvalReport {
            rows: report
                .rows
                .iter()
                .map(|r| ReportRow {
                    speedup: None,
                    ..r.clone()
                })
                .collect(),
            ..report.clone()
        };
        write_report(&deterministic, run_dir.join("metrics.csv"), &header)?;
        write_report(&report, run_dir.join("report.csv"), &header)?;
        write_significance(&report.significance, run_dir.join("significance.csv"), &header)?;
        write_parity(&run_dir.join("parity.csv"), &report.rows, &header)
    })?;

    Ok(PipelineOutcome {
        run_dir: run_dir.to_path_buf(),
        report,
        datasets: outcomes,
    })
}

/// Files whose contents depend on wall-clock time.
pub fn is_timing_file(path: &Path) -> bool {
    matches!(
        path.file_name().and_then(|n| n.to_str()),
        Some("bench.csv") | Some("report.csv")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(dataset: &str, model: &str, stage: &str, hits: f64) -> ReportRow {
        ReportRow {
            dataset: dataset.into(),
            model: model.into(),
            stage: stage.into(),
            layer: 2,
            hits,
            mrr: hits / 2.0,
            speedup: None,
        }
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        c.validate().unwrap();
        let partial = PipelineConfig::from_toml("seed = 9\n[ce_schedule]\nmatching_steps = 0\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.ce_schedule.matching_steps, 0);
        assert_eq!(partial.ce_schedule.hard_negatives, 1);
        let bad = PipelineConfig {
            k_copy: 3,
            ..PipelineConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(PipelineConfig::from_toml("seed = \"x\"").is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = PipelineConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn phase_examples_mix_hard_and_random_negatives() {
        let corpus: Vec<String> = (0..20).map(|i| format!("doc {i}")).collect();
        let queries: Vec<MiningQuery> = (0..3)
            .map(|i| MiningQuery {
                query: format!("q{i}"),
                positive: corpus[i].clone(),
                positive_ids: vec![i],
            })
            .collect();
        let examples: Vec<TrainExample> = queries
            .iter()
            .map(|q| TrainExample {
                negatives: vec!["hard a".into(), "hard b".into()],
                ..TrainExample::new(q.query.clone(), q.positive.clone())
            })
            .collect();
        let schedule = CeSchedule::default();
        let (matching, main) = ce_phase_examples(&examples, &queries, &corpus, &schedule, 4).unwrap();
        for (i, (m, x)) in matching.iter().zip(&main).enumerate() {
            assert_eq!(m.negatives.len(), schedule.matching_negatives);
            assert!(m.negatives.iter().all(|n| n.starts_with("doc") && *n != corpus[i]));
            assert_eq!(x.negatives.len(), schedule.hard_negatives + schedule.random_negatives);
            assert_eq!(x.negatives[0], "hard a");
            assert!(x.negatives[1].starts_with("doc"));
        }
        let pairs = ce_pairs(&main);
        assert_eq!(pairs.len(), 3 * 3);
        assert_eq!(pairs.iter().filter(|p| p.label == 1.0).count(), 3);
        assert!(ce_phase_examples(&examples[..2], &queries, &corpus, &schedule, 4).is_err());
    }

    #[test]
    fn significance_pairs_datasets() {
        let datasets: Vec<String> = (0..3).map(|i| format!("d{i}")).collect();
        let mut rows = Vec::new();
        for (i, d) in datasets.iter().enumerate() {
            for stage in [STAGE_RETRIEVE, STAGE_RERANK] {
                rows.push(row(d, BASELINE, stage, 0.3));
                rows.push(row(d, DE_RAND, stage, 0.4 + 0.01 * i as f64));
                rows.push(row(d, DE_CE, stage, 0.5 + 0.03 * i as f64));
            }
        }
        let sig = significance(&rows, &datasets);
        assert_eq!(sig.len(), 2 * 2 * 2);
        assert!(sig.iter().all(|s| s.n == 3 && s.t > 0.0 && (0.0..=1.0).contains(&s.p)));
        assert!(significance(&rows, &datasets[..1]).is_empty());
    }

    #[test]
    fn timing_files() {
        assert!(is_timing_file(Path::new("run/synth-0/bench.csv")));
        assert!(is_timing_file(Path::new("report.csv")));
        assert!(!is_timing_file(Path::new("metrics.csv")));
    }
}
