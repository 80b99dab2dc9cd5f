//! Command-line front end. Each subcommand wraps one library stage;
//! `run-pipeline` runs them all.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 a stage failed.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{speedup, time_embedding};
use crate::bm25::MiningParams;
use crate::checkpoint::{self, infuse, verify_infusion};
use crate::data::{load_dataset, synth_data, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, layer_sweep, write_sweep, EvalOptions, Qrels};
use crate::model::{EmbedMode, EmbedOptions, EncoderWeights, ModelConfig, Role, SentenceEncoder};
use crate::pipeline::{self, load_examples, CeSchedule, PipelineConfig};
use crate::retrieval::{
    build_index, read_results_tsv, rerank, write_results_tsv, CrossEncoderScorer, EmbeddingIndex, Hit,
    LayerEmbedder, Provenance, SearchResult, Stage,
};
use crate::tokenizer::{load_vocab, Vocab};
use crate::training::{
    model_grad_check, small_config, train, write_loss_curve, Fault, LossPoint, Objective, TrainConfig, TrainData,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_STAGE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ceinfuse", version, about = "Cross-encoder layer embeddings, infusion into dual encoders, retrieval and reranking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic retrieval dataset.
    SynthData(SynthArgs),
    /// Build a WordPiece vocabulary from a dataset.
    BuildVocab(BuildVocabArgs),
    /// Train a cross encoder on BM25-mined binary pairs.
    TrainCe(TrainCeArgs),
    /// Hits@k / MRR@k of every hidden-state layer.
    SweepLayers(SweepArgs),
    /// Initialize a dual encoder from a cross encoder.
    Infuse(InfuseArgs),
    /// Train a dual encoder with MNRL and BM25 hard negatives.
    TrainDe(TrainDeArgs),
    /// Embed a corpus into a searchable index.
    Index(IndexArgs),
    /// Exact top-k cosine search for a dataset's queries.
    Search(SearchArgs),
    /// Rescore retrieved candidates with a cross encoder.
    Rerank(RerankArgs),
    /// Hits@k and MRR@k of a results file.
    Eval(EvalArgs),
    /// Single-threaded embedding throughput and speedup.
    Bench(BenchArgs),
    /// Finite-difference check of the full-model gradients.
    GradCheck(GradCheckArgs),
    /// Run every stage end to end.
    RunPipeline(RunPipelineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub corpus_size: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub train_queries: Option<usize>,
    #[arg(long)]
    pub noise_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4096)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Shared training flags.
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSONL of mined examples; mined from BM25 when absent.
    #[arg(long)]
    pub negatives: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub n_neg: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct TrainCeArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub ff: usize,
    /// Steps against random negatives before the main phase.
    #[arg(long)]
    pub matching_steps: Option<usize>,
    /// Plain random init, without tied query/key projections.
    #[arg(long)]
    pub plain_init: bool,
}

#[derive(Debug, Args)]
pub struct TrainDeArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Start from this checkpoint (e.g. an infused one); random init otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Depth of a randomly initialized model; architecture taken from `--like`.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long)]
    pub like: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// `[CLS] s [SEP]`
    Single,
    /// `[CLS] s [SEP] s [SEP]`
    SelfPair,
}

impl From<ModeArg> for EmbedMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Single => EmbedMode::Single,
            ModeArg::SelfPair => EmbedMode::SelfPair,
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::SelfPair)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Evaluate only the first N queries.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InfuseArgs {
    #[arg(long)]
    pub ce: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 1)]
    pub k_copy: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Check the copied prefix on this many corpus sentences.
    #[arg(long)]
    pub verify: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Hidden-state index; the last layer by default.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Single)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Single)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub ce: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub depth: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Ignore hits whose document id equals the query id.
    #[arg(long)]
    pub exclude_self: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoints to time; the first is the reference for speedups.
    #[arg(long, required = true, num_args = 1..)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub corpus_size: usize,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value = "mnrl")]
    pub objective: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate the FFN gradients to demonstrate that the check catches it.
    #[arg(long)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct RunPipelineArgs {
    /// TOML configuration; defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reuse or create this run directory (finished stages are skipped).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Stage { .. } => EXIT_STAGE,
        e if e.is_validation() => EXIT_VALIDATION,
        _ => EXIT_STAGE,
    }
}

/// Parses `args`, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn vocab_for(explicit: Option<&Path>, ckpt: &Path) -> Result<Vocab> {
    if let Some(p) = explicit {
        return load_vocab(p);
    }
    let info = checkpoint::load_info(ckpt)?;
    let p = info
        .vocab_path
        .ok_or_else(|| Error::Config(format!("{} records no vocabulary; pass --vocab", ckpt.display())))?;
    load_vocab(p)
}

fn dataset(dir: &Path) -> Result<crate::eval::Dataset> {
    let name = dir.file_name().map_or("data".into(), |n| n.to_string_lossy().into_owned());
    load_dataset(dir, &name)
}

fn examples(args: &TrainArgs, data: &crate::eval::Dataset) -> Result<Vec<crate::training::TrainExample>> {
    match &args.negatives {
        Some(p) => load_examples(p),
        None => pipeline::mine_training_examples(
            &args.data,
            data,
            MiningParams {
                n_neg: args.n_neg,
                seed: args.seed,
                ..MiningParams::default()
            },
        ),
    }
}

fn train_config(args: &TrainArgs, base: TrainConfig) -> TrainConfig {
    TrainConfig {
        seed: args.seed,
        max_len: args.max_len,
        negatives_per_example: args.n_neg,
        epochs: args.epochs.unwrap_or(base.epochs),
        max_steps: args.max_steps.or(base.max_steps),
        learning_rate: args.lr.unwrap_or(base.learning_rate),
        batch_size: args.batch_size.unwrap_or(base.batch_size),
        ..base
    }
}

fn loss_path(out: &Path, suffix: &str) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn save_trained(w: &EncoderWeights<f32>, args: &TrainArgs, tc: &TrainConfig, curve: &[LossPoint]) -> Result<()> {
    write_loss_curve(loss_path(&args.out, ".loss.csv"), curve, &[format!("seed={}", tc.seed)])?;
    checkpoint::save(w, &args.out, Some(&args.vocab))?;
    if let Some(last) = curve.last() {
        println!("trained {} steps, final loss {:.4}", curve.len(), last.loss);
    }
    Ok(())
}

fn finish_training(w: &EncoderWeights<f32>, args: &TrainArgs, tc: &TrainConfig, data: &TrainData, vocab: &Vocab) -> Result<()> {
    let mut w = w.clone();
    let curve = train(&mut w, vocab, data, tc)?;
    save_trained(&w, args, tc, &curve)
}

fn embed_queries(enc: &SentenceEncoder, data: &crate::eval::Dataset, layer: usize) -> Result<Vec<Vec<f32>>> {
    let refs: Vec<&str> = data.queries.iter().map(String::as_str).collect();
    enc.embed_batch(&refs, layer)?
        .into_iter()
        .zip(&data.query_ids)
        .map(|(r, id)| r.map_err(|e| Error::Validation(format!("query {id}: {e}"))))
        .collect()
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData(a) => {
            let d = SynthSpec::default();
            let spec = SynthSpec {
                seed: a.seed,
                corpus_size: a.corpus_size.unwrap_or(d.corpus_size),
                num_queries: a.queries.unwrap_or(d.num_queries),
                num_train_queries: a.train_queries.unwrap_or(d.num_train_queries),
                noise_ratio: a.noise_ratio.unwrap_or(d.noise_ratio),
                ..d
            };
            synth_data(&spec)?.write(&a.out, &[format!("seed={}", a.seed)])?;
            println!("wrote {}", a.out.display());
        }
        Command::BuildVocab(a) => {
            let data = dataset(&a.data)?;
            let vocab = pipeline::dataset_vocab(&a.data, &data, a.size)?;
            vocab.save(&a.out)?;
            println!("{} tokens", vocab.len());
        }
        Command::TrainCe(a) => {
            let vocab = load_vocab(&a.train.vocab)?;
            let data = dataset(&a.train.data)?;
            let config = ModelConfig {
                num_layers: a.layers,
                hidden: a.hidden,
                heads: a.heads,
                ff: a.ff,
                vocab_size: vocab.len(),
                max_positions: a.train.max_len,
                ..ModelConfig::default()
            };
            let defaults = PipelineConfig::default();
            let config = ModelConfig {
                init_std: defaults.model.init_std,
                ..config
            };
            let schedule = CeSchedule {
                content_init: !a.plain_init,
                matching_steps: a.matching_steps.unwrap_or(defaults.ce_schedule.matching_steps),
                ..defaults.ce_schedule
            };
            let tc = train_config(&a.train, defaults.ce_train);
            let ex = examples(&a.train, &data)?;
            let queries = pipeline::mining_queries(&a.train.data, &data)?;
            let (w, matching, main) =
                pipeline::train_cross_encoder(&config, &vocab, &ex, &queries, &data.docs, &schedule, &tc)?;
            if !matching.is_empty() {
                write_loss_curve(loss_path(&a.train.out, ".matching_loss.csv"), &matching, &[format!("seed={}", tc.seed)])?;
            }
            save_trained(&w, &a.train, &tc, &main)?;
        }
        Command::TrainDe(a) => {
            let vocab = load_vocab(&a.train.vocab)?;
            let data = dataset(&a.train.data)?;
            let w = match (&a.init, &a.like) {
                (Some(p), _) => checkpoint::load(p)?.0,
                (None, Some(like)) => {
                    let info = checkpoint::load_info(like)?;
                    checkpoint::random_dual_encoder(&info.config, a.layers, a.train.seed)?
                }
                (None, None) => {
                    let config = ModelConfig {
                        vocab_size: vocab.len(),
                        max_positions: a.train.max_len,
                        ..ModelConfig::default()
                    }
                    .with_layers(a.layers);
                    EncoderWeights::init_random(&config, a.train.seed, Role::DualEncoder)?
                }
            };
            if w.role != Role::DualEncoder {
                return Err(Error::Config("train-de expects a dual-encoder checkpoint".into()));
            }
            let base = PipelineConfig::default().de_train;
            let tc = train_config(&a.train, base);
            let td = TrainData::Mnrl(examples(&a.train, &data)?);
            finish_training(&w, &a.train, &tc, &td, &vocab)?;
        }
        Command::SweepLayers(a) => {
            let (w, _) = checkpoint::load(&a.model)?;
            let vocab = vocab_for(a.vocab.as_deref(), &a.model)?;
            let data = dataset(&a.data)?.with_query_sample(a.sample);
            let opts = EmbedOptions {
                max_len: a.max_len,
                ..EmbedOptions::default()
            };
            let enc = SentenceEncoder::new(&w, &vocab, a.mode.into(), opts);
            let rows = layer_sweep(&enc, &data, a.k)?;
            println!("layer,hits@{k},mrr@{k}", k = a.k);
            for r in &rows {
                println!("{},{:.4},{:.4}", r.layer, r.hits, r.mrr);
            }
            if let Some(out) = &a.out {
                write_sweep(&rows, a.k, out, &[])?;
            }
        }
        Command::Infuse(a) => {
            let (ce, info) = checkpoint::load(&a.ce)?;
            let de = infuse(&ce, a.layers, a.k_copy, a.seed)?;
            checkpoint::save(&de, &a.out, info.vocab_path.as_deref())?;
            if let Some(n) = a.verify {
                let dir = a
                    .data
                    .as_ref()
                    .ok_or_else(|| Error::Config("--verify needs --data for probe sentences".into()))?;
                let vocab = vocab_for(None, &a.ce)?;
                let data = dataset(dir)?;
                let probes: Vec<&str> = data.docs.iter().take(n).map(String::as_str).collect();
                let report = verify_infusion(&ce, &de, a.k_copy, &vocab, &probes, 64)?;
                println!("max deviation over copied prefix: {:.3e}", report.prefix_max_dev());
                if !report.passed() {
                    return Err(Error::Numeric(format!("infusion check failed at {:?}", report.flagged)));
                }
            }
            println!("wrote {}", a.out.display());
        }
        Command::Index(a) => {
            let (w, _) = checkpoint::load(&a.model)?;
            let vocab = vocab_for(a.vocab.as_deref(), &a.model)?;
            let data = dataset(&a.data)?;
            let layer = a.layer.unwrap_or(w.layers.len());
            let opts = EmbedOptions {
                max_len: a.max_len,
                ..EmbedOptions::default()
            };
            let enc = SentenceEncoder::new(&w, &vocab, a.mode.into(), opts);
            let refs: Vec<&str> = data.docs.iter().map(String::as_str).collect();
            let index = build_index(
                &data.doc_ids,
                &refs,
                &LayerEmbedder { encoder: enc, layer },
                Provenance {
                    model: a.model.display().to_string(),
                    layer,
                    pooling: "mean".into(),
                },
            )?;
            index.save(&a.out)?;
            println!("indexed {} documents (dim {})", index.len(), index.dim());
        }
        Command::Search(a) => {
            let (w, _) = checkpoint::load(&a.model)?;
            let vocab = vocab_for(a.vocab.as_deref(), &a.model)?;
            let data = dataset(&a.data)?;
            let index = EmbeddingIndex::load(&a.index)?;
            let opts = EmbedOptions {
                max_len: a.max_len,
                ..EmbedOptions::default()
            };
            let enc = SentenceEncoder::new(&w, &vocab, a.mode.into(), opts);
            let q = embed_queries(&enc, &data, index.provenance.layer)?;
            let results = index.search_many(&q, a.k)?;
            let labeled: Vec<_> = data.query_ids.iter().cloned().zip(results).collect();
            write_results_tsv(&a.out, &index, &labeled)?;
        }
        Command::Rerank(a) => {
            let (w, _) = checkpoint::load(&a.ce)?;
            let vocab = vocab_for(a.vocab.as_deref(), &a.ce)?;
            let data = dataset(&a.data)?;
            let scorer = CrossEncoderScorer::new(&w, &vocab, a.max_len)?;
            let doc_pos: std::collections::HashMap<&str, usize> =
                data.doc_ids.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
            let query_text: std::collections::HashMap<&str, &str> = data
                .query_ids
                .iter()
                .zip(&data.queries)
                .map(|(i, q)| (i.as_str(), q.as_str()))
                .collect();
            let text = |d: usize| data.docs[d].clone();
            let mut out = Vec::new();
            writeln!(out, "query_id\tdoc_id\trank\tscore\tstage").unwrap();
            for (qid, docs) in read_results_tsv(&a.results)? {
                let q = query_text
                    .get(qid.as_str())
                    .ok_or_else(|| Error::Validation(format!("query {qid} not in dataset")))?;
                let hits = docs
                    .iter()
                    .map(|d| {
                        doc_pos
                            .get(d.as_str())
                            .map(|&doc| Hit { doc, score: 0.0 })
                            .ok_or_else(|| Error::Validation(format!("document {d} not in corpus")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let r = rerank(q, &SearchResult { hits, stage: Stage::Retrieved }, &text, &scorer, a.depth)?;
                for (rank, h) in r.hits.iter().enumerate() {
                    writeln!(out, "{qid}\t{}\t{}\t{}\t{}", data.doc_ids[h.doc], rank + 1, h.score, r.stage).unwrap();
                }
            }
            std::fs::write(&a.out, out).map_err(|e| Error::io(&a.out, e))?;
        }
        Command::Eval(a) => {
            let rankings = read_results_tsv(&a.results)?;
            let qrels = Qrels::load(&a.qrels)?;
            let m = evaluate(
                &rankings,
                &qrels,
                a.k,
                EvalOptions {
                    exclude_self: a.exclude_self,
                },
            )?;
            println!("hits@{k}={:.4} mrr@{k}={:.4} n={}", m.hits, m.mrr, m.n, k = a.k);
        }
        Command::Bench(a) => {
            let data = dataset(&a.data)?;
            let n = a.corpus_size.min(data.docs.len());
            let corpus: Vec<&str> = data.docs[..n].iter().map(String::as_str).collect();
            let opts = EmbedOptions {
                max_len: a.max_len,
                batch_size: a.batch_size,
                ..EmbedOptions::default()
            };
            let mut results = Vec::new();
            for m in &a.models {
                let (w, _) = checkpoint::load(m)?;
                let vocab = vocab_for(a.vocab.as_deref(), m)?;
                let enc = SentenceEncoder::new(&w, &vocab, EmbedMode::Single, opts);
                results.push(time_embedding(&m.display().to_string(), &enc, &corpus, a.runs)?);
            }
            println!("model,layers,median_seconds,sentences_per_sec,speedup");
            for (m, r) in a.models.iter().zip(&results) {
                let layers = checkpoint::load_info(m)?.config.num_layers;
                println!(
                    "{},{layers},{:.4},{:.1},{:.3}",
                    r.model,
                    r.median_seconds,
                    r.sentences_per_sec,
                    speedup(&results[0], r)?
                );
            }
        }
        Command::GradCheck(a) => {
            let objective = Objective::parse(&a.objective)?;
            let fault = a.inject_fault.then_some(Fault::NegateFfnGrad);
            let r = model_grad_check(&small_config(), objective, a.seed, fault)?;
            println!("max relative error {:.3e} (worst: {})", r.max_rel_error, r.worst_tensor);
            if r.max_rel_error >= 1e-4 {
                return Err(Error::Numeric(format!("gradient check failed: {:.3e}", r.max_rel_error)));
            }
        }
        Command::RunPipeline(a) => {
            let mut config = match &a.config {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = a.seed {
                config.seed = s;
            }
            config.validate()?;
            if a.print_config {
                print!("{}", config.to_toml());
                return Ok(());
            }
            let dir = a.run_dir.clone().unwrap_or_else(|| pipeline::default_run_dir(&config));
            let out = pipeline::run_pipeline(&config, &dir)?;
            println!("dataset,model,stage,layer,hits@{k},mrr@{k}", k = out.report.k);
            for r in &out.report.rows {
                println!("{},{},{},{},{:.4},{:.4}", r.dataset, r.model, r.stage, r.layer, r.hits, r.mrr);
            }
            for s in &out.report.significance {
                println!("{} {} {}: t={:.3} p={:.4} n={}", s.comparison, s.stage, s.metric, s.t, s.p, s.n);
            }
            println!("artifacts in {}", out.run_dir.display());
        }
    }
    Ok(())
}
