//! Exact cosine retrieval over an embedding index, and cross-encoder reranking.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorContainer;
use crate::error::{Error, Result};
use crate::model::{ce_score_batch, EncoderWeights, SentenceEncoder};
use crate::numkernel::Matrix;
use crate::tokenizer::Vocab;

pub const DEFAULT_K_RETRIEVE: usize = 50;
pub const DEFAULT_K_FINAL: usize = 10;

/// Anything that maps texts to fixed-width vectors.
pub trait Embedder {
    /// One result per text; an error for the whole call means bad arguments.
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Result<Vec<f32>>>>;
}

/// A [`SentenceEncoder`] read out at one hidden-state index.
#[derive(Debug, Clone, Copy)]
pub struct LayerEmbedder<'a> {
    pub encoder: SentenceEncoder<'a>,
    pub layer: usize,
}

impl Embedder for LayerEmbedder<'_> {
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Result<Vec<f32>>>> {
        self.encoder.embed_batch(texts, self.layer)
    }
}

/// Where the vectors of an index came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub layer: usize,
    pub pooling: String,
}

/// Unit-normalized document vectors with their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Matrix<f32>,
    pub provenance: Provenance,
}

fn normalized(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

impl EmbeddingIndex {
    /// Normalizes `vectors` row by row; a zero or non-finite row is an error
    /// naming its document.
    pub fn from_vectors(ids: Vec<String>, vectors: Vec<Vec<f32>>, provenance: Provenance) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("cannot index an empty corpus".into()));
        }
        if ids.len() != vectors.len() {
            return Err(Error::Shape(format!("{} ids for {} vectors", ids.len(), vectors.len())));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Validation(format!("duplicate document id {dup}")));
        }
        let rows = vectors
            .iter()
            .zip(&ids)
            .map(|(v, id)| {
                normalized(v).ok_or_else(|| Error::Numeric(format!("document {id} has a zero or non-finite embedding")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids,
            vectors: Matrix::from_rows(&rows)?,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, doc: usize) -> &str {
        &self.ids[doc]
    }

    pub fn vectors(&self) -> &Matrix<f32> {
        &self.vectors
    }

    /// Exact top-`k` by cosine for each query row.
    pub fn search_many(&self, queries: &[Vec<f32>], k: usize) -> Result<Vec<SearchResult>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let rows = queries
            .iter()
            .enumerate()
            .map(|(i, q)| {
                if q.len() != self.dim() {
                    return Err(Error::Shape(format!("query of width {} vs index width {}", q.len(), self.dim())));
                }
                normalized(q).ok_or_else(|| Error::Numeric(format!("query {i} has a zero or non-finite embedding")))
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let scores = Matrix::from_rows(&rows)?.matmul_nt(&self.vectors)?;
        Ok((0..scores.rows()).map(|r| top_k(scores.row(r), k)).collect())
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<SearchResult> {
        Ok(self.search_many(&[query.to_vec()], k)?.remove(0))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = TensorContainer::new();
        c.meta.insert("kind".into(), "embedding_index".into());
        c.meta.insert("model".into(), self.provenance.model.clone());
        c.meta.insert("layer".into(), self.provenance.layer.to_string());
        c.meta.insert("pooling".into(), self.provenance.pooling.clone());
        c.meta.insert("ids".into(), serde_json::to_string(&self.ids).expect("strings serialize"));
        c.tensors.push(("vectors".into(), self.vectors.clone()));
        c.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = TensorContainer::load(path)?;
        let field = |k: &str| {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("index file lacks `{k}`")))
        };
        if field("kind")? != "embedding_index" {
            return Err(Error::Format("not an embedding index".into()));
        }
        let ids: Vec<String> =
            serde_json::from_str(&field("ids")?).map_err(|e| Error::Format(format!("bad id list: {e}")))?;
        let vectors = c
            .get("vectors")
            .ok_or_else(|| Error::Format("index file lacks vectors".into()))?
            .clone();
        if vectors.rows() != ids.len() {
            return Err(Error::Format("id count does not match vector rows".into()));
        }
        let layer = field("layer")?
            .parse()
            .map_err(|_| Error::Format("bad layer in index file".into()))?;
        Ok(Self {
            ids,
            vectors,
            provenance: Provenance {
                model: field("model")?,
                layer,
                pooling: field("pooling")?,
            },
        })
    }
}

/// Embeds every document and builds the index.
pub fn build_index(
    ids: &[String],
    texts: &[&str],
    embedder: &dyn Embedder,
    provenance: Provenance,
) -> Result<EmbeddingIndex> {
    if texts.is_empty() {
        return Err(Error::EmptyInput("cannot index an empty corpus".into()));
    }
    if ids.len() != texts.len() {
        return Err(Error::Shape(format!("{} ids for {} texts", ids.len(), texts.len())));
    }
    let vectors = embedder
        .embed_texts(texts)?
        .into_iter()
        .zip(ids)
        .map(|(r, id)| r.map_err(|e| Error::Validation(format!("failed to embed document {id}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingIndex::from_vectors(ids.to_vec(), vectors, provenance)
}

fn top_k(scores: &[f32], k: usize) -> SearchResult {
    let better = |a: &(usize, f32), b: &(usize, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let mut all: Vec<(usize, f32)> = scores.iter().copied().enumerate().collect();
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, better);
        all.truncate(k);
    }
    all.sort_by(better);
    SearchResult {
        hits: all.into_iter().map(|(doc, score)| Hit { doc, score }).collect(),
        stage: Stage::Retrieved,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Retrieved,
    Reranked,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Retrieved => "retrieved",
            Stage::Reranked => "reranked",
        })
    }
}

/// One ranked document: its row in the index and its score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub doc: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
    pub stage: Stage,
}

impl SearchResult {
    pub fn docs(&self) -> Vec<usize> {
        self.hits.iter().map(|h| h.doc).collect()
    }

    pub fn truncate(&mut self, k: usize) {
        self.hits.truncate(k);
    }
}

/// Scores `(query, doc)` pairs; higher is more relevant.
pub trait PairScorer {
    fn score_pairs(&self, query: &str, docs: &[&str]) -> Result<Vec<f32>>;
}

/// Scores pairs with a cross-encoder's classification head.
#[derive(Debug, Clone, Copy)]
pub struct CrossEncoderScorer<'a> {
    weights: &'a EncoderWeights<f32>,
    vocab: &'a Vocab,
    pub max_len: usize,
    pub batch_size: usize,
}

impl<'a> CrossEncoderScorer<'a> {
    pub fn new(weights: &'a EncoderWeights<f32>, vocab: &'a Vocab, max_len: usize) -> Result<Self> {
        if weights.head.is_none() {
            return Err(Error::Validation("reranking needs a cross encoder with a head".into()));
        }
        Ok(Self {
            weights,
            vocab,
            max_len,
            batch_size: 64,
        })
    }
}

impl PairScorer for CrossEncoderScorer<'_> {
    fn score_pairs(&self, query: &str, docs: &[&str]) -> Result<Vec<f32>> {
        ce_score_batch(self.weights, self.vocab, query, docs, self.max_len, self.batch_size)
    }
}

/// Memoizes another scorer; useful when several retrievers share one reranker.
pub struct CachingScorer<S> {
    inner: S,
    cache: RefCell<HashMap<(String, String), f32>>,
}

impl<S: PairScorer> CachingScorer<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            cache: RefCell::new(HashMap::new()),
        }
    }
}

impl<S: PairScorer> PairScorer for CachingScorer<S> {
    fn score_pairs(&self, query: &str, docs: &[&str]) -> Result<Vec<f32>> {
        let missing: Vec<&str> = {
            let cache = self.cache.borrow();
            let mut seen = HashSet::new();
            docs.iter()
                .copied()
                .filter(|d| !cache.contains_key(&(query.to_string(), d.to_string())) && seen.insert(*d))
                .collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.score_pairs(query, &missing)?;
            let mut cache = self.cache.borrow_mut();
            for (d, s) in missing.into_iter().zip(fresh) {
                cache.insert((query.to_string(), d.to_string()), s);
            }
        }
        let cache = self.cache.borrow();
        Ok(docs.iter().map(|d| cache[&(query.to_string(), d.to_string())]).collect())
    }
}

/// Rescores the first `depth` candidates and sorts them by the new score,
/// keeping retrieval order among ties. Candidates beyond `depth` follow in
/// their original order.
pub fn rerank(
    query: &str,
    candidates: &SearchResult,
    doc_text: &dyn Fn(usize) -> String,
    scorer: &dyn PairScorer,
    depth: usize,
) -> Result<SearchResult> {
    let depth = depth.min(candidates.hits.len());
    let texts: Vec<String> = candidates.hits[..depth].iter().map(|h| doc_text(h.doc)).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let scores = scorer.score_pairs(query, &refs)?;
    let mut head: Vec<Hit> = candidates.hits[..depth]
        .iter()
        .zip(scores)
        .map(|(h, score)| Hit { doc: h.doc, score })
        .collect();
    head.sort_by(|a, b| b.score.total_cmp(&a.score));
    head.extend_from_slice(&candidates.hits[depth..]);
    Ok(SearchResult {
        hits: head,
        stage: Stage::Reranked,
    })
}

/// Retrieve `k_retrieve`, rerank all of them, keep `k_final`.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_and_rerank(
    query: &str,
    query_emb: &[f32],
    index: &EmbeddingIndex,
    doc_text: &dyn Fn(usize) -> String,
    scorer: &dyn PairScorer,
    k_retrieve: usize,
    k_final: usize,
) -> Result<SearchResult> {
    let retrieved = index.search(query_emb, k_retrieve)?;
    let mut out = rerank(query, &retrieved, doc_text, scorer, k_retrieve)?;
    out.truncate(k_final);
    Ok(out)
}

/// Writes `query_id, doc_id, rank, score, stage` rows (rank starts at 1).
pub fn write_results_tsv(
    path: impl AsRef<Path>,
    index: &EmbeddingIndex,
    results: &[(String, SearchResult)],
) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "query_id\tdoc_id\trank\tscore\tstage").unwrap();
    for (qid, r) in results {
        for (rank, h) in r.hits.iter().enumerate() {
            writeln!(out, "{qid}\t{}\t{}\t{}\t{}", index.id(h.doc), rank + 1, h.score, r.stage).unwrap();
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a results TSV back as `query_id → ranked doc ids`, in file order.
pub fn read_results_tsv(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<String>)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<(String, Vec<(usize, String)>)> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Format(format!("{}:{}: expected 5 columns", path.display(), n + 1)));
        }
        let rank: usize = cols[2]
            .parse()
            .map_err(|_| Error::Format(format!("{}:{}: bad rank", path.display(), n + 1)))?;
        match out.last_mut() {
            Some((q, list)) if q == cols[0] => list.push((rank, cols[1].to_string())),
            _ => out.push((cols[0].to_string(), vec![(rank, cols[1].to_string())])),
        }
    }
    Ok(out
        .into_iter()
        .map(|(q, mut list)| {
            list.sort_by_key(|(r, _)| *r);
            (q, list.into_iter().map(|(_, d)| d).collect())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixed(Vec<Vec<f32>>);

    impl Embedder for Fixed {
        fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Result<Vec<f32>>>> {
            Ok(texts.iter().map(|t| Ok(self.0[t.parse::<usize>().unwrap()].clone())).collect())
        }
    }

    struct ByLength;

    impl PairScorer for ByLength {
        fn score_pairs(&self, _: &str, docs: &[&str]) -> Result<Vec<f32>> {
            Ok(docs.iter().map(|d| d.len() as f32).collect())
        }
    }

    struct Constant;

    impl PairScorer for Constant {
        fn score_pairs(&self, _: &str, docs: &[&str]) -> Result<Vec<f32>> {
            Ok(vec![0.5; docs.len()])
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    fn random_index(n: usize, d: usize, seed: u64) -> EmbeddingIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        EmbeddingIndex::from_vectors(ids(n), v, Provenance::default()).unwrap()
    }

    #[test]
    fn build_normalizes_and_names_zero_rows() {
        let e = Fixed(vec![vec![3.0, 4.0], vec![3.0, 4.0], vec![0.0, 0.0]]);
        let idx = build_index(&ids(2), &["0", "1"], &e, Provenance::default()).unwrap();
        assert_eq!(idx.vectors().row(0), &[0.6, 0.8]);
        assert_eq!(idx.vectors().row(0), idx.vectors().row(1));
        let err = build_index(&ids(3), &["0", "1", "2"], &e, Provenance::default()).unwrap_err();
        assert!(err.to_string().contains("d2"));
        assert!(build_index(&[], &[], &e, Provenance::default()).is_err());
    }

    #[test]
    fn self_query_ranks_first_and_k_clamps() {
        let idx = random_index(20, 8, 1);
        let q = idx.vectors().row(7).to_vec();
        let r = idx.search(&q, 50).unwrap();
        assert_eq!(r.hits.len(), 20);
        assert_eq!(r.hits[0].doc, 7);
        assert!((r.hits[0].score - 1.0).abs() < 1e-6);
        assert!(r.hits.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ties_prefer_smaller_index() {
        let idx =
            EmbeddingIndex::from_vectors(ids(3), vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]], Provenance::default())
                .unwrap();
        assert_eq!(idx.search(&[0.0, 1.0], 2).unwrap().docs(), vec![1, 2]);
    }

    #[test]
    fn rerank_is_stable_and_leaves_tail() {
        let idx = random_index(30, 4, 2);
        let r = idx.search(&[1.0, 0.0, 0.0, 0.0], 10).unwrap();
        let text = |d: usize| "x".repeat(d + 1);
        let same = rerank("q", &r, &text, &Constant, 10).unwrap();
        assert_eq!(same.docs(), r.docs());
        assert_eq!(same.stage, Stage::Reranked);

        let part = rerank("q", &r, &text, &ByLength, 4).unwrap();
        let mut head = r.docs()[..4].to_vec();
        head.sort_by(|a, b| b.cmp(a));
        assert_eq!(&part.docs()[..4], head.as_slice());
        assert_eq!(&part.docs()[4..], &r.docs()[4..]);
        assert_eq!(rerank("q", &r, &text, &ByLength, 1).unwrap().docs(), r.docs());
    }

    #[test]
    fn k_one_retrieve_and_rerank_equals_search() {
        let idx = random_index(30, 4, 3);
        let q = [0.3, -0.2, 0.9, 0.1];
        let text = |d: usize| d.to_string();
        let both = retrieve_and_rerank("q", &q, &idx, &text, &ByLength, 1, 1).unwrap();
        assert_eq!(both.docs(), idx.search(&q, 1).unwrap().docs());
    }

    #[test]
    fn caching_scorer_matches_inner() {
        let c = CachingScorer::new(ByLength);
        assert_eq!(c.score_pairs("q", &["ab", "a", "ab"]).unwrap(), vec![2.0, 1.0, 2.0]);
        assert_eq!(c.score_pairs("q", &["abc", "a"]).unwrap(), vec![3.0, 1.0]);
    }

    #[test]
    fn index_and_results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let idx = random_index(5, 3, 4);
        idx.save(dir.path().join("i.ntc")).unwrap();
        assert_eq!(EmbeddingIndex::load(dir.path().join("i.ntc")).unwrap(), idx);
        let r = idx.search(&[1.0, 1.0, 1.0], 3).unwrap();
        let path = dir.path().join("r.tsv");
        write_results_tsv(&path, &idx, &[("q1".into(), r.clone())]).unwrap();
        let back = read_results_tsv(&path).unwrap();
        let expect: Vec<String> = r.docs().iter().map(|&d| idx.id(d).to_string()).collect();
        assert_eq!(back, vec![("q1".to_string(), expect)]);
    }
}
