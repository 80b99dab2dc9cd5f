//! Okapi BM25 over an in-memory corpus, plus hard-negative mining.

use std::collections::{HashMap, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::basic_tokenize;
use crate::training::TrainExample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    /// term → `(doc index, term frequency)` in increasing doc order.
    postings: HashMap<String, Vec<(u32, u32)>>,
    doc_lens: Vec<u32>,
    avgdl: f64,
    params: Bm25Params,
}

impl Bm25Index {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        Self::with_params(corpus, Bm25Params::default())
    }

    pub fn with_params<S: AsRef<str>>(corpus: &[S], params: Bm25Params) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("BM25 corpus is empty".into()));
        }
        if !(params.k1 >= 0.0) || !(0.0..=1.0).contains(&params.b) {
            return Err(Error::Config("BM25 needs k1 ≥ 0 and b in [0, 1]".into()));
        }
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        let mut doc_lens = Vec::with_capacity(corpus.len());
        for (d, text) in corpus.iter().enumerate() {
            let terms = basic_tokenize(text.as_ref());
            doc_lens.push(terms.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((d as u32, n));
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable();
        }
        let total: u64 = doc_lens.iter().map(|&l| l as u64).sum();
        let avgdl = (total as f64 / doc_lens.len() as f64).max(f64::MIN_POSITIVE);
        Ok(Self {
            postings,
            doc_lens,
            avgdl,
            params,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_len(&self, doc: usize) -> Option<usize> {
        self.doc_lens.get(doc).map(|&l| l as usize)
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// `ln(1 + (N − df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Distinct query terms in first-occurrence order.
    fn query_terms(query: &str) -> Vec<String> {
        let mut seen = HashSet::new();
        basic_tokenize(query)
            .into_iter()
            .filter(|t| seen.insert(t.clone()))
            .collect()
    }

    fn term_weight(&self, tf: u32, doc_len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * doc_len as f64 / self.avgdl;
        tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    pub fn score(&self, query: &str, doc: usize) -> Result<f64> {
        let len = *self
            .doc_lens
            .get(doc)
            .ok_or_else(|| Error::Validation(format!("unknown document index {doc}")))?;
        let mut s = 0.0;
        for t in Self::query_terms(query) {
            if let Some(list) = self.postings.get(&t) {
                if let Ok(pos) = list.binary_search_by_key(&(doc as u32), |&(d, _)| d) {
                    s += self.idf(&t) * self.term_weight(list[pos].1, len);
                }
            }
        }
        Ok(s)
    }

    /// Scores of every document, accumulated term by term over postings.
    pub fn score_all(&self, query: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.num_docs()];
        for t in Self::query_terms(query) {
            if let Some(list) = self.postings.get(&t) {
                let idf = self.idf(&t);
                for &(d, tf) in list {
                    scores[d as usize] += idf * self.term_weight(tf, self.doc_lens[d as usize]);
                }
            }
        }
        scores
    }

    /// Best `k` documents by score, ties broken by smaller doc index.
    pub fn top_k(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self.score_all(query).into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

/// A training query with the corpus indices of its positives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiningQuery {
    pub query: String,
    /// Text used as the MNRL positive.
    pub positive: String,
    /// Corpus indices never used as negatives for this query.
    pub positive_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningParams {
    pub n_neg: usize,
    pub window: usize,
    pub seed: u64,
}

impl Default for MiningParams {
    fn default() -> Self {
        Self {
            n_neg: 4,
            window: 50,
            seed: 0,
        }
    }
}

/// Uniformly sampled non-positive documents for each query, from a
/// per-query seeded stream. These are easy negatives: they rarely share a
/// content word with the query.
pub fn random_negatives<S: AsRef<str>>(
    corpus: &[S],
    queries: &[MiningQuery],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let excluded: HashSet<usize> = q.positive_ids.iter().copied().collect();
            if corpus.len() < excluded.len() + n {
                return Err(Error::Validation(format!(
                    "query {qi}: corpus too small for {n} random negatives"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(qi as u64) ^ 0x2545_f491_4f6c_dd1d);
            let mut out = Vec::with_capacity(n);
            let mut seen = HashSet::new();
            while out.len() < n {
                let d = rng.random_range(0..corpus.len());
                if !excluded.contains(&d) && seen.insert(d) {
                    out.push(corpus[d].as_ref().to_string());
                }
            }
            Ok(out)
        })
        .collect()
}

/// Attaches BM25 hard negatives to each query.
///
/// For each query the top `window` BM25 hits are taken, positives and
/// zero-score documents are dropped, and `n_neg` of the rest are sampled
/// without replacement from a per-query seeded stream (kept in rank order).
/// Queries with fewer candidates keep all of them and are logged.
pub fn mine_hard_negatives<S: AsRef<str>>(
    index: &Bm25Index,
    corpus: &[S],
    queries: &[MiningQuery],
    params: MiningParams,
) -> Result<Vec<TrainExample>> {
    if params.window < params.n_neg {
        return Err(Error::Config(format!(
            "mining window {} is smaller than n_neg {}",
            params.window, params.n_neg
        )));
    }
    if corpus.len() != index.num_docs() {
        return Err(Error::Validation("corpus does not match the BM25 index".into()));
    }
    let mut short = 0usize;
    let mut out = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        if q.positive_ids.is_empty() {
            return Err(Error::Validation(format!("query {qi} has no positive")));
        }
        let excluded: HashSet<usize> = q.positive_ids.iter().copied().collect();
        let candidates: Vec<usize> = index
            .top_k(&q.query, params.window + excluded.len())
            .into_iter()
            .filter(|&(d, s)| s > 0.0 && !excluded.contains(&d))
            .map(|(d, _)| d)
            .take(params.window)
            .collect();
        let chosen: Vec<usize> = if candidates.len() <= params.n_neg {
            if candidates.len() < params.n_neg {
                short += 1;
                log::debug!(
                    "query {qi}: only {} BM25 negatives available (wanted {})",
                    candidates.len(),
                    params.n_neg
                );
            }
            candidates
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(qi as u64));
            let mut picks = sample(&mut rng, candidates.len(), params.n_neg).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| candidates[i]).collect()
        };
        out.push(TrainExample {
            query: q.query.clone(),
            positive: q.positive.clone(),
            negatives: chosen.into_iter().map(|d| corpus[d].as_ref().to_string()).collect(),
        });
    }
    if short > 0 {
        log::warn!(
            "{short} of {} queries had fewer than {} BM25 negatives",
            queries.len(),
            params.n_neg
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mq(positive_ids: Vec<usize>) -> MiningQuery {
        MiningQuery {
            query: "q".into(),
            positive: "p".into(),
            positive_ids,
        }
    }

    #[test]
    fn random_negatives_rejects_small_corpus() {
        let corpus = ["a", "b", "c"];
        assert!(matches!(
            random_negatives(&corpus, &[mq(vec![0])], 3, 0),
            Err(Error::Validation(_))
        ));
        assert_eq!(random_negatives(&corpus, &[mq(vec![0])], 2, 0).unwrap()[0].len(), 2);
    }

    proptest! {
        #[test]
        fn random_negatives_are_distinct_non_positive_and_seeded(
            n_docs in 5usize..40,
            pos in proptest::collection::vec(0usize..40, 1..4),
            n in 1usize..4,
            seed in any::<u64>(),
        ) {
            let corpus: Vec<String> = (0..n_docs).map(|i| format!("doc{i}")).collect();
            let pos: Vec<usize> = pos.into_iter().filter(|&p| p < n_docs).collect();
            let queries = [mq(pos.clone()), mq(pos.clone())];
            let a = random_negatives(&corpus, &queries, n, seed).unwrap();
            prop_assert_eq!(&a, &random_negatives(&corpus, &queries, n, seed).unwrap());
            for negs in &a {
                prop_assert_eq!(negs.len(), n);
                let set: HashSet<&String> = negs.iter().collect();
                prop_assert_eq!(set.len(), n);
                for p in &pos {
                    prop_assert!(!negs.contains(&corpus[*p]));
                }
            }
        }
    }

    #[test]
    fn hand_computed_score() {
        let idx = Bm25Index::build(&["a b", "a", "c"]).unwrap();
        assert_eq!(idx.df("a"), 2);
        assert!((idx.avgdl() - 4.0 / 3.0).abs() < 1e-12);
        let idf = (1.6f64).ln();
        let denom = 1.0 + 1.2 * (0.25 + 0.75 * 0.75);
        let s = idx.score("a", 1).unwrap();
        assert!((s - idf * 2.2 / denom).abs() < 1e-12);
        assert!((s - 0.5235).abs() < 1e-4);
    }

    #[test]
    fn basic_properties() {
        let one = Bm25Index::build(&["x y z"]).unwrap();
        assert_eq!(one.avgdl(), 3.0);
        let dup = Bm25Index::build(&["p q", "p q", "r"]).unwrap();
        assert_eq!(dup.doc_len(0), dup.doc_len(1));
        assert_eq!(dup.score("zzz", 0).unwrap(), 0.0);
        assert_eq!(dup.score("p p q", 0).unwrap(), dup.score("p q", 0).unwrap());
        assert!(matches!(dup.score("p", 7), Err(Error::Validation(_))));
        assert!(Bm25Index::build::<&str>(&[]).is_err());
    }

    #[test]
    fn top_k_full_ranking_and_single_match() {
        let idx = Bm25Index::build(&["red apple", "green pear", "red red cherry"]).unwrap();
        let all = idx.top_k("cherry", 10);
        assert_eq!(all.len(), 3);
        assert_eq!(all[0].0, 2);
        assert_eq!(all[1], (0, 0.0));
        assert_eq!(all[2], (1, 0.0));
    }

    #[test]
    fn mining_excludes_positives_and_is_reproducible() {
        let corpus = ["cat sat mat", "cat sat", "cat hat", "cat bat", "cat rat", "dog"];
        let idx = Bm25Index::build(&corpus).unwrap();
        let q = MiningQuery {
            query: "cat sat mat".into(),
            positive: corpus[0].into(),
            positive_ids: vec![0],
        };
        let p = MiningParams { n_neg: 3, window: 10, seed: 4 };
        let a = mine_hard_negatives(&idx, &corpus, &[q.clone()], p).unwrap();
        let b = mine_hard_negatives(&idx, &corpus, &[q], p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].negatives.len(), 3);
        assert!(!a[0].negatives.contains(&corpus[0].to_string()));
        assert!(!a[0].negatives.contains(&"dog".to_string()));
    }

    #[test]
    fn mining_with_only_positives_gives_empty_negatives() {
        let corpus = ["alpha", "alpha beta"];
        let idx = Bm25Index::build(&corpus).unwrap();
        let q = MiningQuery {
            query: "alpha".into(),
            positive: "alpha".into(),
            positive_ids: vec![0, 1],
        };
        let out = mine_hard_negatives(&idx, &corpus, &[q], MiningParams::default()).unwrap();
        assert!(out[0].negatives.is_empty());
    }

    fn words(doc: &[u8]) -> String {
        doc.iter().map(|w| format!("t{w}")).collect::<Vec<_>>().join(" ")
    }

    proptest! {
        #[test]
        fn scores_nonnegative_and_monotone_in_tf(
            docs in prop::collection::vec(prop::collection::vec(0u8..6, 1..8), 1..12),
        ) {
            let corpus: Vec<String> = docs.iter().map(|d| words(d)).collect();
            let idx = Bm25Index::build(&corpus).unwrap();
            for s in idx.score_all("t0 t1 t2") {
                prop_assert!(s >= 0.0);
            }
            // Turning a non-query term of a document that already holds t0 into
            // t0 keeps |d|, avgdl and df fixed and raises tf by one.
            let base = &docs[0];
            if base.contains(&0) {
                if let Some(pos) = base.iter().position(|&w| w != 0) {
                    let mut more = base.clone();
                    more[pos] = 0;
                    let mut corpus2 = corpus.clone();
                    corpus2[0] = words(&more);
                    let idx2 = Bm25Index::build(&corpus2).unwrap();
                    prop_assert!(idx2.score("t0", 0).unwrap() > idx.score("t0", 0).unwrap());
                }
            }
        }

        #[test]
        fn top_k_matches_brute_force(
            docs in prop::collection::vec(prop::collection::vec(0u8..20, 1..10), 1..60),
            query in prop::collection::vec(0u8..20, 1..4),
            k in 1usize..70,
        ) {
            let corpus: Vec<String> = docs.iter().map(|d| words(d)).collect();
            let idx = Bm25Index::build(&corpus).unwrap();
            let q = words(&query);
            let mut brute: Vec<(usize, f64)> =
                (0..corpus.len()).map(|d| (d, idx.score(&q, d).unwrap())).collect();
            brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            brute.truncate(k);
            let fast = idx.top_k(&q, k);
            prop_assert_eq!(fast.len(), brute.len());
            for (f, b) in fast.iter().zip(&brute) {
                prop_assert_eq!(f.0, b.0);
                prop_assert!((f.1 - b.1).abs() < 1e-12);
            }
        }
    }
}
