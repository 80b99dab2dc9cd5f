//! Dataset files, the synthetic retrieval benchmark and vocabulary building.
//!
//! Formats: corpus and query files are JSONL with `{"id", "text"}` objects,
//! qrels are `query_id<TAB>doc_id<TAB>relevance`, training pairs are
//! `query<TAB>positive`. Lines starting with `#` are header comments.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{Dataset, Qrels};
use crate::tokenizer::{basic_tokenize, Vocab, CLS, PAD, SEP, UNK};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[Record], header: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for h in header {
        writeln!(out, "# {h}").unwrap();
    }
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[(String, String)], header: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for h in header {
        writeln!(out, "# {h}").unwrap();
    }
    for (q, p) in pairs {
        if q.contains(['\t', '\n']) || p.contains(['\t', '\n']) {
            return Err(Error::Format("pair text contains a tab or newline".into()));
        }
        writeln!(out, "{q}\t{p}").unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(n, l)| {
            l.split_once('\t')
                .filter(|(q, p)| !q.is_empty() && !p.is_empty())
                .map(|(q, p)| (q.to_string(), p.to_string()))
                .ok_or_else(|| Error::Format(format!("{}:{}: expected query<TAB>positive", path.display(), n + 1)))
        })
        .collect()
}

/// Hex SHA-256 of any serializable value's JSON form; used in file headers.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Parameters of the synthetic topical retrieval benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub topics: usize,
    pub keywords_per_topic: usize,
    /// Distinct topic keywords each document draws.
    pub doc_keywords: usize,
    /// Distinct keywords a query takes from its target document.
    pub query_keywords: (usize, usize),
    pub doc_len: (usize, usize),
    pub query_len: (usize, usize),
    /// Probability that a token is drawn from the shared noise words.
    pub noise_ratio: f64,
    pub noise_words: usize,
    pub corpus_size: usize,
    pub num_queries: usize,
    pub num_train_queries: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            topics: 100,
            keywords_per_topic: 30,
            doc_keywords: 6,
            query_keywords: (2, 3),
            doc_len: (10, 16),
            query_len: (4, 6),
            noise_ratio: 0.3,
            noise_words: 300,
            corpus_size: 5000,
            num_queries: 500,
            num_train_queries: 2000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.topics < 2 {
            return bad("need at least 2 topics");
        }
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return bad("noise ratio must lie in [0, 1)");
        }
        if self.noise_ratio > 0.0 && self.noise_words == 0 {
            return bad("noise ratio > 0 needs noise words");
        }
        if self.doc_keywords == 0 || self.doc_keywords > self.keywords_per_topic {
            return bad("doc_keywords must lie in 1..=keywords_per_topic");
        }
        let (qlo, qhi) = self.query_keywords;
        if qlo == 0 || qlo > qhi || qhi > self.doc_keywords {
            return bad("query_keywords must be a non-empty range within doc_keywords");
        }
        if self.doc_len.0 < self.doc_keywords || self.doc_len.0 > self.doc_len.1 {
            return bad("doc_len must be an ordered range starting at doc_keywords or more");
        }
        if self.query_len.0 < qhi || self.query_len.0 > self.query_len.1 {
            return bad("query_len must be an ordered range starting at the largest query_keywords or more");
        }
        if self.corpus_size == 0 || self.num_queries == 0 {
            return bad("corpus and query counts must be positive");
        }
        if self.num_queries + self.num_train_queries > self.corpus_size * 1000 {
            return bad("too many queries for the corpus");
        }
        Ok(())
    }
}

/// Everything [`synth_data`] produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub corpus: Vec<Record>,
    pub queries: Vec<Record>,
    pub qrels: Qrels,
    pub train_queries: Vec<Record>,
    pub train_qrels: Qrels,
    /// `(training query, positive document text)`.
    pub pairs: Vec<(String, String)>,
    /// Topic of each corpus document.
    pub doc_topics: Vec<usize>,
    pub keywords: Vec<Vec<String>>,
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Distinct pronounceable pseudo-words in a seeded order.
fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}")))
        .collect();
    let s = syllables.len();
    let mut codes: Vec<usize> = (0..s * s * s).collect();
    codes.shuffle(rng);
    codes
        .into_iter()
        .take(n)
        .map(|c| format!("{}{}{}", syllables[c / (s * s)], syllables[(c / s) % s], syllables[c % s]))
        .collect()
}

/// Generates the synthetic benchmark.
///
/// Every topic owns a disjoint keyword set. A document picks a topic, draws
/// `doc_keywords` of its keywords and fills its length with them, each token
/// replaced by a noise word with probability `noise_ratio`. A query targets one
/// document: it takes a few of that document's keywords plus noise, and that
/// document is its single relevant answer. Other documents of the same topic
/// act as lexical distractors.
pub fn synth_data(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words = pseudo_words(spec.topics * spec.keywords_per_topic + spec.noise_words, &mut rng);
    if words.len() < spec.topics * spec.keywords_per_topic + spec.noise_words {
        return Err(Error::Config("too many distinct words requested".into()));
    }
    let keywords: Vec<Vec<String>> = words
        .chunks(spec.keywords_per_topic)
        .take(spec.topics)
        .map(<[String]>::to_vec)
        .collect();
    let noise = &words[spec.topics * spec.keywords_per_topic..];

    let mut corpus = Vec::with_capacity(spec.corpus_size);
    let mut doc_topics = Vec::with_capacity(spec.corpus_size);
    let mut doc_kw: Vec<Vec<usize>> = Vec::with_capacity(spec.corpus_size);
    for d in 0..spec.corpus_size {
        let topic = rng.random_range(0..spec.topics);
        let mut kws = rand::seq::index::sample(&mut rng, spec.keywords_per_topic, spec.doc_keywords).into_vec();
        kws.sort_unstable();
        let len = rng.random_range(spec.doc_len.0..=spec.doc_len.1);
        let mut tokens: Vec<&str> = kws.iter().map(|&k| keywords[topic][k].as_str()).collect();
        while tokens.len() < len {
            tokens.push(&keywords[topic][*kws.choose(&mut rng).unwrap()]);
        }
        tokens.shuffle(&mut rng);
        for t in tokens.iter_mut() {
            if rng.random::<f64>() < spec.noise_ratio {
                *t = noise.choose(&mut rng).unwrap();
            }
        }
        corpus.push(Record {
            id: format!("d{d}"),
            text: tokens.join(" "),
        });
        doc_topics.push(topic);
        doc_kw.push(kws);
    }

    let make_queries = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| {
        let mut records = Vec::with_capacity(n);
        let mut qrels = Qrels::new();
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let d = rng.random_range(0..spec.corpus_size);
            let nk = rng.random_range(spec.query_keywords.0..=spec.query_keywords.1);
            let picked: Vec<usize> = doc_kw[d].choose_multiple(rng, nk).copied().collect();
            let len = rng.random_range(spec.query_len.0..=spec.query_len.1);
            let mut tokens: Vec<&str> = picked.iter().map(|&k| keywords[doc_topics[d]][k].as_str()).collect();
            while tokens.len() < len {
                if rng.random::<f64>() < spec.noise_ratio {
                    tokens.push(noise.choose(rng).unwrap());
                } else {
                    tokens.push(&keywords[doc_topics[d]][*picked.choose(rng).unwrap()]);
                }
            }
            tokens.shuffle(rng);
            let id = format!("{prefix}{i}");
            qrels.insert(id.clone(), corpus[d].id.clone());
            records.push(Record {
                id,
                text: tokens.join(" "),
            });
            targets.push(d);
        }
        (records, qrels, targets)
    };
    let (queries, qrels, _) = make_queries("q", spec.num_queries, &mut rng);
    let (train_queries, train_qrels, train_targets) = make_queries("t", spec.num_train_queries, &mut rng);
    let pairs = train_queries
        .iter()
        .zip(&train_targets)
        .map(|(q, &d)| (q.text.clone(), corpus[d].text.clone()))
        .collect();
    Ok(SynthData {
        corpus,
        queries,
        qrels,
        train_queries,
        train_qrels,
        pairs,
        doc_topics,
        keywords,
    })
}

impl SynthData {
    pub fn dataset(&self, name: &str) -> Dataset {
        Dataset {
            name: name.to_string(),
            doc_ids: self.corpus.iter().map(|r| r.id.clone()).collect(),
            docs: self.corpus.iter().map(|r| r.text.clone()).collect(),
            query_ids: self.queries.iter().map(|r| r.id.clone()).collect(),
            queries: self.queries.iter().map(|r| r.text.clone()).collect(),
            qrels: self.qrels.clone(),
        }
    }

    /// Writes `corpus.jsonl`, `queries.jsonl`, `qrels.tsv`,
    /// `train_queries.jsonl`, `train_qrels.tsv` and `pairs.tsv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, header: &[String]) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(dir.join("corpus.jsonl"), &self.corpus, header)?;
        write_jsonl(dir.join("queries.jsonl"), &self.queries, header)?;
        self.qrels.save(dir.join("qrels.tsv"), header)?;
        write_jsonl(dir.join("train_queries.jsonl"), &self.train_queries, header)?;
        self.train_qrels.save(dir.join("train_qrels.tsv"), header)?;
        write_pairs(dir.join("pairs.tsv"), &self.pairs, header)
    }
}

/// Loads an evaluation dataset from `corpus.jsonl`, `queries.jsonl` and `qrels.tsv`.
pub fn load_dataset(dir: impl AsRef<Path>, name: &str) -> Result<Dataset> {
    let dir = dir.as_ref();
    let corpus = read_jsonl(dir.join("corpus.jsonl"))?;
    let queries = read_jsonl(dir.join("queries.jsonl"))?;
    Ok(Dataset {
        name: name.to_string(),
        doc_ids: corpus.iter().map(|r| r.id.clone()).collect(),
        docs: corpus.into_iter().map(|r| r.text).collect(),
        query_ids: queries.iter().map(|r| r.id.clone()).collect(),
        queries: queries.into_iter().map(|r| r.text).collect(),
        qrels: Qrels::load(dir.join("qrels.tsv"))?,
    })
}

/// Frequency-ranked vocabulary with specials at ids 0–3.
///
/// When every distinct word fits, the vocabulary is the specials plus all
/// words by descending count (ties alphabetical). Otherwise a quarter of the
/// budget goes to subword pieces: word-initial prefixes and `##` continuation
/// pieces of up to three characters, harvested from the words that did not
/// fit and ranked by how often they occur. Whatever still cannot be covered
/// maps to `[UNK]`.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], size: usize) -> Result<Vocab> {
    if size < 5 {
        return Err(Error::Config("vocabulary size must be at least 5".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for t in texts {
        for w in basic_tokenize(t.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyInput("no words to build a vocabulary from".into()));
    }
    let specials = [PAD, UNK, CLS, SEP];
    counts.retain(|w, _| !specials.contains(&w.as_str()));
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let budget = size - specials.len();
    let mut tokens: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
    if ranked.len() <= budget {
        tokens.extend(ranked.into_iter().map(|(w, _)| w));
        return Vocab::from_tokens(tokens);
    }
    let piece_budget = budget / 4;
    let word_budget = budget - piece_budget;
    let (kept, dropped) = ranked.split_at(word_budget);
    tokens.extend(kept.iter().map(|(w, _)| w.clone()));

    let mut pieces: BTreeMap<String, u64> = BTreeMap::new();
    for (w, c) in dropped {
        let chars: Vec<char> = w.chars().collect();
        for len in 1..=3.min(chars.len()) {
            *pieces.entry(chars[..len].iter().collect()).or_default() += c;
        }
        for start in 1..chars.len() {
            for len in 1..=3.min(chars.len() - start) {
                let p: String = chars[start..start + len].iter().collect();
                *pieces.entry(format!("##{p}")).or_default() += c;
            }
        }
    }
    let present: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    let mut pieces: Vec<(String, u64)> = pieces.into_iter().filter(|(p, _)| !present.contains(p)).collect();
    pieces.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    tokens.extend(pieces.into_iter().take(piece_budget).map(|(p, _)| p));
    Vocab::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bm25::Bm25Index;
    use crate::tokenizer::wordpiece_tokenize;
    use std::collections::HashSet;

    fn small() -> SynthSpec {
        SynthSpec {
            topics: 5,
            keywords_per_topic: 10,
            corpus_size: 200,
            num_queries: 30,
            num_train_queries: 20,
            noise_words: 20,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noise_free_queries_share_keywords_only_with_their_topic() {
        let spec = SynthSpec {
            topics: 2,
            noise_ratio: 0.0,
            ..small()
        };
        let data = synth_data(&spec).unwrap();
        let topic_of: HashMap<&str, usize> = data
            .keywords
            .iter()
            .enumerate()
            .flat_map(|(t, ks)| ks.iter().map(move |k| (k.as_str(), t)))
            .collect();
        for q in &data.queries {
            let doc_id = data.qrels.relevant(&q.id).unwrap().iter().next().unwrap();
            let d: usize = doc_id[1..].parse().unwrap();
            let qw: HashSet<&str> = q.text.split(' ').collect();
            let dw: HashSet<&str> = data.corpus[d].text.split(' ').collect();
            assert!(qw.intersection(&dw).count() >= 1);
            for (other, doc) in data.corpus.iter().enumerate() {
                if data.doc_topics[other] != data.doc_topics[d] {
                    assert!(doc.text.split(' ').all(|w| !qw.contains(w)));
                }
            }
            assert!(qw.iter().all(|w| topic_of[w] == data.doc_topics[d]));
        }
    }

    #[test]
    fn same_seed_same_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_data(&small()).unwrap().write(a.path(), &["seed=0".into()]).unwrap();
        synth_data(&small()).unwrap().write(b.path(), &["seed=0".into()]).unwrap();
        for f in ["corpus.jsonl", "queries.jsonl", "qrels.tsv", "pairs.tsv", "train_qrels.tsv"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        let back = load_dataset(a.path(), "x").unwrap();
        assert_eq!(back.docs.len(), 200);
        assert_eq!(read_pairs(a.path().join("pairs.tsv")).unwrap().len(), 20);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        for spec in [
            SynthSpec { topics: 1, ..small() },
            SynthSpec { noise_ratio: 1.0, ..small() },
            SynthSpec { doc_keywords: 11, ..small() },
            SynthSpec { doc_len: (3, 8), ..small() },
        ] {
            assert!(matches!(synth_data(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn bm25_recovers_noise_free_targets() {
        // Same docs-per-topic density as the default 5,000-document benchmark.
        let spec = SynthSpec {
            noise_ratio: 0.0,
            topics: 20,
            corpus_size: 1000,
            num_queries: 100,
            num_train_queries: 0,
            ..SynthSpec::default()
        };
        for seed in 0..3 {
            let data = synth_data(&SynthSpec { seed, ..spec.clone() }).unwrap();
            let texts: Vec<&str> = data.corpus.iter().map(|r| r.text.as_str()).collect();
            let idx = Bm25Index::build(&texts).unwrap();
            let rankings: Vec<(String, Vec<String>)> = data
                .queries
                .iter()
                .map(|q| (q.id.clone(), idx.top_k(&q.text, 10).iter().map(|(d, _)| format!("d{d}")).collect()))
                .collect();
            let hits = crate::eval::hits_at_k(&rankings, &data.qrels, 10).unwrap();
            assert!(hits >= 0.9, "seed {seed}: {hits}");
        }
    }

    #[test]
    fn vocab_examples() {
        let v = build_vocab(&["hello hello"], 100).unwrap();
        assert_eq!(v.tokens(), &[PAD, UNK, CLS, SEP, "hello"]);

        let texts = ["aa aa aa bb bb cc dd"];
        let v = build_vocab(&texts, 7).unwrap();
        assert!(v.id("aa").is_some() && v.id("bb").is_some());
        assert!(v.id("dd").is_none());
        assert_eq!(v.len(), 7);
        assert_eq!(build_vocab(&texts, 7).unwrap().tokens(), v.tokens());
        assert!(build_vocab::<&str>(&[], 10).is_err());
    }

    #[test]
    fn pieces_cover_dropped_words() {
        let texts = ["kabalo kabalo kabalo miteru miteru sokani sokalo kabani"];
        let v = build_vocab(&texts, 8).unwrap();
        assert_eq!(v.len(), 8);
        assert!(v.id("sokani").is_none());
        assert!(v.tokens().iter().any(|t| t.starts_with("##")));
        let pieces = wordpiece_tokenize("sokani", &v);
        assert!(pieces.len() > 1 || pieces == [UNK], "{pieces:?}");
    }
}
