//! Retrieval metrics, layer sweeps, paired t-tests and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SentenceEncoder;
use crate::retrieval::{EmbeddingIndex, Provenance};

/// Relevance judgments: query id → relevant doc ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    map: BTreeMap<String, BTreeSet<String>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: impl Into<String>, doc: impl Into<String>) {
        self.map.entry(query.into()).or_default().insert(doc.into());
    }

    pub fn relevant(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.map.get(query)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.map.iter()
    }

    /// Reads `query_id<TAB>doc_id<TAB>relevance` lines; rows with relevance
    /// ≤ 0 are ignored. A first line starting with `query_id` is a header.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut q = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("query_id")) {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Format(format!("{}:{}: expected 3 tab-separated columns", path.display(), n + 1)));
            }
            let rel: f64 = cols[2]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("{}:{}: bad relevance `{}`", path.display(), n + 1, cols[2])))?;
            if rel > 0.0 {
                q.insert(cols[0], cols[1]);
            }
        }
        Ok(q)
    }

    pub fn save(&self, path: impl AsRef<Path>, header: &[String]) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for h in header {
            writeln!(out, "# {h}").unwrap();
        }
        for (q, docs) in &self.map {
            for d in docs {
                writeln!(out, "{q}\t{d}\t1").unwrap();
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Drop a retrieved doc whose id equals the query id.
    pub exclude_self: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hits: f64,
    pub mrr: f64,
    /// Judged queries that contributed.
    pub n: usize,
}

/// Hits@k and MRR@k over ranked doc ids per query.
///
/// Queries without judgments are dropped (logged once); an empty remainder
/// is an error.
pub fn evaluate(rankings: &[(String, Vec<String>)], qrels: &Qrels, k: usize, opts: EvalOptions) -> Result<Metrics> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut hits = 0.0;
    let mut rr = 0.0;
    let mut n = 0usize;
    let mut dropped = 0usize;
    for (qid, docs) in rankings {
        let Some(relevant) = qrels.relevant(qid).filter(|r| !r.is_empty()) else {
            dropped += 1;
            continue;
        };
        n += 1;
        let first = docs
            .iter()
            .filter(|d| !(opts.exclude_self && *d == qid))
            .take(k)
            .position(|d| relevant.contains(d));
        if let Some(pos) = first {
            hits += 1.0;
            rr += 1.0 / (pos + 1) as f64;
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} queries without relevance judgments");
    }
    if n == 0 {
        return Err(Error::EmptyInput("no judged queries to evaluate".into()));
    }
    Ok(Metrics {
        hits: hits / n as f64,
        mrr: rr / n as f64,
        n,
    })
}

pub fn hits_at_k(rankings: &[(String, Vec<String>)], qrels: &Qrels, k: usize) -> Result<f64> {
    evaluate(rankings, qrels, k, EvalOptions::default()).map(|m| m.hits)
}

pub fn mrr_at_k(rankings: &[(String, Vec<String>)], qrels: &Qrels, k: usize) -> Result<f64> {
    evaluate(rankings, qrels, k, EvalOptions::default()).map(|m| m.mrr)
}

/// Texts and judgments for one retrieval task.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub name: String,
    pub doc_ids: Vec<String>,
    pub docs: Vec<String>,
    pub query_ids: Vec<String>,
    pub queries: Vec<String>,
    pub qrels: Qrels,
}

impl Dataset {
    /// The first `n` queries (all when `n` is `None` or too large).
    pub fn with_query_sample(&self, n: Option<usize>) -> Dataset {
        let n = n.unwrap_or(usize::MAX).min(self.queries.len());
        Dataset {
            query_ids: self.query_ids[..n].to_vec(),
            queries: self.queries[..n].to_vec(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub hits: f64,
    pub mrr: f64,
}

/// Retrieval quality of the embeddings read out at every hidden-state index.
///
/// Documents and queries are embedded once with all layers captured; the
/// encoder's mode decides single encoding (dual encoder) or self-pairing
/// (cross encoder).
pub fn layer_sweep(encoder: &SentenceEncoder, data: &Dataset, k: usize) -> Result<Vec<SweepRow>> {
    let doc_refs: Vec<&str> = data.docs.iter().map(String::as_str).collect();
    let query_refs: Vec<&str> = data.queries.iter().map(String::as_str).collect();
    let named = |ids: &[String], r: Vec<Result<Vec<Vec<f32>>>>, what: &str| {
        r.into_iter()
            .zip(ids)
            .map(|(v, id)| v.map_err(|e| Error::Validation(format!("failed to embed {what} {id}: {e}"))))
            .collect::<Result<Vec<_>>>()
    };
    let docs = named(&data.doc_ids, encoder.embed_batch_all_layers(&doc_refs)?, "document")?;
    let queries = named(&data.query_ids, encoder.embed_batch_all_layers(&query_refs)?, "query")?;
    let mut rows = Vec::with_capacity(encoder.num_layers() + 1);
    for layer in 0..=encoder.num_layers() {
        let vectors = docs.iter().map(|d| d[layer].clone()).collect();
        let index = EmbeddingIndex::from_vectors(
            data.doc_ids.clone(),
            vectors,
            Provenance {
                layer,
                ..Provenance::default()
            },
        )?;
        let q: Vec<Vec<f32>> = queries.iter().map(|v| v[layer].clone()).collect();
        let results = index.search_many(&q, k)?;
        let rankings: Vec<(String, Vec<String>)> = data
            .query_ids
            .iter()
            .zip(results)
            .map(|(qid, r)| (qid.clone(), r.docs().iter().map(|&d| index.id(d).to_string()).collect()))
            .collect();
        let m = evaluate(&rankings, &data.qrels, k, EvalOptions::default())?;
        rows.push(SweepRow {
            layer,
            hits: m.hits,
            mrr: m.mrr,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-tailed.
    pub p: f64,
    pub n: usize,
}

/// Two-tailed paired t-test of `a` against `b`.
///
/// All-zero differences give `t = 0, p = 1`; constant non-zero differences
/// have no variance to test against and are rejected.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Validation("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&x| x == 0.0) {
        return Ok(TTest { t: 0.0, p: 1.0, n });
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::Validation("differences have zero variance; t is undefined".into()));
    }
    let t = mean / (sd / nf.sqrt());
    Ok(TTest {
        t,
        p: student_t_two_tailed(t, nf - 1.0),
        n,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    statrs::function::beta::beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Whether `value` would be marked as on par with `reference` under the
/// absolute (within 0.01) and relative (within 1%) readings.
pub fn on_par(value: f64, reference: f64) -> (bool, bool) {
    let gap = (value - reference).abs();
    (gap <= 0.01 + 1e-12, gap <= 0.01 * reference.abs() + 1e-12)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    pub stage: String,
    pub layer: usize,
    pub hits: f64,
    pub mrr: f64,
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    /// e.g. `DE-2 CE vs DE-2 Rand`.
    pub comparison: String,
    pub stage: String,
    pub metric: String,
    pub t: f64,
    pub p: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub rows: Vec<ReportRow>,
    pub significance: Vec<SignificanceRow>,
}

impl EvalReport {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn find(&self, dataset: &str, model: &str, stage: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.model == model && r.stage == stage)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if let Some(r) = self.rows.iter().find(|r| !unit(r.hits) || !unit(r.mrr)) {
            return Err(Error::Validation(format!("metric outside [0, 1] for {} / {}", r.dataset, r.model)));
        }
        if self.significance.iter().any(|s| !unit(s.p)) {
            return Err(Error::Validation("p-value outside [0, 1]".into()));
        }
        Ok(())
    }
}

fn header_lines(out: &mut Vec<u8>, header: &[String]) {
    for h in header {
        writeln!(out, "# {h}").unwrap();
    }
}

fn write_file(path: &Path, bytes: Vec<u8>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_field(s: &str) -> Result<&str> {
    if s.contains([',', '\n', '"']) {
        return Err(Error::Format(format!("report field `{s}` contains a CSV metacharacter")));
    }
    Ok(s)
}

/// Writes the main table: `dataset,model,stage,layer,hits@k,mrr@k,speedup`.
pub fn write_report(report: &EvalReport, path: impl AsRef<Path>, header: &[String]) -> Result<()> {
    report.validate()?;
    let mut out = Vec::new();
    header_lines(&mut out, header);
    writeln!(out, "dataset,model,stage,layer,hits@{k},mrr@{k},speedup", k = report.k).unwrap();
    for r in &report.rows {
        let speedup = r.speedup.map(|s| s.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            check_field(&r.dataset)?,
            check_field(&r.model)?,
            check_field(&r.stage)?,
            r.layer,
            r.hits,
            r.mrr,
            speedup
        )
        .unwrap();
    }
    write_file(path.as_ref(), out)
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty())
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("bad {what} `{s}`")))
}

/// Parses a file written by [`write_report`]; significance rows are not part
/// of that file and come back empty.
pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = data_lines(&text);
    let head = lines.next().ok_or_else(|| Error::Format("report has no header".into()))?;
    let cols: Vec<&str> = head.split(',').collect();
    let k = cols
        .get(4)
        .and_then(|c| c.strip_prefix("hits@"))
        .ok_or_else(|| Error::Format("unexpected report header".into()))?;
    let mut report = EvalReport::new(num(k, "k")?);
    for line in lines {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 7 {
            return Err(Error::Format(format!("report row `{line}` has {} columns", c.len())));
        }
        report.rows.push(ReportRow {
            dataset: c[0].into(),
            model: c[1].into(),
            stage: c[2].into(),
            layer: num(c[3], "layer")?,
            hits: num(c[4], "hits")?,
            mrr: num(c[5], "mrr")?,
            speedup: if c[6].is_empty() { None } else { Some(num(c[6], "speedup")?) },
        });
    }
    Ok(report)
}

/// `comparison,stage,metric,t,p,n`.
pub fn write_significance(rows: &[SignificanceRow], path: impl AsRef<Path>, header: &[String]) -> Result<()> {
    let mut out = Vec::new();
    header_lines(&mut out, header);
    writeln!(out, "comparison,stage,metric,t,p,n").unwrap();
    for s in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            check_field(&s.comparison)?,
            check_field(&s.stage)?,
            check_field(&s.metric)?,
            s.t,
            s.p,
            s.n
        )
        .unwrap();
    }
    write_file(path.as_ref(), out)
}

/// `layer,hits@k,mrr@k`, one row per hidden-state index.
pub fn write_sweep(rows: &[SweepRow], k: usize, path: impl AsRef<Path>, header: &[String]) -> Result<()> {
    let mut out = Vec::new();
    header_lines(&mut out, header);
    writeln!(out, "layer,hits@{k},mrr@{k}").unwrap();
    for r in rows {
        writeln!(out, "{},{},{}", r.layer, r.hits, r.mrr).unwrap();
    }
    write_file(path.as_ref(), out)
}

pub fn read_sweep(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    data_lines(&text)
        .skip(1)
        .map(|line| {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 3 {
                return Err(Error::Format(format!("sweep row `{line}` has {} columns", c.len())));
            }
            Ok(SweepRow {
                layer: num(c[0], "layer")?,
                hits: num(c[1], "hits")?,
                mrr: num(c[2], "mrr")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranking(q: &str, docs: &[&str]) -> (String, Vec<String>) {
        (q.into(), docs.iter().map(|d| d.to_string()).collect())
    }

    fn three_queries() -> (Vec<(String, Vec<String>)>, Qrels) {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "a");
        qrels.insert("q2", "b");
        qrels.insert("q3", "c");
        let r = vec![
            ranking("q1", &["a", "x", "y"]),
            ranking("q2", &["x", "y", "b"]),
            ranking("q3", &["x", "y", "z"]),
        ];
        (r, qrels)
    }

    #[test]
    fn definitional_examples() {
        let (r, qrels) = three_queries();
        assert!((hits_at_k(&r, &qrels, 10).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((mrr_at_k(&r, &qrels, 10).unwrap() - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(hits_at_k(&r[..1], &qrels, 1).unwrap(), 1.0);
        assert_eq!(hits_at_k(&r[2..], &qrels, 10).unwrap(), 0.0);
    }

    #[test]
    fn unjudged_queries_are_dropped_and_empty_is_an_error() {
        let (mut r, qrels) = three_queries();
        r.push(ranking("q9", &["a"]));
        assert_eq!(evaluate(&r, &qrels, 10, EvalOptions::default()).unwrap().n, 3);
        assert!(matches!(hits_at_k(&r[3..], &qrels, 10), Err(Error::EmptyInput(_))));
        assert!(matches!(hits_at_k(&[], &qrels, 10), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn self_match_exclusion() {
        let mut qrels = Qrels::new();
        qrels.insert("q", "d");
        let r = vec![ranking("q", &["q", "d"])];
        let on = EvalOptions { exclude_self: true };
        assert_eq!(evaluate(&r, &qrels, 1, EvalOptions::default()).unwrap().hits, 0.0);
        assert_eq!(evaluate(&r, &qrels, 1, on).unwrap().hits, 1.0);
    }

    /// Two-tailed p by integrating the unnormalized t density after mapping
    /// `[0, ∞)` onto `[0, 1)` with `x = u / (1 − u)`.
    fn p_by_quadrature(t: f64, df: f64) -> f64 {
        let g = |u: f64| {
            if u >= 1.0 {
                return 0.0;
            }
            let x = u / (1.0 - u);
            (1.0 + x * x / df).powf(-(df + 1.0) / 2.0) / ((1.0 - u) * (1.0 - u))
        };
        let simpson = |a: f64, b: f64| {
            let n = 200_000;
            let h = (b - a) / n as f64;
            let mut s = g(a) + g(b);
            for i in 1..n {
                s += g(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let ut = t.abs() / (1.0 + t.abs());
        simpson(ut, 1.0) / simpson(0.0, 1.0)
    }

    #[test]
    fn t_test_anchor() {
        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]).unwrap();
        assert!((r.t - 3.8730).abs() < 1e-3);
        assert_eq!(r.n, 4);
        assert!((r.p - 0.0305).abs() < 1e-3);
        assert!((r.p - p_by_quadrature(r.t, 3.0)).abs() < 1e-6);
    }

    #[test]
    fn t_test_edge_cases() {
        let a = [0.3, 0.5, 0.9];
        let same = paired_t_test(&a, &a).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        let b = [0.1, 0.6, 0.2];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert_eq!(ab.p, ba.p);
        assert!(paired_t_test(&[1.0, 2.0], &[0.0, 1.0]).is_err());
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn p_value_matches_quadrature_grid() {
        for df in [1.0, 2.0, 3.0, 7.0, 20.0, 50.0] {
            for t in [0.0, 0.3, 1.0, 2.5, 5.0, 10.0] {
                let p = student_t_two_tailed(t, df);
                assert!((p - p_by_quadrature(t, df)).abs() < 1e-4, "t={t} df={df}");
            }
        }
    }

    #[test]
    fn report_round_trip_and_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_report(&EvalReport::new(10), &path, &["seed=1".into()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# seed=1\ndataset,model,stage,layer,hits@10,mrr@10,speedup\n");

        let mut rep = EvalReport::new(10);
        for model in ["Baseline", "DE-2 CE"] {
            for stage in ["retrieve", "retrieve+rerank"] {
                rep.rows.push(ReportRow {
                    dataset: "synth-0".into(),
                    model: model.into(),
                    stage: stage.into(),
                    layer: 2,
                    hits: 0.1 + 1.0 / 3.0,
                    mrr: std::f64::consts::PI / 10.0,
                    speedup: (model == "DE-2 CE").then_some(4.123456789),
                });
            }
        }
        write_report(&rep, &path, &[]).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(back.rows.len(), 4);
        assert_eq!(back, rep);
    }

    #[test]
    fn on_par_flags() {
        assert_eq!(on_par(0.505, 0.5), (true, true));
        assert_eq!(on_par(0.1095, 0.1), (true, false));
        assert_eq!(on_par(0.8, 0.9), (false, false));
    }

    /// Independent re-derivation: rank of the first relevant doc by linear scan.
    fn reference(r: &[(String, Vec<String>)], qrels: &Qrels, k: usize) -> (f64, f64) {
        let mut n = 0.0;
        let (mut h, mut m) = (0.0, 0.0);
        for (q, docs) in r {
            let Some(rel) = qrels.relevant(q) else { continue };
            n += 1.0;
            for (i, d) in docs.iter().enumerate() {
                if i >= k {
                    break;
                }
                if rel.contains(d) {
                    h += 1.0;
                    m += 1.0 / (i as f64 + 1.0);
                    break;
                }
            }
        }
        (h / n, m / n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn metrics_match_reference(
            lists in prop::collection::vec(
                (prop::collection::vec(0u8..30, 0..25), prop::collection::btree_set(0u8..30, 1..4)),
                1..20,
            ),
            k in 1usize..30,
        ) {
            let mut qrels = Qrels::new();
            let mut rankings = Vec::new();
            for (i, (docs, rel)) in lists.iter().enumerate() {
                let qid = format!("q{i}");
                for d in rel {
                    qrels.insert(qid.clone(), format!("d{d}"));
                }
                let mut seen = BTreeSet::new();
                let docs: Vec<String> = docs.iter().filter(|d| seen.insert(**d)).map(|d| format!("d{d}")).collect();
                rankings.push((qid, docs));
            }
            let m = evaluate(&rankings, &qrels, k, EvalOptions::default()).unwrap();
            let (h, r) = reference(&rankings, &qrels, k);
            prop_assert_eq!(m.hits, h);
            prop_assert_eq!(m.mrr, r);
            prop_assert!(m.mrr <= m.hits);
            let bigger = evaluate(&rankings, &qrels, k + 1, EvalOptions::default()).unwrap();
            prop_assert!(bigger.hits >= m.hits && bigger.mrr >= m.mrr);
        }
    }
}
