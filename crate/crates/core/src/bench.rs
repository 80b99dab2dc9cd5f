//! Wall-clock throughput of the full embedding path and speedup ratios.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::SentenceEncoder;

pub const MIN_RUNS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub model: String,
    pub corpus_size: usize,
    /// SHA-256 of the corpus texts, so results on different corpora are not compared.
    pub corpus_digest: String,
    pub batch_size: usize,
    pub threads: usize,
    /// Timed runs after the discarded warmup.
    pub run_seconds: Vec<f64>,
    pub median_seconds: f64,
    pub sentences_per_sec: f64,
}

fn digest(corpus: &[&str]) -> String {
    let mut h = Sha256::new();
    for s in corpus {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times full-corpus embedding passes (tokenization, forward, pooling) at
/// the encoder's last layer, single-threaded. One warmup pass is discarded
/// and the median of `runs` further passes is reported.
pub fn time_embedding(model: &str, encoder: &SentenceEncoder, corpus: &[&str], runs: usize) -> Result<BenchResult> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("benchmark corpus is empty".into()));
    }
    if runs < MIN_RUNS {
        return Err(Error::Config(format!("need at least {MIN_RUNS} timed runs, got {runs}")));
    }
    let layer = encoder.num_layers();
    let mut run_seconds = Vec::with_capacity(runs);
    for i in 0..=runs {
        let start = Instant::now();
        let out = encoder.embed_batch(corpus, layer)?;
        let elapsed = start.elapsed().as_secs_f64();
        if let Some(Err(e)) = out.into_iter().find(Result::is_err) {
            return Err(e);
        }
        if i > 0 {
            run_seconds.push(elapsed);
        }
    }
    let median_seconds = median(&run_seconds);
    Ok(BenchResult {
        model: model.to_string(),
        corpus_size: corpus.len(),
        corpus_digest: digest(corpus),
        batch_size: encoder.options.batch_size,
        threads: 1,
        median_seconds,
        sentences_per_sec: corpus.len() as f64 / median_seconds,
        run_seconds,
    })
}

/// `base.median / fast.median`; both must share corpus, batch size and threads.
pub fn speedup(base: &BenchResult, fast: &BenchResult) -> Result<f64> {
    if base.corpus_size != fast.corpus_size || base.corpus_digest != fast.corpus_digest {
        return Err(Error::InvalidComparison("benchmarks ran on different corpora".into()));
    }
    if base.batch_size != fast.batch_size {
        return Err(Error::InvalidComparison(format!(
            "batch sizes differ ({} vs {})",
            base.batch_size, fast.batch_size
        )));
    }
    if base.threads != fast.threads {
        return Err(Error::InvalidComparison("thread counts differ".into()));
    }
    Ok(base.median_seconds / fast.median_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(median: f64) -> BenchResult {
        BenchResult {
            model: "m".into(),
            corpus_size: 10,
            corpus_digest: "x".into(),
            batch_size: 8,
            threads: 1,
            run_seconds: vec![median; 5],
            median_seconds: median,
            sentences_per_sec: 10.0 / median,
        }
    }

    #[test]
    fn speedup_arithmetic() {
        assert_eq!(speedup(&result(1.7), &result(1.7)).unwrap(), 1.0);
        assert!((speedup(&result(10.30), &result(2.00)).unwrap() - 5.15).abs() < 1e-12);
        let (a, b) = (result(3.3), result(0.7));
        assert!((speedup(&a, &b).unwrap() * speedup(&b, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mismatches_are_rejected() {
        let a = result(1.0);
        let b = BenchResult { batch_size: 16, ..result(1.0) };
        let c = BenchResult { corpus_digest: "y".into(), ..result(1.0) };
        assert!(matches!(speedup(&a, &b), Err(Error::InvalidComparison(_))));
        assert!(matches!(speedup(&a, &c), Err(Error::InvalidComparison(_))));
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
