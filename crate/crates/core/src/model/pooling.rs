use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Scalar};
use crate::tokenizer::Encoding;

/// Which positions enter a mean-pooled sentence embedding.
///
/// `[SEP]` and `[PAD]` never do. `include_cls` adds the `[CLS]` row whenever
/// the sentence has at least one content token. `both_copies` controls
/// whether a paired encoding pools segment 1 as well as segment 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolingPolicy {
    pub include_cls: bool,
    pub both_copies: bool,
}

impl Default for PoolingPolicy {
    fn default() -> Self {
        Self {
            include_cls: true,
            both_copies: true,
        }
    }
}

/// Positions averaged by [`pool_mean`], in increasing order.
pub fn eligible_positions(enc: &Encoding, policy: PoolingPolicy) -> Result<Vec<usize>> {
    let content: Vec<usize> = (0..enc.len())
        .filter(|&p| enc.attention_mask[p] == 1 && enc.special_mask[p] == 0)
        .filter(|&p| policy.both_copies || enc.segment_ids[p] == 0)
        .collect();
    if content.is_empty() {
        return Err(Error::EmptyInput(
            "no eligible tokens to pool (sentence is empty after tokenization)".into(),
        ));
    }
    let has_cls = enc.special_mask.first() == Some(&1) && enc.attention_mask.first() == Some(&1);
    let mut out = Vec::with_capacity(content.len() + 1);
    if policy.include_cls && has_cls {
        out.push(0);
    }
    out.extend(content);
    Ok(out)
}

/// Mean of the hidden rows at the eligible positions of `enc`.
pub fn pool_mean<T: Scalar>(hidden: &Matrix<T>, enc: &Encoding, policy: PoolingPolicy) -> Result<Vec<T>> {
    if hidden.rows() != enc.len() {
        return Err(Error::Shape(format!(
            "pool_mean: {} hidden rows for an encoding of length {}",
            hidden.rows(),
            enc.len()
        )));
    }
    let positions = eligible_positions(enc, policy)?;
    Ok(mean_rows(hidden, 0, &positions))
}

pub(crate) fn mean_rows<T: Scalar>(m: &Matrix<T>, offset: usize, positions: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for &p in positions {
        for (o, &x) in out.iter_mut().zip(m.row(offset + p)) {
            *o += x;
        }
    }
    let n = T::from_usize(positions.len()).unwrap();
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// Spreads the gradient of a mean-pooled vector back over its rows.
pub(crate) fn mean_rows_backward<T: Scalar>(d_pooled: &[T], offset: usize, positions: &[usize], d_hidden: &mut Matrix<T>) {
    let n = T::from_usize(positions.len()).unwrap();
    for &p in positions {
        for (o, &g) in d_hidden.row_mut(offset + p).iter_mut().zip(d_pooled) {
            *o += g / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{encode_pair, encode_single, Vocab};

    fn vocab() -> Vocab {
        Vocab::from_tokens(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "x", "y"]).unwrap()
    }

    fn distinct_rows(n: usize, d: usize) -> Matrix<f64> {
        Matrix::from_fn(n, d, |i, j| (i * 10 + j) as f64)
    }

    #[test]
    fn cls_token_and_nothing_else() {
        let enc = encode_single("x", &vocab(), 6).unwrap();
        let h = distinct_rows(6, 3);
        let pooled = pool_mean(&h, &enc, PoolingPolicy::default()).unwrap();
        assert_eq!(pooled, vec![5.0, 6.0, 7.0]);
    }

    #[test]
    fn single_token_without_cls_is_that_row() {
        let enc = encode_single("x", &vocab(), 6).unwrap();
        let h = distinct_rows(6, 3);
        let policy = PoolingPolicy {
            include_cls: false,
            ..Default::default()
        };
        assert_eq!(pool_mean(&h, &enc, policy).unwrap(), h.row(1).to_vec());
    }

    #[test]
    fn identical_rows_pool_to_themselves() {
        let enc = encode_single("x y", &vocab(), 5).unwrap();
        let h = Matrix::<f64>::from_fn(5, 2, |_, j| j as f64 + 0.5);
        assert_eq!(pool_mean(&h, &enc, PoolingPolicy::default()).unwrap(), vec![0.5, 1.5]);
    }

    #[test]
    fn self_pair_pools_both_copies() {
        let enc = encode_pair("x", "x", &vocab(), 8, false).unwrap();
        assert_eq!(eligible_positions(&enc, PoolingPolicy::default()).unwrap(), vec![0, 1, 3]);
        let one_copy = PoolingPolicy {
            both_copies: false,
            ..Default::default()
        };
        assert_eq!(eligible_positions(&enc, one_copy).unwrap(), vec![0, 1]);
    }

    #[test]
    fn empty_sentence_has_nothing_to_pool() {
        let enc = encode_pair("", "", &vocab(), 6, true).unwrap();
        let h = distinct_rows(6, 2);
        assert!(matches!(
            pool_mean(&h, &enc, PoolingPolicy::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn row_count_must_match() {
        let enc = encode_single("x", &vocab(), 6).unwrap();
        assert!(matches!(
            pool_mean(&distinct_rows(5, 2), &enc, PoolingPolicy::default()),
            Err(Error::Shape(_))
        ));
    }
}
