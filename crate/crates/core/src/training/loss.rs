use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Scalar};

/// Output of [`mnrl_loss`]: the loss and its gradients w.r.t. both inputs.
#[derive(Debug, Clone)]
pub struct MnrlOutput<T: Scalar> {
    pub loss: T,
    pub d_queries: Matrix<T>,
    pub d_candidates: Matrix<T>,
}

fn normalize_rows<T: Scalar>(m: &Matrix<T>, what: &str) -> Result<(Matrix<T>, Vec<T>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let norm = m.row(r).iter().map(|&x| x * x).sum::<T>().sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::Numeric(format!("{what} embedding {r} has norm {norm}")));
        }
        out.row_mut(r).iter_mut().for_each(|x| *x /= norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Gradient through `x̂ = x / ‖x‖`: `dx = (dx̂ − x̂ (x̂·dx̂)) / ‖x‖`.
fn normalize_rows_backward<T: Scalar>(unit: &Matrix<T>, norms: &[T], d_unit: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(unit.rows(), unit.cols());
    for r in 0..unit.rows() {
        let (u, du) = (unit.row(r), d_unit.row(r));
        let dot: T = u.iter().zip(du).map(|(&a, &b)| a * b).sum();
        for ((o, &ui), &dui) in out.row_mut(r).iter_mut().zip(u).zip(du) {
            *o = (dui - ui * dot) / norms[r];
        }
    }
    out
}

/// Multiple-negatives ranking loss.
///
/// Candidate `i` is the positive of query `i`; every other candidate (the
/// in-batch positives of other queries and all hard negatives) is a negative.
/// Scores are `scale · cos(q_i, c_j)` and the loss is the mean softmax
/// cross-entropy with target `i`.
pub fn mnrl_loss<T: Scalar>(queries: &Matrix<T>, candidates: &Matrix<T>, scale: T) -> Result<MnrlOutput<T>> {
    let b = queries.rows();
    if b == 0 || candidates.rows() < b || queries.cols() != candidates.cols() {
        return Err(Error::Shape(format!(
            "mnrl_loss: {:?} queries vs {:?} candidates",
            queries.shape(),
            candidates.shape()
        )));
    }
    let (qn, q_norms) = normalize_rows(queries, "query")?;
    let (cn, c_norms) = normalize_rows(candidates, "candidate")?;
    let mut scores = qn.matmul_nt(&cn)?;
    scores.scale(scale);

    let bt = T::from_usize(b).unwrap();
    let mut loss = T::zero();
    let mut d_scores = Matrix::zeros(b, candidates.rows());
    for i in 0..b {
        let row = scores.row(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        loss += max + sum.ln() - row[i];
        for (j, g) in d_scores.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - max).exp() / sum;
            *g = (p - if i == j { T::one() } else { T::zero() }) / bt;
        }
    }
    loss /= bt;

    d_scores.scale(scale);
    let d_qn = d_scores.matmul(&cn)?;
    let d_cn = d_scores.matmul_tn(&qn)?;
    Ok(MnrlOutput {
        loss,
        d_queries: normalize_rows_backward(&qn, &q_norms, &d_qn),
        d_candidates: normalize_rows_backward(&cn, &c_norms, &d_cn),
    })
}

/// Binary cross-entropy on a logit, `max(z,0) − z·y + ln(1 + e^{−|z|})`.
/// Returns `(loss, dloss/dlogit)`.
pub fn ce_pair_loss<T: Scalar>(logit: T, label: T) -> (T, T) {
    let z = logit;
    let loss = z.max(T::zero()) - z * label + (-z.abs()).exp().ln_1p();
    let sigmoid = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    (loss, sigmoid - label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_scores_give_log_candidate_count() {
        for (b, n) in [(2usize, 0usize), (4, 0), (4, 2)] {
            let c = b * (1 + n);
            let q = Matrix::<f64>::filled(b, 3, 1.0);
            let cands = Matrix::<f64>::filled(c, 3, 2.0);
            let out = mnrl_loss(&q, &cands, 20.0).unwrap();
            assert!((out.loss - (c as f64).ln()).abs() < 1e-6, "B={b} n={n}");
        }
    }

    #[test]
    fn separated_pairs_approach_zero_loss() {
        let q = Matrix::<f64>::identity(4);
        let out = mnrl_loss(&q, &q, 1000.0).unwrap();
        assert!(out.loss < 1e-12);
        let coarse = mnrl_loss(&q, &q, 5.0).unwrap();
        assert!(coarse.loss > out.loss);
    }

    #[test]
    fn zero_norm_embedding_is_rejected() {
        let q = Matrix::<f64>::zeros(2, 3);
        let c = Matrix::<f64>::filled(2, 3, 1.0);
        assert!(matches!(mnrl_loss(&q, &c, 20.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn mnrl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [0usize, 1] {
            let q = Matrix::<f64>::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
            let c = Matrix::<f64>::from_fn(2 * (1 + n), 4, |_, _| rng.random_range(-1.0..1.0));
            let out = mnrl_loss(&q, &c, 20.0).unwrap();
            let h = 1e-5;
            let fd = |m: &Matrix<f64>, which: usize| {
                let mut g = Matrix::zeros(m.rows(), m.cols());
                for i in 0..m.len() {
                    let mut p = m.clone();
                    p.data_mut()[i] += h;
                    let mut mm = m.clone();
                    mm.data_mut()[i] -= h;
                    let (lp, lm) = if which == 0 {
                        (mnrl_loss(&p, &c, 20.0).unwrap().loss, mnrl_loss(&mm, &c, 20.0).unwrap().loss)
                    } else {
                        (mnrl_loss(&q, &p, 20.0).unwrap().loss, mnrl_loss(&q, &mm, 20.0).unwrap().loss)
                    };
                    g.data_mut()[i] = (lp - lm) / (2.0 * h);
                }
                g
            };
            assert!(relative_error(&out.d_queries, &fd(&q, 0)) < 1e-5);
            assert!(relative_error(&out.d_candidates, &fd(&c, 1)) < 1e-5);
        }
    }

    #[test]
    fn bce_anchors() {
        let (l, _) = ce_pair_loss(0.0f64, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, d) = ce_pair_loss(20.0f32, 1.0);
        assert!(l.is_finite() && l < 1e-8 && d.abs() < 1e-8);
        let (l, _) = ce_pair_loss(-500.0f32, 1.0);
        assert!((l - 500.0).abs() < 1e-3);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        for z in [-3.0f64, -0.2, 0.0, 0.7, 4.0] {
            for y in [0.0, 1.0] {
                let h = 1e-6;
                let fd = (ce_pair_loss(z + h, y).0 - ce_pair_loss(z - h, y).0) / (2.0 * h);
                let (_, d) = ce_pair_loss(z, y);
                assert!((fd - d).abs() / d.abs().max(1e-12) < 1e-6, "z={z} y={y}");
            }
        }
    }
}
