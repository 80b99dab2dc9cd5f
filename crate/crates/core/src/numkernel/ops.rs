use crate::error::{Error, Result};

use super::matrix::{Matrix, Scalar};

/// Additive attention-mask value for padded key positions.
pub const MASK_NEG: f64 = -1e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.matmul(b)
}

/// Returns `(dA, dB)` for `C = A·B` given `dC`.
pub fn matmul_backward<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    dc: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if dc.shape() != (a.rows(), b.cols()) {
        return Err(Error::Shape(format!(
            "matmul_backward: dC {:?} for {:?}·{:?}",
            dc.shape(),
            a.shape(),
            b.shape()
        )));
    }
    Ok((dc.matmul_nt(b)?, a.matmul_tn(dc)?))
}

pub fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    softmax_rows_in_place(&mut out);
    out
}

pub(crate) fn softmax_rows_in_place<T: Scalar>(x: &mut Matrix<T>) {
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward of `y = softmax_rows(x)`: `dx = y ⊙ (dy − rowsum(dy ⊙ y))`.
pub fn softmax_rows_backward<T: Scalar>(y: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, dyr) = (y.row(r), dy.row(r));
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &dv) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *o = yv * (dv - dot);
        }
    }
    dx
}

/// Saved activations of a layer-norm forward.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T: Scalar> {
    pub normalized: Matrix<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &Matrix<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Matrix<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape(format!(
            "layer_norm: gamma/beta of length {}/{} for {d} columns",
            gamma.len(),
            beta.len()
        )));
    }
    let n = T::from_usize(d).unwrap();
    let mut y = Matrix::zeros(x.rows(), d);
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        let xn = normalized.row_mut(r);
        for (o, &v) in xn.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        for (((o, &h), &g), &b) in y.row_mut(r).iter_mut().zip(normalized.row(r)).zip(gamma).zip(beta) {
            *o = h * g + b;
        }
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &[T],
    dy: &Matrix<T>,
) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let d = dy.cols();
    let n = T::from_usize(d).unwrap();
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..dy.rows() {
        let xhat = cache.normalized.row(r);
        let dyr = dy.row(r);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            dgamma[j] += dyr[j] * xhat[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
        }
        let inv = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv / n * (n * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Tanh-approximation GELU.
pub fn gelu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Scalar>(x: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    let (c, a, half, three) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5), T::lit(3.0));
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for ((o, &v), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        let t = (c * (v + a * v * v * v)).tanh();
        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
        *o = g * (half * (T::one() + t) + half * v * dt);
    }
    dx
}

/// Scaled dot-product attention for one head.
///
/// `mask` holds one additive value per key position ([`MASK_NEG`] at padding,
/// 0 elsewhere). Returns the output and the attention probabilities.
pub fn attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: Option<&[T]>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if let Some(m) = mask {
        if m.len() != k.rows() {
            return Err(Error::Shape(format!(
                "attention: mask of length {} for {} keys",
                m.len(),
                k.rows()
            )));
        }
    }
    let scale = T::one() / T::from_usize(q.cols()).unwrap().sqrt();
    let mut scores = q.matmul_nt(k)?;
    scores.scale(scale);
    if let Some(m) = mask {
        for r in 0..scores.rows() {
            for (s, &mv) in scores.row_mut(r).iter_mut().zip(m) {
                *s += mv;
            }
        }
    }
    softmax_rows_in_place(&mut scores);
    let out = scores.matmul(v)?;
    Ok((out, scores))
}

/// Returns `(dq, dk, dv)` given the probabilities saved by [`attention`].
pub fn attention_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    probs: &Matrix<T>,
    dout: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let scale = T::one() / T::from_usize(q.cols()).unwrap().sqrt();
    let dprobs = dout.matmul_nt(v)?;
    let dv = probs.matmul_tn(dout)?;
    let mut dscores = softmax_rows_backward(probs, &dprobs);
    dscores.scale(scale);
    let dq = dscores.matmul(k)?;
    let dk = dscores.matmul_tn(q)?;
    Ok((dq, dk, dv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_times_b_is_b() {
        let b = m(2, 3, &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]);
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn zeros_times_anything_is_zero() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::from_fn(3, 4, |i, j| (i * j) as f32 + 1.0);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, Matrix::zeros(2, 4));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_uniform_row() {
        let y = softmax_rows(&m(1, 3, &[0.0, 0.0, 0.0]));
        for &v in y.data() {
            assert_eq!(v, 1.0 / 3.0);
        }
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let y = softmax_rows(&Matrix::<f32>::from_vec(1, 2, vec![1000.0, 0.0]).unwrap());
        assert!(y.all_finite());
        assert_eq!(y.get(0, 0), 1.0);
        assert!(y.get(0, 1) < 1e-30);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_beta() {
        let x = m(1, 4, &[3.0; 4]);
        let (y, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-12).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let x = m(2, 3, &[1.0, 5.0, -2.0, 0.5, 0.25, 9.0]);
        let beta = [0.1, -0.2, 0.3];
        let (y, _) = layer_norm(&x, &[0.0; 3], &beta, 1e-12).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), &beta);
        }
    }

    #[test]
    fn gelu_anchors() {
        let y = gelu(&m(1, 2, &[0.0, 10.0]));
        assert_eq!(y.get(0, 0), 0.0);
        assert!((y.get(0, 1) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn single_position_attention_returns_value_row() {
        let q = m(1, 2, &[0.3, -1.0]);
        let k = m(1, 2, &[2.0, 0.5]);
        let v = m(1, 2, &[4.0, -7.0]);
        let (out, _) = attention(&q, &k, &v, None).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn equal_keys_average_unmasked_values() {
        let q = m(2, 2, &[0.3, -1.0, 2.0, 1.0]);
        let k = m(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let v = m(3, 2, &[1.0, 2.0, 3.0, 4.0, 100.0, 100.0]);
        let mask = [0.0, 0.0, MASK_NEG];
        let (out, probs) = attention(&q, &k, &v, Some(&mask)).unwrap();
        for r in 0..2 {
            assert!((out.get(r, 0) - 2.0).abs() < 1e-12);
            assert!((out.get(r, 1) - 3.0).abs() < 1e-12);
            assert!(probs.get(r, 2) < 1e-30);
        }
    }

    #[test]
    fn masked_weight_is_negligible_in_f32() {
        let q = Matrix::<f32>::from_vec(1, 2, vec![5.0, 5.0]).unwrap();
        let k = Matrix::<f32>::from_vec(2, 2, vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let v = Matrix::<f32>::from_vec(2, 2, vec![1.0, 1.0, 9.0, 9.0]).unwrap();
        let mask = [0.0f32, MASK_NEG as f32];
        let (_, probs) = attention(&q, &k, &v, Some(&mask)).unwrap();
        assert!(probs.get(0, 1) < 1e-30);
    }
}
