use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_norm_or_bias, EncoderWeights};
use crate::numkernel::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, not applied to biases or layer-norm parameters.
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one pair per weight tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar = f32> {
    pub first: Vec<Matrix<T>>,
    pub second: Vec<Matrix<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(weights: &EncoderWeights<T>) -> Self {
        let zeros: Vec<Matrix<T>> = weights
            .named_tensors()
            .into_iter()
            .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update at learning rate `lr`.
pub fn adamw_step<T: Scalar>(
    weights: &mut EncoderWeights<T>,
    grads: &EncoderWeights<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    params: &AdamWParams,
) -> Result<()> {
    let grad_tensors = grads.named_tensors();
    for (name, g) in &grad_tensors {
        if !g.all_finite() {
            let bad = g.data().iter().filter(|x| !x.is_finite()).count();
            return Err(Error::Numeric(format!(
                "gradient of {name} has {bad} non-finite entries at step {}",
                state.step + 1
            )));
        }
    }
    let mut tensors = weights.named_tensors_mut();
    if tensors.len() != grad_tensors.len() || tensors.len() != state.first.len() {
        return Err(Error::Shape("optimizer state does not match the weights".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(params.beta1), T::lit(params.beta2));
    let c1 = T::lit(1.0 - params.beta1.powi(t));
    let c2 = T::lit(1.0 - params.beta2.powi(t));
    let eps = T::lit(params.eps);
    let lr_t = T::lit(lr);
    for (i, ((name, w), (_, g))) in tensors.iter_mut().zip(&grad_tensors).enumerate() {
        let decay = if is_norm_or_bias(name) {
            T::zero()
        } else {
            T::lit(params.weight_decay)
        };
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((wv, &gv), mv), vv) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *wv -= lr_t * (m_hat / (v_hat.sqrt() + eps) + decay * *wv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Role};

    fn weights() -> EncoderWeights<f32> {
        let cfg = ModelConfig {
            num_layers: 1,
            hidden: 4,
            heads: 2,
            ff: 8,
            vocab_size: 6,
            max_positions: 4,
            ..ModelConfig::default()
        };
        EncoderWeights::init_random(&cfg, 0, Role::DualEncoder).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_leaves_weights_unchanged() {
        let mut w = weights();
        let before = w.clone();
        let g = w.zeros_like();
        let mut s = OptimizerState::new(&w);
        let p = AdamWParams {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut w, &g, &mut s, 1e-3, &p).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut w = weights();
        let before = w.clone();
        let mut g = w.zeros_like();
        g.word.data_mut().iter_mut().enumerate().for_each(|(i, x)| {
            *x = if i % 2 == 0 { 0.3 } else { -2.0 };
        });
        let mut s = OptimizerState::new(&w);
        let p = AdamWParams {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut w, &g, &mut s, 1e-2, &p).unwrap();
        for i in 0..w.word.len() {
            let delta = w.word.data()[i] - before.word.data()[i];
            let expected = if i % 2 == 0 { -1e-2 } else { 1e-2 };
            assert!((delta - expected).abs() < 1e-6, "{i}: {delta}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut w = weights();
        let mut g = w.zeros_like();
        g.layers[0].ffn_in_w.set(0, 0, f32::NAN);
        let mut s = OptimizerState::new(&w);
        let err = adamw_step(&mut w, &g, &mut s, 1e-3, &AdamWParams::default()).unwrap_err();
        assert!(err.to_string().contains("layers.0.ffn.in.weight"));
    }
}
