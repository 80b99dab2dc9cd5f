//! Encoder forward and backward over a packed batch.
//!
//! Sequences are concatenated row-wise (only their non-pad prefix) so every
//! position-wise op runs as one large matrix product. Attention is evaluated
//! per sequence and head on the sequence's own rows, which is exactly
//! equivalent to masking the padding with an additive mask: masked keys get
//! weight `exp(-1e9) = 0` in either precision.

use crate::error::{Error, Result};
use crate::numkernel::{
    attention, attention_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, LayerNormCache, Matrix,
    Scalar,
};
use crate::tokenizer::Encoding;

use super::weights::{EncoderWeights, HeadWeights, LayerWeights};

/// Row layout of a packed batch.
#[derive(Debug, Clone)]
pub(crate) struct Packed {
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
    pub total: usize,
}

impl Packed {
    pub fn new(encs: &[&Encoding]) -> Self {
        let mut offsets = Vec::with_capacity(encs.len());
        let mut lens = Vec::with_capacity(encs.len());
        let mut total = 0;
        for e in encs {
            offsets.push(total);
            let n = e.real_len();
            lens.push(n);
            total += n;
        }
        Self { offsets, lens, total }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }
}

pub(crate) struct LayerCache<T: Scalar> {
    input: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    ctx: Matrix<T>,
    ln1: LayerNormCache<T>,
    h1: Matrix<T>,
    ffn_pre: Matrix<T>,
    ffn_act: Matrix<T>,
    ln2: LayerNormCache<T>,
}

pub(crate) struct BatchCache<T: Scalar> {
    emb_ln: LayerNormCache<T>,
    layers: Vec<LayerCache<T>>,
}

pub(crate) struct BatchOutput<T: Scalar> {
    pub packed: Packed,
    /// Index 0 is the embedding output and index `i` the output of layer
    /// `i − 1`. Without capture only the last computed output is kept.
    pub hidden: Vec<Matrix<T>>,
    pub cache: Option<BatchCache<T>>,
}

impl<T: Scalar> BatchOutput<T> {
    pub fn last(&self) -> &Matrix<T> {
        self.hidden.last().expect("at least one hidden state")
    }
}

fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    x.gemm_into(false, w, false, T::zero(), &mut out);
    out.add_row_broadcast(b.data());
    out
}

/// `grad_w += xᵀ·dy`, `grad_b += colsum(dy)`, returns nothing.
fn linear_param_grads<T: Scalar>(x: &Matrix<T>, dy: &Matrix<T>, grad_w: &mut Matrix<T>, grad_b: &mut Matrix<T>) {
    x.gemm_into(true, dy, false, T::one(), grad_w);
    for (g, s) in grad_b.data_mut().iter_mut().zip(dy.col_sums()) {
        *g += s;
    }
}

pub(crate) fn check_encoding<T: Scalar>(w: &EncoderWeights<T>, enc: &Encoding) -> Result<()> {
    let cfg = &w.config;
    if enc.len() > cfg.max_positions {
        return Err(Error::Validation(format!(
            "encoding length {} exceeds max_positions {}",
            enc.len(),
            cfg.max_positions
        )));
    }
    if let Some(&bad) = enc.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Validation(format!(
            "token id {bad} is outside the vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    if enc.segment_ids.iter().any(|&s| s as usize >= cfg.segment_types) {
        return Err(Error::Validation("segment id out of range".into()));
    }
    Ok(())
}

/// Runs the embedding layer and the first `depth` encoder layers.
pub(crate) fn forward_batch<T: Scalar>(
    w: &EncoderWeights<T>,
    encs: &[&Encoding],
    depth: usize,
    capture: bool,
    keep_cache: bool,
) -> Result<BatchOutput<T>> {
    let cfg = &w.config;
    if depth > w.layers.len() {
        return Err(Error::Validation(format!(
            "depth {depth} exceeds the {} encoder layers",
            w.layers.len()
        )));
    }
    for e in encs {
        check_encoding(w, e)?;
    }
    let packed = Packed::new(encs);
    let d = cfg.hidden;
    let eps = T::lit(cfg.layer_norm_eps);

    let mut emb = Matrix::zeros(packed.total, d);
    for (s, enc) in encs.iter().enumerate() {
        for p in 0..packed.lens[s] {
            let row = emb.row_mut(packed.offsets[s] + p);
            let word = w.word.row(enc.ids[p] as usize);
            let pos = w.position.row(p);
            let seg = w.segment.row(enc.segment_ids[p] as usize);
            for j in 0..d {
                row[j] = word[j] + pos[j] + seg[j];
            }
        }
    }
    let (mut x, emb_ln) = layer_norm(&emb, w.emb_ln_gamma.data(), w.emb_ln_beta.data(), eps)?;

    let mut hidden = Vec::with_capacity(if capture { depth + 1 } else { 1 });
    let mut layer_caches = Vec::with_capacity(if keep_cache { depth } else { 0 });
    for lw in &w.layers[..depth] {
        let (out, cache) = layer_forward(lw, x.clone(), &packed, cfg.heads, eps, keep_cache)?;
        if capture {
            hidden.push(x);
        }
        if let Some(c) = cache {
            layer_caches.push(c);
        }
        x = out;
    }
    hidden.push(x);
    Ok(BatchOutput {
        packed,
        hidden,
        cache: keep_cache.then_some(BatchCache {
            emb_ln,
            layers: layer_caches,
        }),
    })
}

fn layer_forward<T: Scalar>(
    lw: &LayerWeights<T>,
    x: Matrix<T>,
    packed: &Packed,
    heads: usize,
    eps: T,
    keep_cache: bool,
) -> Result<(Matrix<T>, Option<LayerCache<T>>)> {
    let d = x.cols();
    let dh = d / heads;
    let q = linear(&x, &lw.query_w, &lw.query_b);
    let k = linear(&x, &lw.key_w, &lw.key_b);
    let v = linear(&x, &lw.value_w, &lw.value_b);
    let mut ctx = Matrix::zeros(packed.total, d);
    let mut probs = Vec::with_capacity(if keep_cache { packed.len() * heads } else { 0 });
    for (&o, &n) in packed.offsets.iter().zip(&packed.lens) {
        for h in 0..heads {
            let (out, p) = attention(
                &q.block(o, n, h * dh, dh),
                &k.block(o, n, h * dh, dh),
                &v.block(o, n, h * dh, dh),
                None,
            )?;
            ctx.set_block(o, h * dh, &out);
            if keep_cache {
                probs.push(p);
            }
        }
    }
    let mut sum1 = linear(&ctx, &lw.attn_out_w, &lw.attn_out_b);
    sum1.add_assign(&x);
    let (h1, ln1) = layer_norm(&sum1, lw.attn_ln_gamma.data(), lw.attn_ln_beta.data(), eps)?;
    let ffn_pre = linear(&h1, &lw.ffn_in_w, &lw.ffn_in_b);
    let ffn_act = gelu(&ffn_pre);
    let mut sum2 = linear(&ffn_act, &lw.ffn_out_w, &lw.ffn_out_b);
    sum2.add_assign(&h1);
    let (out, ln2) = layer_norm(&sum2, lw.ffn_ln_gamma.data(), lw.ffn_ln_beta.data(), eps)?;
    let cache = keep_cache.then_some(LayerCache {
        input: x,
        q,
        k,
        v,
        probs,
        ctx,
        ln1,
        h1,
        ffn_pre,
        ffn_act,
        ln2,
    });
    Ok((out, cache))
}

/// Backpropagates `d_out` (gradient w.r.t. the last computed hidden state)
/// through the whole stack, accumulating into `grads`.
pub(crate) fn backward_batch<T: Scalar>(
    w: &EncoderWeights<T>,
    encs: &[&Encoding],
    out: &BatchOutput<T>,
    d_out: Matrix<T>,
    grads: &mut EncoderWeights<T>,
) -> Result<()> {
    let cache = out
        .cache
        .as_ref()
        .ok_or_else(|| Error::Validation("backward needs a forward run with keep_cache".into()))?;
    let packed = &out.packed;
    let heads = w.config.heads;
    let mut d = d_out;
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        d = layer_backward(&w.layers[l], lc, packed, heads, d, &mut grads.layers[l])?;
    }
    let (d_emb, dg, db) = layer_norm_backward(&cache.emb_ln, w.emb_ln_gamma.data(), &d);
    add_vec(&mut grads.emb_ln_gamma, &dg);
    add_vec(&mut grads.emb_ln_beta, &db);
    for (s, enc) in encs.iter().enumerate() {
        for p in 0..packed.lens[s] {
            let g = d_emb.row(packed.offsets[s] + p);
            add_row(&mut grads.word, enc.ids[p] as usize, g);
            add_row(&mut grads.position, p, g);
            add_row(&mut grads.segment, enc.segment_ids[p] as usize, g);
        }
    }
    Ok(())
}

fn add_vec<T: Scalar>(m: &mut Matrix<T>, v: &[T]) {
    for (a, &b) in m.data_mut().iter_mut().zip(v) {
        *a += b;
    }
}

fn add_row<T: Scalar>(m: &mut Matrix<T>, r: usize, v: &[T]) {
    for (a, &b) in m.row_mut(r).iter_mut().zip(v) {
        *a += b;
    }
}

fn layer_backward<T: Scalar>(
    lw: &LayerWeights<T>,
    c: &LayerCache<T>,
    packed: &Packed,
    heads: usize,
    d_out: Matrix<T>,
    g: &mut LayerWeights<T>,
) -> Result<Matrix<T>> {
    let d = d_out.cols();
    let dh = d / heads;

    let (d_sum2, dg, db) = layer_norm_backward(&c.ln2, lw.ffn_ln_gamma.data(), &d_out);
    add_vec(&mut g.ffn_ln_gamma, &dg);
    add_vec(&mut g.ffn_ln_beta, &db);

    linear_param_grads(&c.ffn_act, &d_sum2, &mut g.ffn_out_w, &mut g.ffn_out_b);
    let d_act = d_sum2.matmul_nt(&lw.ffn_out_w)?;
    let d_pre = gelu_backward(&c.ffn_pre, &d_act);
    linear_param_grads(&c.h1, &d_pre, &mut g.ffn_in_w, &mut g.ffn_in_b);
    let mut d_h1 = d_sum2;
    d_pre.gemm_into(false, &lw.ffn_in_w, true, T::one(), &mut d_h1);

    let (d_sum1, dg, db) = layer_norm_backward(&c.ln1, lw.attn_ln_gamma.data(), &d_h1);
    add_vec(&mut g.attn_ln_gamma, &dg);
    add_vec(&mut g.attn_ln_beta, &db);

    linear_param_grads(&c.ctx, &d_sum1, &mut g.attn_out_w, &mut g.attn_out_b);
    let d_ctx = d_sum1.matmul_nt(&lw.attn_out_w)?;

    let mut dq = Matrix::zeros(packed.total, d);
    let mut dk = Matrix::zeros(packed.total, d);
    let mut dv = Matrix::zeros(packed.total, d);
    for (s, (&o, &n)) in packed.offsets.iter().zip(&packed.lens).enumerate() {
        for h in 0..heads {
            let (gq, gk, gv) = attention_backward(
                &c.q.block(o, n, h * dh, dh),
                &c.k.block(o, n, h * dh, dh),
                &c.v.block(o, n, h * dh, dh),
                &c.probs[s * heads + h],
                &d_ctx.block(o, n, h * dh, dh),
            )?;
            dq.set_block(o, h * dh, &gq);
            dk.set_block(o, h * dh, &gk);
            dv.set_block(o, h * dh, &gv);
        }
    }
    linear_param_grads(&c.input, &dq, &mut g.query_w, &mut g.query_b);
    linear_param_grads(&c.input, &dk, &mut g.key_w, &mut g.key_b);
    linear_param_grads(&c.input, &dv, &mut g.value_w, &mut g.value_b);
    let mut d_x = d_sum1;
    dq.gemm_into(false, &lw.query_w, true, T::one(), &mut d_x);
    dk.gemm_into(false, &lw.key_w, true, T::one(), &mut d_x);
    dv.gemm_into(false, &lw.value_w, true, T::one(), &mut d_x);
    Ok(d_x)
}

pub(crate) struct HeadCache<T: Scalar> {
    cls: Matrix<T>,
    pooled: Matrix<T>,
}

/// Classification logits from the `[CLS]` rows of the final hidden state.
pub(crate) fn head_forward<T: Scalar>(
    head: &HeadWeights<T>,
    last: &Matrix<T>,
    packed: &Packed,
) -> Result<(Vec<T>, HeadCache<T>)> {
    let d = last.cols();
    let mut cls = Matrix::zeros(packed.len(), d);
    for (s, &o) in packed.offsets.iter().enumerate() {
        cls.row_mut(s).copy_from_slice(last.row(o));
    }
    let pooled = linear(&cls, &head.pooler_w, &head.pooler_b).map(|x| x.tanh());
    let logits = linear(&pooled, &head.classifier_w, &head.classifier_b).into_data();
    Ok((logits, HeadCache { cls, pooled }))
}

/// Returns the gradient w.r.t. the final hidden state (non-zero at `[CLS]` rows only).
pub(crate) fn head_backward<T: Scalar>(
    head: &HeadWeights<T>,
    cache: &HeadCache<T>,
    d_logits: &[T],
    packed: &Packed,
    grads: &mut HeadWeights<T>,
) -> Result<Matrix<T>> {
    let d = cache.cls.cols();
    let dl = Matrix::from_vec(d_logits.len(), 1, d_logits.to_vec())?;
    linear_param_grads(&cache.pooled, &dl, &mut grads.classifier_w, &mut grads.classifier_b);
    let d_pooled = dl.matmul_nt(&head.classifier_w)?;
    let mut d_z = d_pooled;
    for (g, &p) in d_z.data_mut().iter_mut().zip(cache.pooled.data()) {
        *g *= T::one() - p * p;
    }
    linear_param_grads(&cache.cls, &d_z, &mut grads.pooler_w, &mut grads.pooler_b);
    let d_cls = d_z.matmul_nt(&head.pooler_w)?;
    let mut d_last = Matrix::zeros(packed.total, d);
    for (s, &o) in packed.offsets.iter().enumerate() {
        d_last.row_mut(o).copy_from_slice(d_cls.row(s));
    }
    Ok(d_last)
}
