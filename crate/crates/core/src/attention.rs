//! Multi-head scaled dot-product attention and the sublayer plumbing shared
//! by encoder and decoder blocks.

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{MvftError, Result};
use crate::params::{Binder, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Attention weights recorded during a forward pass, keyed by the attention
/// parameter prefix and head (`"enc.0.t.fusion#1"`).
#[derive(Debug, Default, Clone)]
pub struct AttentionTrace {
    pub weights: Vec<(String, Var)>,
}

impl AttentionTrace {
    pub fn find(&self, key: &str) -> Option<Var> {
        self.weights.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    /// All entries whose key starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, Var)> + 'a {
        self.weights
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn init_attention(params: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut SeededRng) {
    let (d, dk) = (cfg.d_model, cfg.head_dim());
    for h in 0..cfg.heads {
        params.init_uniform(&format!("{prefix}.wq.{h}"), &[d, dk], d, rng);
        params.init_uniform(&format!("{prefix}.wk.{h}"), &[d, dk], d, rng);
        params.init_uniform(&format!("{prefix}.wv.{h}"), &[d, dk], d, rng);
    }
    params.init_uniform(&format!("{prefix}.wo"), &[cfg.heads * dk, d], cfg.heads * dk, rng);
}

pub fn init_layer_norm(params: &mut ParamStore, prefix: &str, d: usize) {
    params.init_const(&format!("{prefix}.gamma"), &[d], 1.0);
    params.init_const(&format!("{prefix}.beta"), &[d], 0.0);
}

pub fn init_ffn(params: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut SeededRng) {
    let (d, ff) = (cfg.d_model, cfg.d_ff);
    params.init_uniform(&format!("{prefix}.w1"), &[d, ff], d, rng);
    params.init_const(&format!("{prefix}.b1"), &[ff], 0.0);
    params.init_uniform(&format!("{prefix}.w2"), &[ff, d], ff, rng);
    params.init_const(&format!("{prefix}.b2"), &[d], 0.0);
}

/// `Concat_h(softmax(Q W_h^Q (K W_h^K)ᵀ / √d_k) V W_h^V) W^O` over batched
/// sequences `q[B, Lq, d]`, `k, v[B, Lk, d]`.
pub fn multi_head_attention(
    binder: &mut Binder<'_>,
    prefix: &str,
    heads: usize,
    q: Var,
    k: Var,
    v: Var,
    trace: &mut AttentionTrace,
) -> Result<Var> {
    let (qs, ks, vs) = (
        binder.tape.shape(q).to_vec(),
        binder.tape.shape(k).to_vec(),
        binder.tape.shape(v).to_vec(),
    );
    if ks.len() != 3 || vs.len() != 3 || ks[..2] != vs[..2] {
        return Err(MvftError::shape("attention key/value", &ks, &vs));
    }
    if qs.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || ks[2] != vs[2] {
        return Err(MvftError::shape("attention query/key", &qs, &ks));
    }
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = binder.p(&format!("{prefix}.wq.{h}"))?;
        let wk = binder.p(&format!("{prefix}.wk.{h}"))?;
        let wv = binder.p(&format!("{prefix}.wv.{h}"))?;
        let tape = &mut binder.tape;
        let qh = tape.matmul(q, wq)?;
        let kh = tape.matmul(k, wk)?;
        let vh = tape.matmul(v, wv)?;
        let dk = tape.shape(qh)[2];
        let scores = tape.bmm_nt(qh, kh)?;
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let weights = tape.softmax(scores);
        trace.weights.push((format!("{prefix}#{h}"), weights));
        outs.push(tape.bmm(weights, vh)?);
    }
    let wo = binder.p(&format!("{prefix}.wo"))?;
    let cat = binder.tape.concat(&outs, 2)?;
    binder.tape.matmul(cat, wo)
}

/// Training-time stochasticity; `None` means inference.
pub struct DropoutCtx<'r> {
    pub rate: f64,
    pub rng: &'r mut SeededRng,
}

pub fn maybe_dropout(binder: &mut Binder<'_>, x: Var, dropout: &mut Option<DropoutCtx<'_>>) -> Result<Var> {
    match dropout {
        Some(ctx) if ctx.rate > 0.0 => {
            let keep = 1.0 - ctx.rate;
            let mask = (0..binder.tape.value(x).len())
                .map(|_| if ctx.rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            binder.tape.dropout(x, mask)
        }
        _ => Ok(x),
    }
}

/// `LayerNorm(x + sublayer)` with the norm parameters at `prefix`.
pub fn residual_norm(
    binder: &mut Binder<'_>,
    prefix: &str,
    x: Var,
    sublayer: Var,
    eps: f64,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<Var> {
    let sublayer = maybe_dropout(binder, sublayer, dropout)?;
    let gamma = binder.p(&format!("{prefix}.gamma"))?;
    let beta = binder.p(&format!("{prefix}.beta"))?;
    let sum = binder.tape.add(x, sublayer)?;
    binder.tape.layer_norm(sum, gamma, beta, eps)
}

/// Position-wise `W2 · gelu(W1 x + b1) + b2`.
pub fn feed_forward(binder: &mut Binder<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = binder.p(&format!("{prefix}.w1"))?;
    let b1 = binder.p(&format!("{prefix}.b1"))?;
    let w2 = binder.p(&format!("{prefix}.w2"))?;
    let b2 = binder.p(&format!("{prefix}.b2"))?;
    let tape = &mut binder.tape;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_broadcast(h, b1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, w2)?;
    tape.add_broadcast(out, b2)
}

/// Linear-interpolation matrix `[to, from]` mapping a sequence of length
/// `from` onto `to` positions with both endpoints anchored. Equal lengths
/// give the identity exactly.
pub fn resample_matrix(to: usize, from: usize) -> Tensor {
    let mut r = Tensor::zeros(&[to, from]);
    for i in 0..to {
        if from == 1 || to == 1 {
            r.set(&[i, 0], 1.0);
            continue;
        }
        let x = (i * (from - 1)) as f64 / (to - 1) as f64;
        let j = x.floor() as usize;
        let frac = x - j as f64;
        if j + 1 < from && frac > 0.0 {
            r.set(&[i, j], 1.0 - frac);
            r.set(&[i, j + 1], frac);
        } else {
            r.set(&[i, j], 1.0);
        }
    }
    r
}

/// Resamples `x[B, L, d]` along the sequence axis to `len` positions.
pub fn resample_sequence(binder: &mut Binder<'_>, x: Var, len: usize) -> Result<Var> {
    let shape = binder.tape.shape(x).to_vec();
    if shape[1] == len {
        return Ok(x);
    }
    let r = binder.tape.constant(resample_matrix(len, shape[1]));
    let r = binder.tape.expand(r, shape[0]);
    binder.tape.bmm(r, x)
}
