//! The multi-view fusion transformer and the single-stream baseline.
//!
//! MVFT embeds each view separately, runs one encoder stack per view whose
//! blocks apply self-attention, fusion attention across views and a
//! feed-forward sublayer (each post-norm residual), then decodes a single
//! all-ones token against every view's encoder output. The three decoder
//! streams go through per-view heads whose logits are summed.
//!
//! The baseline concatenates the selected views' embeddings into one
//! sequence and uses a plain self-attention encoder with the same decoder
//! and readout shape.

use crate::attention::{
    feed_forward, init_attention, init_ffn, init_layer_norm, multi_head_attention,
    resample_sequence, residual_norm, AttentionTrace, DropoutCtx,
};
use crate::autograd::Var;
use crate::config::{FusionMode, ModelConfig, ModelKind};
use crate::embedding::{embed_batch_view, init_tables, Batch};
use crate::error::{MvftError, Result};
use crate::mask::{View, ViewMask};
use crate::params::{Binder, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::views::ViewBundle;

#[derive(Debug, Clone, PartialEq)]
pub struct MvftModel {
    pub config: ModelConfig,
    pub kind: ModelKind,
    pub params: ParamStore,
}

/// Everything a forward pass leaves on the tape that callers may inspect.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[B, n_class]` summed head logits.
    pub logits: Var,
    /// `[B, n_class]` softmax of `logits`.
    pub probs: Var,
    /// Encoder outputs per stream, `[B, L, d_model]`.
    pub encoded: Vec<(Option<View>, Var)>,
    /// Final decoder vectors per stream, `[B, d_model]`.
    pub decoded: Vec<(Option<View>, Var)>,
    pub trace: AttentionTrace,
}

fn tag(view: Option<View>) -> String {
    view.map(|v| format!(".{}", v.key())).unwrap_or_default()
}

impl MvftModel {
    pub fn new(config: ModelConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut params = ParamStore::new();
        let cfg = &config;
        let d = cfg.d_model;
        init_tables(&mut params, cfg, &mut rng);

        let streams: Vec<Option<View>> = match kind {
            ModelKind::Mvft => View::ALL.into_iter().map(Some).collect(),
            ModelKind::Baseline => vec![None],
        };
        for l in 0..cfg.enc_layers {
            for &s in &streams {
                let p = format!("enc.{l}{}", tag(s));
                init_attention(&mut params, &format!("{p}.self"), cfg, &mut rng);
                init_layer_norm(&mut params, &format!("{p}.self_ln"), d);
                if kind == ModelKind::Mvft {
                    init_attention(&mut params, &format!("{p}.fusion"), cfg, &mut rng);
                    init_layer_norm(&mut params, &format!("{p}.fusion_ln"), d);
                }
                init_ffn(&mut params, &format!("{p}.ffn"), cfg, &mut rng);
                init_layer_norm(&mut params, &format!("{p}.ffn_ln"), d);
            }
        }
        params.init_uniform("dec.in.w", &[d, d], d, &mut rng);
        params.init_const("dec.in.b", &[d], 0.0);
        for l in 0..cfg.dec_layers {
            init_attention(&mut params, &format!("dec.{l}.self"), cfg, &mut rng);
            init_layer_norm(&mut params, &format!("dec.{l}.self_ln"), d);
            for &s in &streams {
                init_attention(&mut params, &format!("dec.{l}{}.cross", tag(s)), cfg, &mut rng);
                init_layer_norm(&mut params, &format!("dec.{l}{}.cross_ln", tag(s)), d);
            }
            init_ffn(&mut params, &format!("dec.{l}.ffn"), cfg, &mut rng);
            init_layer_norm(&mut params, &format!("dec.{l}.ffn_ln"), d);
        }
        for &s in &streams {
            params.init_uniform(&format!("head{}.w", tag(s)), &[d, cfg.n_class], d, &mut rng);
            params.init_const(&format!("head{}.b", tag(s)), &[cfg.n_class], 0.0);
        }
        Ok(MvftModel {
            config,
            kind,
            params,
        })
    }

    /// Checks that `mask` is usable with this model.
    pub fn check_mask(&self, mask: ViewMask) -> Result<()> {
        if mask.is_empty() {
            return Err(MvftError::config("view subset must not be empty"));
        }
        if self.kind == ModelKind::Mvft && self.config.fusion && mask.count() < 2 {
            return Err(MvftError::config(format!(
                "MVFT fusion needs at least two views (got `{mask}`); use the baseline model for a single view"
            )));
        }
        Ok(())
    }

    /// Records a full forward pass on `binder`'s tape.
    pub fn forward(
        &self,
        binder: &mut Binder<'_>,
        batch: &Batch,
        mask: ViewMask,
        mut dropout: Option<DropoutCtx<'_>>,
    ) -> Result<ForwardOutput> {
        self.check_mask(mask)?;
        let cfg = &self.config;
        let mut trace = AttentionTrace::default();
        let mut embedded = Vec::new();
        for view in mask.views() {
            embedded.push((view, embed_batch_view(binder, cfg, batch, view)?));
        }

        let encoded: Vec<(Option<View>, Var)> = match self.kind {
            ModelKind::Mvft => encoder_forward(binder, cfg, embedded, &mut trace, &mut dropout)?
                .into_iter()
                .map(|(v, x)| (Some(v), x))
                .collect(),
            ModelKind::Baseline => {
                let parts: Vec<Var> = embedded.iter().map(|&(_, x)| x).collect();
                let joined = binder.tape.concat(&parts, 1)?;
                let x = baseline_encoder(binder, cfg, joined, &mut trace, &mut dropout)?;
                vec![(None, x)]
            }
        };

        let decoded = decoder_forward(binder, cfg, &encoded, batch.len(), &mut trace, &mut dropout)?;
        let mut logits: Option<Var> = None;
        for &(s, x) in &decoded {
            let w = binder.p(&format!("head{}.w", tag(s)))?;
            let b = binder.p(&format!("head{}.b", tag(s)))?;
            let y = binder.tape.matmul(x, w)?;
            let y = binder.tape.add_broadcast(y, b)?;
            logits = Some(match logits {
                None => y,
                Some(acc) => binder.tape.add(acc, y)?,
            });
        }
        let logits = logits.expect("at least one stream");
        let probs = binder.tape.softmax(logits);
        Ok(ForwardOutput {
            logits,
            probs,
            encoded,
            decoded,
            trace,
        })
    }

    /// Class probabilities `[B, n_class]` for a batch (inference).
    pub fn predict(&self, batch: &Batch, mask: ViewMask) -> Result<Tensor> {
        let mut binder = Binder::new(&self.params, false);
        let out = self.forward(&mut binder, batch, mask, None)?;
        Ok(binder.tape.value(out.probs).clone())
    }

    /// Probability vector over classes for one window using all three views.
    pub fn classify(&self, bundle: &ViewBundle) -> Result<Vec<f64>> {
        self.classify_masked(bundle, ViewMask::ALL)
    }

    pub fn classify_masked(&self, bundle: &ViewBundle, mask: ViewMask) -> Result<Vec<f64>> {
        let batch = Batch::from_bundles(&[bundle], &self.config)?;
        Ok(self.predict(&batch, mask)?.into_data())
    }
}

/// MVFT restricted to a subset of at least two views.
pub fn mvft_forward_masked(model: &MvftModel, bundle: &ViewBundle, mask: ViewMask) -> Result<Vec<f64>> {
    if model.kind != ModelKind::Mvft {
        return Err(MvftError::config("mvft_forward_masked needs an MVFT model"));
    }
    if mask.count() < 2 {
        return Err(MvftError::config(format!(
            "MVFT fusion needs at least two views (got `{mask}`); use baseline_forward for a single view"
        )));
    }
    model.classify_masked(bundle, mask)
}

/// Single-stream baseline over the selected views.
pub fn baseline_forward(model: &MvftModel, bundle: &ViewBundle, mask: ViewMask) -> Result<Vec<f64>> {
    if model.kind != ModelKind::Baseline {
        return Err(MvftError::config("baseline_forward needs a baseline model"));
    }
    model.classify_masked(bundle, mask)
}

/// Key/value sources for each stream of the fusion sublayer.
fn fusion_sources(mode: FusionMode, n: usize, i: usize) -> (Vec<usize>, Vec<usize>) {
    let others: Vec<usize> = (1..n).map(|o| (i + o) % n).collect();
    match (mode, n) {
        (FusionMode::Cyclic, 3) => (vec![(i + 1) % 3], vec![(i + 2) % 3]),
        _ => (others.clone(), others),
    }
}

/// Cross-view attention of one encoder block.
///
/// With three streams in cyclic mode, stream `T` queries with keys from `F`
/// and values from `S`, `F` with `(S, T)` and `S` with `(T, F)`. With two
/// streams each attends to the other. In `concat_kv` mode keys and values are
/// the concatenation of all other streams. A value source shorter or longer
/// than its key source is linearly resampled to the key length. Each output
/// is wrapped in residual + layer norm around its query stream.
pub fn fusion_attention(
    binder: &mut Binder<'_>,
    cfg: &ModelConfig,
    layer: usize,
    streams: &[(View, Var)],
    trace: &mut AttentionTrace,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<Vec<Var>> {
    let d = binder.tape.shape(streams[0].1).to_vec();
    for &(_, x) in streams {
        let s = binder.tape.shape(x);
        if s.len() != 3 || s[2] != cfg.d_model || s[0] != d[0] {
            return Err(MvftError::shape("fusion_attention", &d, s));
        }
    }
    let n = streams.len();
    let mut out = Vec::with_capacity(n);
    for (i, &(view, q)) in streams.iter().enumerate() {
        let (ks, vs) = fusion_sources(cfg.fusion_mode, n, i);
        let gather = |binder: &mut Binder<'_>, idx: &[usize]| -> Result<Var> {
            let parts: Vec<Var> = idx.iter().map(|&j| streams[j].1).collect();
            if parts.len() == 1 {
                Ok(parts[0])
            } else {
                binder.tape.concat(&parts, 1)
            }
        };
        let k = gather(binder, &ks)?;
        let v = gather(binder, &vs)?;
        let klen = binder.tape.shape(k)[1];
        let v = resample_sequence(binder, v, klen)?;
        let p = format!("enc.{layer}.{}", view.key());
        let a = multi_head_attention(binder, &format!("{p}.fusion"), cfg.heads, q, k, v, trace)?;
        out.push(residual_norm(binder, &format!("{p}.fusion_ln"), q, a, cfg.ln_eps, dropout)?);
    }
    Ok(out)
}

/// Runs the per-view encoder stacks; `L_enc = 0` returns the embeddings.
pub fn encoder_forward(
    binder: &mut Binder<'_>,
    cfg: &ModelConfig,
    mut streams: Vec<(View, Var)>,
    trace: &mut AttentionTrace,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<Vec<(View, Var)>> {
    for l in 0..cfg.enc_layers {
        for (view, x) in streams.iter_mut() {
            let p = format!("enc.{l}.{}", view.key());
            let a = multi_head_attention(binder, &format!("{p}.self"), cfg.heads, *x, *x, *x, trace)?;
            *x = residual_norm(binder, &format!("{p}.self_ln"), *x, a, cfg.ln_eps, dropout)?;
        }
        if cfg.fusion && streams.len() >= 2 {
            let fused = fusion_attention(binder, cfg, l, &streams, trace, dropout)?;
            for ((_, x), f) in streams.iter_mut().zip(fused) {
                *x = f;
            }
        }
        for (view, x) in streams.iter_mut() {
            let p = format!("enc.{l}.{}", view.key());
            let f = feed_forward(binder, &format!("{p}.ffn"), *x)?;
            *x = residual_norm(binder, &format!("{p}.ffn_ln"), *x, f, cfg.ln_eps, dropout)?;
        }
    }
    Ok(streams)
}

fn baseline_encoder(
    binder: &mut Binder<'_>,
    cfg: &ModelConfig,
    mut x: Var,
    trace: &mut AttentionTrace,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<Var> {
    for l in 0..cfg.enc_layers {
        let p = format!("enc.{l}");
        let a = multi_head_attention(binder, &format!("{p}.self"), cfg.heads, x, x, x, trace)?;
        x = residual_norm(binder, &format!("{p}.self_ln"), x, a, cfg.ln_eps, dropout)?;
        let f = feed_forward(binder, &format!("{p}.ffn"), x)?;
        x = residual_norm(binder, &format!("{p}.ffn_ln"), x, f, cfg.ln_eps, dropout)?;
    }
    Ok(x)
}

/// Decodes one all-ones token against each encoded stream; returns one
/// `[B, d_model]` vector per stream.
pub fn decoder_forward(
    binder: &mut Binder<'_>,
    cfg: &ModelConfig,
    encoded: &[(Option<View>, Var)],
    batch: usize,
    trace: &mut AttentionTrace,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<Vec<(Option<View>, Var)>> {
    let d = cfg.d_model;
    let w = binder.p("dec.in.w")?;
    let b = binder.p("dec.in.b")?;
    let ones = binder.tape.constant(Tensor::ones(&[batch, 1, d]));
    let start = binder.tape.matmul(ones, w)?;
    let start = binder.tape.add_broadcast(start, b)?;

    let mut out = Vec::with_capacity(encoded.len());
    for &(s, enc) in encoded {
        let mut x = start;
        for l in 0..cfg.dec_layers {
            let a = multi_head_attention(binder, &format!("dec.{l}.self"), cfg.heads, x, x, x, trace)?;
            x = residual_norm(binder, &format!("dec.{l}.self_ln"), x, a, cfg.ln_eps, dropout)?;
            let p = format!("dec.{l}{}", tag(s));
            let c = multi_head_attention(binder, &format!("{p}.cross"), cfg.heads, x, enc, enc, trace)?;
            x = residual_norm(binder, &format!("{p}.cross_ln"), x, c, cfg.ln_eps, dropout)?;
            let f = feed_forward(binder, &format!("dec.{l}.ffn"), x)?;
            x = residual_norm(binder, &format!("dec.{l}.ffn_ln"), x, f, cfg.ln_eps, dropout)?;
        }
        out.push((s, binder.tape.reshape(x, &[batch, d])?));
    }
    Ok(out)
}
