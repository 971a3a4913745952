//! Token embedding: per-view input projection plus learnable position,
//! time-delay and segment terms, with a learnable [CLS] vector heading each
//! view's sequence.

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{MvftError, Result};
use crate::mask::View;
use crate::params::{Binder, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::views::{ViewBundle, N_STATS};

pub fn proj_name(view: View) -> String {
    format!("emb.{}.proj", view.key())
}

pub fn segment_name(view: View) -> String {
    format!("emb.{}.segment", view.key())
}

pub fn cls_name(view: View) -> String {
    format!("emb.{}.cls", view.key())
}

pub const POSITION: &str = "emb.position";
pub const TIME: &str = "emb.time";

/// Registers the embedding tables.
pub fn init_tables(params: &mut ParamStore, cfg: &ModelConfig, rng: &mut SeededRng) {
    let d = cfg.d_model;
    for view in View::ALL {
        params.init_uniform(&proj_name(view), &[cfg.channels, d], cfg.channels, rng);
        params.init_uniform(&segment_name(view), &[d], d, rng);
        params.init_uniform(&cls_name(view), &[d], d, rng);
    }
    params.init_uniform(POSITION, &[cfg.max_len(), d], d, rng);
    params.init_uniform(TIME, &[cfg.n_buckets, d], d, rng);
}

/// `min(n_buckets − 1, ⌊log2(1 + delta/quantum)⌋)`
pub fn time_bucket(delta: i64, quantum: f64, n_buckets: usize) -> Result<usize> {
    if delta < 0 {
        return Err(MvftError::contract(format!("negative time delta {delta}")));
    }
    let b = (1.0 + delta as f64 / quantum).log2().floor();
    Ok((b as usize).min(n_buckets - 1))
}

/// A batch of view tensors sharing one window length.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, T, C]`
    pub temporal: Tensor,
    /// `[B, ⌊T/2⌋+1, C]`
    pub frequent: Tensor,
    /// `[B, 6, C]`
    pub statistic: Tensor,
    /// Time bucket per temporal token, `B·T` entries.
    pub time_buckets: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_bundles(bundles: &[&ViewBundle], cfg: &ModelConfig) -> Result<Self> {
        if bundles.is_empty() {
            return Err(MvftError::Empty("batch of zero windows".into()));
        }
        let (t, c, f) = (cfg.window_len, cfg.channels, cfg.freq_len());
        let mut temporal = Vec::with_capacity(bundles.len() * t * c);
        let mut frequent = Vec::with_capacity(bundles.len() * f * c);
        let mut statistic = Vec::with_capacity(bundles.len() * N_STATS * c);
        let mut time_buckets = Vec::with_capacity(bundles.len() * t);
        let mut labels = Vec::with_capacity(bundles.len());
        for b in bundles {
            if b.temporal.shape() != [t, c]
                || b.frequent.0.shape() != [f, c]
                || b.statistic.0.shape() != [N_STATS, c]
            {
                return Err(MvftError::shape("batch", &[t, c], b.temporal.shape()));
            }
            if b.label >= cfg.n_class {
                return Err(MvftError::contract(format!(
                    "label {} out of range for {} classes",
                    b.label, cfg.n_class
                )));
            }
            temporal.extend_from_slice(b.temporal.data());
            frequent.extend_from_slice(b.frequent.0.data());
            statistic.extend_from_slice(b.statistic.0.data());
            let start = b.timestamps[0];
            for &ts in &b.timestamps {
                time_buckets.push(time_bucket(ts - start, cfg.time_quantum, cfg.n_buckets)?);
            }
            labels.push(b.label);
        }
        let n = bundles.len();
        Ok(Batch {
            temporal: Tensor::new(vec![n, t, c], temporal)?,
            frequent: Tensor::new(vec![n, f, c], frequent)?,
            statistic: Tensor::new(vec![n, N_STATS, c], statistic)?,
            time_buckets,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tokens(&self, view: View) -> &Tensor {
        match view {
            View::Temporal => &self.temporal,
            View::Frequent => &self.frequent,
            View::Statistic => &self.statistic,
        }
    }
}

/// Embeds one view's tokens `[B, L, C]` into `[B, L + 1, d_model]`.
///
/// Row 0 is `cls + position[0] + segment`; row `i ≥ 1` is
/// `proj(token[i−1]) + position[i] + time[bucket[i−1]] + segment`.
/// `buckets` is `None` for views without timestamps, which use bucket 0.
pub fn embed_view(
    binder: &mut Binder<'_>,
    cfg: &ModelConfig,
    tokens: &Tensor,
    view: View,
    buckets: Option<&[usize]>,
) -> Result<Var> {
    if tokens.rank() != 3 || tokens.shape()[2] != cfg.channels {
        return Err(MvftError::shape("embed_view", tokens.shape(), &[cfg.channels]));
    }
    let (batch, len) = (tokens.shape()[0], tokens.shape()[1]);
    if len + 1 > cfg.max_len() {
        return Err(MvftError::contract(format!(
            "sequence of {len} tokens plus [CLS] exceeds max_len {}",
            cfg.max_len()
        )));
    }
    let zero_buckets;
    let buckets = match buckets {
        Some(b) if b.len() == batch * len => b,
        Some(b) => return Err(MvftError::shape("embed_view", &[batch, len], &[b.len()])),
        None => {
            zero_buckets = vec![0; batch * len];
            &zero_buckets
        }
    };

    let proj = binder.p(&proj_name(view))?;
    let time = binder.p(TIME)?;
    let position = binder.p(POSITION)?;
    let cls = binder.p(&cls_name(view))?;
    let d = cfg.d_model;

    let tape = &mut binder.tape;
    let x = tape.constant(tokens.clone());
    let body = tape.matmul(x, proj)?;
    let delays = tape.gather(time, buckets, &[batch, len])?;
    let body = tape.add(body, delays)?;
    let cls = tape.reshape(cls, &[1, d])?;
    let cls = tape.expand(cls, batch);
    let seq = tape.concat(&[cls, body], 1)?;
    let positions: Vec<usize> = (0..=len).collect();
    let pos = tape.gather(position, &positions, &[len + 1])?;
    let mut seq = binder.tape.add_broadcast(seq, pos)?;
    if cfg.use_segment {
        let segment = binder.p(&segment_name(view))?;
        seq = binder.tape.add_broadcast(seq, segment)?;
    }
    Ok(seq)
}

/// Embedded sequences for each view, `[B, L_v + 1, d_model]`.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddedViews {
    pub temporal: Var,
    pub frequent: Var,
    pub statistic: Var,
}

impl EmbeddedViews {
    pub fn get(&self, view: View) -> Var {
        match view {
            View::Temporal => self.temporal,
            View::Frequent => self.frequent,
            View::Statistic => self.statistic,
        }
    }
}

/// Embeds the requested view of a batch; only the temporal view carries
/// time buckets.
pub fn embed_batch_view(
    binder: &mut Binder<'_>,
    cfg: &ModelConfig,
    batch: &Batch,
    view: View,
) -> Result<Var> {
    let buckets = (view == View::Temporal).then_some(batch.time_buckets.as_slice());
    embed_view(binder, cfg, batch.tokens(view), view, buckets)
}

pub fn embed_bundle(binder: &mut Binder<'_>, cfg: &ModelConfig, batch: &Batch) -> Result<EmbeddedViews> {
    Ok(EmbeddedViews {
        temporal: embed_batch_view(binder, cfg, batch, View::Temporal)?,
        frequent: embed_batch_view(binder, cfg, batch, View::Frequent)?,
        statistic: embed_batch_view(binder, cfg, batch, View::Statistic)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_rule() {
        assert_eq!(time_bucket(0, 1.0, 16).unwrap(), 0);
        assert_eq!(time_bucket(1, 1.0, 16).unwrap(), 1);
        assert_eq!(time_bucket(2, 1.0, 16).unwrap(), 1);
        assert_eq!(time_bucket(3, 1.0, 16).unwrap(), 2);
        assert_eq!(time_bucket(100, 50.0, 16).unwrap(), 1);
        assert_eq!(time_bucket(1 << 40, 1.0, 16).unwrap(), 15);
        assert!(time_bucket(-1, 1.0, 16).is_err());
    }

    #[test]
    fn overflowing_sequence_rejected() {
        let cfg = ModelConfig::tiny();
        let mut params = ParamStore::new();
        init_tables(&mut params, &cfg, &mut SeededRng::new(0));
        let mut binder = Binder::new(&params, false);
        let too_long = Tensor::zeros(&[1, cfg.max_len(), cfg.channels]);
        assert!(embed_view(&mut binder, &cfg, &too_long, View::Statistic, None).is_err());
    }
}
