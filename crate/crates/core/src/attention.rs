//! Multi-head self-attention, applied twice in the hierarchy: per
//! modality over its segment sequence (UAT, followed by sum fusion), and
//! over the unordered set of modality embeddings (MAT, followed by SUM or
//! CONCAT merging). Attention weights are recorded on every call for
//! introspection and export.
//!
//! Scaled dot-product scores divide by `sqrt(d_k)` where `d_k` is the
//! per-head key width `E_in / heads`. Each head has its own projection
//! matrices, there are no biases, and no positional encoding or residual
//! paths exist anywhere in the block.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::ops::concat;
use crate::numerics::rng::Rng;
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;
use crate::params::{init_weight, ParamId, ParamStore, Session};

/// How fused embeddings are merged after attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FusionMode {
    Sum,
    Concat,
}

/// Width multiplier for the query/key projection init relative to the
/// `1/sqrt(fan_in)` used everywhere else. Attention inputs arrive here
/// at well below unit RMS (LSTM outputs pass through relu and dropout,
/// and nothing in the architecture normalizes them), so symmetric
/// small-init projections leave the score logits orders of magnitude
/// too flat for any desk-scale training budget to differentiate; the
/// value/output projections keep the standard scale.
pub const SCORE_INIT_GAIN: f64 = 16.0;

/// Per-head projections plus the shared output projection.
#[derive(Debug, Clone)]
struct HeadParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

/// Multi-head self-attention block: `[B, L, E_in] -> [B, L, E_out]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    heads: Vec<HeadParams>,
    w_o: ParamId,
    pub e_in: usize,
    pub e_out: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    /// `e_in` must be divisible by `head_count`; the per-head key/value
    /// width is `e_in / head_count`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        e_in: usize,
        e_out: usize,
        head_count: usize,
    ) -> Result<Self> {
        if head_count == 0 {
            return Err(Error::Config(format!("attention '{name}' needs at least one head")));
        }
        if !e_in.is_multiple_of(head_count) {
            return Err(Error::Config(format!(
                "embedding size {e_in} is not divisible by head count {head_count}"
            )));
        }
        let head_dim = e_in / head_count;
        let qk_bound = SCORE_INIT_GAIN / (e_in as f64).sqrt();
        let mut heads = Vec::with_capacity(head_count);
        for h in 0..head_count {
            heads.push(HeadParams {
                wq: store.register(
                    &format!("{name}.h{h}.wq"),
                    Tensor::uniform(rng, &[e_in, head_dim], -qk_bound, qk_bound),
                )?,
                wk: store.register(
                    &format!("{name}.h{h}.wk"),
                    Tensor::uniform(rng, &[e_in, head_dim], -qk_bound, qk_bound),
                )?,
                wv: store.register(
                    &format!("{name}.h{h}.wv"),
                    init_weight(rng, &[e_in, head_dim], e_in),
                )?,
            });
        }
        let w_o = store.register(&format!("{name}.wo"), init_weight(rng, &[e_in, e_out], e_in))?;
        Ok(MultiHeadAttention {
            heads,
            w_o,
            e_in,
            e_out,
            head_dim,
        })
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Returns the attended sequence and the recorded per-head attention
    /// weights (`[B, h, L, L]`, row-stochastic).
    pub fn forward<'t>(
        &self,
        sess: &mut Session<'t, '_>,
        x: Var<'t>,
    ) -> (Var<'t>, AttentionBatch) {
        let shape = x.shape();
        assert!(
            shape.len() == 3 && shape[2] == self.e_in,
            "attention expects [batch, length, {}], got {shape:?}",
            self.e_in
        );
        let (b, l) = (shape[0], shape[1]);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut attended = Vec::with_capacity(self.heads.len());
        let mut recorded = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let wq = sess.param(head.wq);
            let wk = sess.param(head.wk);
            let wv = sess.param(head.wv);
            let q = x.matmul(wq);
            let k = x.matmul(wk);
            let v = x.matmul(wv);
            let scores = q.matmul(k.transpose_last2()).scale(scale);
            let weights = scores.softmax(2);
            recorded.push(weights.value());
            attended.push(weights.matmul(v));
        }
        let merged = concat(&attended, 2);
        let w_o = sess.param(self.w_o);
        let out = merged.matmul(w_o);

        // interleave per-head recordings into [B, h, L, L]
        let h = self.heads.len();
        let mut raw = vec![0.0; b * h * l * l];
        for (hi, wv) in recorded.iter().enumerate() {
            for bi in 0..b {
                let src = &wv[bi * l * l..(bi + 1) * l * l];
                let dst = (bi * h + hi) * l * l;
                raw[dst..dst + l * l].copy_from_slice(src);
            }
        }
        let weights = Tensor::new(vec![b, h, l, l], raw).expect("recorded weights are consistent");
        (out, AttentionBatch { weights })
    }
}

// ── Attention maps ──────────────────────────────────────────────────

/// Recorded attention weights for a whole batch: `[B, h, L, L]`.
#[derive(Debug, Clone)]
pub struct AttentionBatch {
    pub weights: Tensor,
}

impl AttentionBatch {
    pub fn batch_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn head_count(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn length(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Extract one sample's map.
    pub fn per_sample(&self, sample: usize) -> AttentionMap {
        let (h, l) = (self.head_count(), self.length());
        let stride = h * l * l;
        let raw = Tensor::new(
            vec![h, l, l],
            self.weights.data()[sample * stride..(sample + 1) * stride].to_vec(),
        )
        .expect("slice is consistent");
        let reduced = reduce_attention(&raw);
        AttentionMap { raw, reduced }
    }
}

/// One sample's attention record: raw per-head `[h, L, L]` weights plus
/// the reduced per-position scores.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub raw: Tensor,
    pub reduced: Vec<f64>,
}

/// Per-position attention received: mean over heads and query rows of
/// the weight each position j gets. Sums to 1 because every row does.
#[allow(clippy::needless_range_loop)]
pub fn reduce_attention(raw: &Tensor) -> Vec<f64> {
    let shape = raw.shape();
    assert!(shape.len() == 3 && shape[1] == shape[2], "expected [h, L, L], got {shape:?}");
    let (h, l) = (shape[0], shape[1]);
    let mut reduced = vec![0.0; l];
    for hi in 0..h {
        for i in 0..l {
            for j in 0..l {
                reduced[j] += raw.data()[(hi * l + i) * l + j];
            }
        }
    }
    let norm = (h * l) as f64;
    reduced.iter_mut().for_each(|v| *v /= norm);
    reduced
}

// ── UAT and MAT ─────────────────────────────────────────────────────

/// Unimodal attention: multi-head self-attention over the segment
/// sequence, then sum fusion over segments: `[B, S, E] -> [B, E_out]`.
pub fn uat_encode<'t>(
    sess: &mut Session<'t, '_>,
    attention: &MultiHeadAttention,
    hidden: Var<'t>,
) -> (Var<'t>, AttentionBatch) {
    let (attended, maps) = attention.forward(sess, hidden);
    (attended.sum_axes(&[1], false), maps)
}

/// Multimodal attention fusion: stacks the per-modality embeddings into
/// an unordered `[B, M, E]` set (no positional encoding), applies the
/// block's own attention parameters, then merges with SUM (`[B, E_out]`)
/// or CONCAT (`[B, M * E_out]`).
pub fn mat_fuse<'t>(
    sess: &mut Session<'t, '_>,
    attention: &MultiHeadAttention,
    embeddings: &[Var<'t>],
    mode: FusionMode,
) -> Result<(Var<'t>, AttentionBatch)> {
    if embeddings.is_empty() {
        return Err(Error::Contract("mat_fuse needs at least one modality".into()));
    }
    let e = embeddings[0].shape();
    if e.len() != 2 {
        return Err(Error::Contract(format!(
            "mat_fuse expects [batch, embedding] inputs, got {e:?}"
        )));
    }
    for emb in embeddings {
        let s = emb.shape();
        if s != e {
            return Err(Error::Contract(format!(
                "modality embeddings disagree: {e:?} vs {s:?}"
            )));
        }
    }
    let (b, width) = (e[0], e[1]);
    let m = embeddings.len();
    let stacked: Vec<Var> = embeddings
        .iter()
        .map(|v| v.reshape(&[b, 1, width]))
        .collect();
    let set = concat(&stacked, 1);
    let (attended, maps) = attention.forward(sess, set);
    let fused = match mode {
        FusionMode::Sum => attended.sum_axes(&[1], false),
        FusionMode::Concat => attended.reshape(&[b, m * attention.e_out]),
    };
    Ok((fused, maps))
}
