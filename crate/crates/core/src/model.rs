//! Model assembly: per-modality encoder stacks, the two attention stages,
//! the classifier head, baseline variants, the loss, and checkpoints.
//!
//! Component initialization streams are forked from the master seed by
//! stable component names, so two variants built from the same seed share
//! bit-identical weights for the parts they have in common.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{mat_fuse, uat_encode, AttentionBatch, FusionMode, MultiHeadAttention};
use crate::encoders::{
    CooccurrenceEncoder, FeatureLayout, Lstm, ModalityEncoder, SegmentedSequence, SpatialEncoder,
    StubSpatialEncoder,
};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, BatchNormMode, Dropout, Linear};
use crate::numerics::ops;
use crate::numerics::rng::{stable_hash, Rng};
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;
use crate::params::{ParamId, ParamStore, Session};

/// Architecture variants: the full hierarchical model and the reference
/// baselines it is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Unimodal self-attention per modality + attention-based fusion.
    Hamlet,
    /// No attention anywhere: summed hidden states, plain fusion.
    Nsa,
    /// Unimodal self-attention only; plain fusion across modalities.
    Usa,
    /// Context-vector soft attention per modality; plain concat fusion.
    Keyless,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hamlet" => Ok(Variant::Hamlet),
            "nsa" => Ok(Variant::Nsa),
            "usa" => Ok(Variant::Usa),
            "keyless" => Ok(Variant::Keyless),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected hamlet, nsa, usa, or keyless)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Hamlet => "hamlet",
            Variant::Nsa => "nsa",
            Variant::Usa => "usa",
            Variant::Keyless => "keyless",
        };
        f.write_str(s)
    }
}

/// Spatial encoder selection per modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Stub,
    Cooccurrence,
}

/// Model-side description of one modality.
#[derive(Debug, Clone)]
pub struct ModalitySpec {
    pub name: String,
    pub layout: FeatureLayout,
    pub encoder: EncoderKind,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub modalities: Vec<ModalitySpec>,
    pub class_count: usize,
    /// Spatial feature width produced per segment.
    pub spatial_embedding: usize,
    /// LSTM hidden width; also the attention embedding width shared by
    /// all modalities.
    pub hidden_embedding: usize,
    pub lstm_layers: usize,
    pub uat_heads: usize,
    pub mat_heads: usize,
    pub fusion: FusionMode,
    pub variant: Variant,
    pub dropout: f64,
    /// 0 selects the default of half the fused width.
    pub classifier_hidden: usize,
    pub cooc_stage1_channels: usize,
    pub cooc_stage2_channels: usize,
}

impl ModelConfig {
    pub fn fused_width(&self) -> usize {
        let m = self.modalities.len();
        match (self.variant, self.fusion) {
            (Variant::Keyless, _) => m * self.hidden_embedding,
            (_, FusionMode::Sum) => self.hidden_embedding,
            (_, FusionMode::Concat) => m * self.hidden_embedding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be >= 2".into()));
        }
        let e = self.hidden_embedding;
        let uses_uat = matches!(self.variant, Variant::Hamlet | Variant::Usa);
        if uses_uat && !e.is_multiple_of(self.uat_heads) {
            return Err(Error::Config(format!(
                "embedding size {e} is not divisible by uat_heads {}",
                self.uat_heads
            )));
        }
        if self.variant == Variant::Hamlet && !e.is_multiple_of(self.mat_heads) {
            return Err(Error::Config(format!(
                "embedding size {e} is not divisible by mat_heads {}",
                self.mat_heads
            )));
        }
        if self.variant == Variant::Keyless && self.fusion != FusionMode::Concat {
            return Err(Error::Config(
                "the keyless variant only supports concat fusion".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Learned context-vector attention over segments: scores
/// `softmax_s(u . tanh(W h_s))`, embedding `sum_s alpha_s h_s`.
#[derive(Debug, Clone)]
struct KeylessAttention {
    w: Linear,
    u: ParamId,
}

impl KeylessAttention {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, e_hidden: usize) -> Result<Self> {
        let w = Linear::new(store, rng, &format!("{name}.w"), e_hidden, e_hidden, false)?;
        let u = store.register(
            &format!("{name}.u"),
            crate::params::init_weight(rng, &[e_hidden, 1], e_hidden),
        )?;
        Ok(KeylessAttention { w, u })
    }

    /// Returns the pooled embedding and the segment weights `[B, S]`.
    fn forward<'t>(&self, sess: &mut Session<'t, '_>, h: Var<'t>) -> (Var<'t>, Var<'t>) {
        let shape = h.shape();
        let (b, s) = (shape[0], shape[1]);
        let scores = self.w.forward(sess, h).tanh();
        let u = sess.param(self.u);
        let alphas = scores.matmul(u).reshape(&[b, s]).softmax(1);
        let weighted = h.mul(alphas.reshape(&[b, s, 1]));
        (weighted.sum_axes(&[1], false), alphas)
    }
}

#[derive(Debug, Clone)]
struct Classifier {
    fc1: Linear,
    bn: BatchNorm,
    dropout: Dropout,
    fc2: Linear,
}

impl Classifier {
    fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        in_dim: usize,
        hidden: usize,
        classes: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Classifier {
            fc1: Linear::new(store, rng, "classifier.fc1", in_dim, hidden, true)?,
            bn: BatchNorm::new(store, "classifier.bn", BatchNormMode::OneD, hidden)?,
            dropout: Dropout::new(dropout)?,
            fc2: Linear::new(store, rng, "classifier.fc2", hidden, classes, true)?,
        })
    }

    fn forward<'t>(&self, sess: &mut Session<'t, '_>, fused: Var<'t>) -> Var<'t> {
        let h = self.fc1.forward(sess, fused);
        let h = self.bn.forward(sess, h).relu();
        let h = self.dropout.forward(sess, h);
        self.fc2.forward(sess, h)
    }
}

/// Attention records from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardMaps {
    /// Per-modality segment attention (UAT), in modality order.
    pub unimodal: Vec<(String, AttentionBatch)>,
    /// Modality-set attention (MAT), when the variant has one.
    pub fusion: Option<AttentionBatch>,
}

pub struct HamletModel {
    pub config: ModelConfig,
    encoders: Vec<ModalityEncoder>,
    uat: Vec<MultiHeadAttention>,
    keyless: Vec<KeylessAttention>,
    mat: Option<MultiHeadAttention>,
    classifier: Classifier,
}

/// Builds any variant; `build_baseline` is the same entry point with the
/// variant taken from the config.
pub fn build_model(config: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<HamletModel> {
    config.validate()?;
    let root = Rng::new(seed);
    let e_s = config.spatial_embedding;
    let e_h = config.hidden_embedding;

    let mut encoders = Vec::with_capacity(config.modalities.len());
    for spec in &config.modalities {
        let mut rng = root.fork(&format!("encoder.{}", spec.name));
        let prefix = format!("encoder.{}", spec.name);
        let spatial = match spec.encoder {
            EncoderKind::Stub => SpatialEncoder::Stub(StubSpatialEncoder::new(
                store,
                &mut rng,
                &format!("{prefix}.spatial"),
                spec.layout.width(),
                e_s,
            )?),
            EncoderKind::Cooccurrence => {
                let (points, coords) = match spec.layout {
                    FeatureLayout::Points { points, coords } => (points, coords),
                    FeatureLayout::Flat(_) => {
                        return Err(Error::Config(format!(
                            "modality '{}' uses the co-occurrence encoder but is not point-structured",
                            spec.name
                        )))
                    }
                };
                SpatialEncoder::Cooccurrence(CooccurrenceEncoder::new(
                    store,
                    &mut rng,
                    &format!("{prefix}.spatial"),
                    points,
                    coords,
                    config.cooc_stage1_channels,
                    config.cooc_stage2_channels,
                    config.dropout,
                    e_s,
                )?)
            }
        };
        let lstm = Lstm::new(
            store,
            &mut rng,
            &format!("{prefix}.lstm"),
            e_s,
            e_h,
            config.lstm_layers,
        )?;
        encoders.push(ModalityEncoder {
            modality_id: spec.name.clone(),
            spatial,
            lstm,
            dropout: Dropout::new(config.dropout)?,
        });
    }

    let mut uat = Vec::new();
    let mut keyless = Vec::new();
    match config.variant {
        Variant::Hamlet | Variant::Usa => {
            for spec in &config.modalities {
                let mut rng = root.fork(&format!("uat.{}", spec.name));
                uat.push(MultiHeadAttention::new(
                    store,
                    &mut rng,
                    &format!("uat.{}", spec.name),
                    e_h,
                    e_h,
                    config.uat_heads,
                )?);
            }
        }
        Variant::Keyless => {
            for spec in &config.modalities {
                let mut rng = root.fork(&format!("keyless.{}", spec.name));
                keyless.push(KeylessAttention::new(
                    store,
                    &mut rng,
                    &format!("keyless.{}", spec.name),
                    e_h,
                )?);
            }
        }
        Variant::Nsa => {}
    }

    let mat = if config.variant == Variant::Hamlet {
        let mut rng = root.fork("mat");
        Some(MultiHeadAttention::new(
            store,
            &mut rng,
            "mat",
            e_h,
            e_h,
            config.mat_heads,
        )?)
    } else {
        None
    };

    let fused = config.fused_width();
    let hidden = if config.classifier_hidden > 0 {
        config.classifier_hidden
    } else {
        (fused / 2).max(1)
    };
    let mut rng = root.fork("classifier");
    let classifier = Classifier::new(
        store,
        &mut rng,
        fused,
        hidden,
        config.class_count,
        config.dropout,
    )?;

    Ok(HamletModel {
        config: config.clone(),
        encoders,
        uat,
        keyless,
        mat,
        classifier,
    })
}

/// Alias that makes the baseline construction path explicit.
pub fn build_baseline(
    variant: Variant,
    config: &ModelConfig,
    store: &mut ParamStore,
    seed: u64,
) -> Result<HamletModel> {
    let mut cfg = config.clone();
    cfg.variant = variant;
    if variant == Variant::Keyless {
        cfg.fusion = FusionMode::Concat;
    }
    build_model(&cfg, store, seed)
}

impl HamletModel {
    /// Runs the full pipeline. `modalities` may arrive in any order; they
    /// are matched by name and every configured modality must be present.
    pub fn forward<'t>(
        &self,
        sess: &mut Session<'t, '_>,
        modalities: &[SegmentedSequence],
    ) -> Result<(Var<'t>, ForwardMaps)> {
        let mut maps = ForwardMaps::default();
        let mut batch_size = None;
        let mut embeddings = Vec::with_capacity(self.encoders.len());
        for (mi, enc) in self.encoders.iter().enumerate() {
            let seq = modalities
                .iter()
                .find(|s| s.modality_id == enc.modality_id)
                .ok_or_else(|| Error::MissingModality(enc.modality_id.clone()))?;
            match batch_size {
                None => batch_size = Some(seq.batch_size()),
                Some(b) if b != seq.batch_size() => {
                    return Err(Error::Contract(format!(
                        "modality '{}' has batch size {} but expected {b}",
                        enc.modality_id,
                        seq.batch_size()
                    )))
                }
                _ => {}
            }
            let hidden = enc.forward(sess, seq)?;
            let embedding = match self.config.variant {
                Variant::Hamlet | Variant::Usa => {
                    let (emb, attn) = uat_encode(sess, &self.uat[mi], hidden);
                    maps.unimodal.push((enc.modality_id.clone(), attn));
                    emb
                }
                Variant::Keyless => {
                    let (emb, _alphas) = self.keyless[mi].forward(sess, hidden);
                    emb
                }
                Variant::Nsa => hidden.sum_axes(&[1], false),
            };
            embeddings.push(embedding);
        }

        let fused = match &self.mat {
            Some(mat) => {
                let (fused, attn) = mat_fuse(sess, mat, &embeddings, self.config.fusion)?;
                maps.fusion = Some(attn);
                fused
            }
            None => plain_fuse(&embeddings, self.config.fusion),
        };
        let logits = self.classifier.forward(sess, fused);
        Ok((logits, maps))
    }
}

/// Fixed fusion without attention: elementwise sum or concatenation.
fn plain_fuse<'t>(embeddings: &[Var<'t>], mode: FusionMode) -> Var<'t> {
    match mode {
        FusionMode::Sum => {
            let mut acc = embeddings[0];
            for e in &embeddings[1..] {
                acc = acc.add(*e);
            }
            acc
        }
        FusionMode::Concat => ops::concat(embeddings, 1),
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    ops::cross_entropy(logits, labels)
}

/// Adds a seeded uniform jitter to every trainable parameter.
///
/// Gradient checks run at such a generic point rather than at the fresh
/// init, where near-symmetric softmax scores leave the query/key
/// gradients orders of magnitude below finite-difference resolution.
pub fn jitter_params(store: &mut ParamStore, seed: u64, magnitude: f64) {
    let mut rng = Rng::new(seed);
    for (_, p) in store.iter_mut() {
        if p.trainable {
            for v in p.value.data_mut().iter_mut() {
                *v += rng.uniform(-magnitude, magnitude);
            }
        }
    }
}

/// Argmax class per row of a `[B, C]` logit matrix.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let shape = logits.shape();
    debug_assert_eq!(shape.len(), 2);
    let (b, c) = (shape[0], shape[1]);
    (0..b)
        .map(|bi| {
            let row = &logits.data()[bi * c..(bi + 1) * c];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

// ── Checkpoints ─────────────────────────────────────────────────────
//
// Binary layout (all integers little-endian):
//   magic "HAMLETC1" | version u32 | config hash u64
//   | config length u64 | config JSON bytes
//   | entry count u64
//   | per entry, sorted by name:
//     name length u64 | name bytes | trainable u8
//     | rank u64 | dims u64 each | element count u64 | f64 data
//
// Round-trips are bit-exact: the same bytes come back out.

const CHECKPOINT_MAGIC: &[u8; 8] = b"HAMLETC1";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, store: &ParamStore, config_json: &str) -> Result<()> {
    let mut entries: Vec<&crate::params::Param> = store.iter().map(|(_, p)| p).collect();
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&stable_hash(config_json.as_bytes()).to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for p in entries {
        out.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.value.shape().len() as u64).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(p.value.numel() as u64).to_le_bytes());
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub struct CheckpointEntry {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub struct Checkpoint {
    pub config_json: String,
    pub entries: Vec<CheckpointEntry>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    let u64_at = |cur: &mut usize| -> Result<u64> {
        let s = take(cur, 8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    };
    if take(&mut cur, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let stored_hash = u64_at(&mut cur)?;
    let cfg_len = u64_at(&mut cur)? as usize;
    let config_json = String::from_utf8(take(&mut cur, cfg_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("config is not valid UTF-8".into()))?;
    if stable_hash(config_json.as_bytes()) != stored_hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let count = u64_at(&mut cur)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u64_at(&mut cur)? as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not valid UTF-8".into()))?;
        let trainable = take(&mut cur, 1)?[0] != 0;
        let rank = u64_at(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64_at(&mut cur)? as usize);
        }
        let numel = u64_at(&mut cur)? as usize;
        if numel != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "entry '{name}': element count does not match shape"
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let s = take(&mut cur, 8)?;
            data.push(f64::from_le_bytes(s.try_into().unwrap()));
        }
        entries.push(CheckpointEntry {
            name,
            trainable,
            shape,
            data,
        });
    }
    Ok(Checkpoint {
        config_json,
        entries,
    })
}

/// Overwrites a freshly-built store with checkpoint values. Every entry
/// must match an existing parameter by name and shape, and vice versa.
pub fn restore_params(store: &mut ParamStore, checkpoint: &Checkpoint) -> Result<()> {
    if checkpoint.entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} entries but the model has {} parameters",
            checkpoint.entries.len(),
            store.len()
        )));
    }
    for entry in &checkpoint.entries {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{}'", entry.name)))?;
        let t = store.tensor_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' has shape {:?} but checkpoint stores {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        t.data_mut().copy_from_slice(&entry.data);
    }
    Ok(())
}
