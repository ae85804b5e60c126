//! Per-modality encoding: segmentation of raw frame streams, spatial
//! feature encoders, temporal pooling, and a stacked unidirectional LSTM.
//!
//! A modality's pipeline is
//! `frames -> segments -> spatial features (B x S x E_spatial) ->
//!  LSTM (B x S x E_hidden) -> relu -> dropout`,
//! after which the attention stages take over.
//!
//! Segmentation splits `T` frames into `S` contiguous segments; when
//! `T mod S != 0` the last segment absorbs the remainder so no frame is
//! ever dropped. Segment feature vectors come from a strided max pool
//! (kernel 5, stride 3) followed by an adaptive max over what remains.

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, BatchNormMode, Conv2d, Dropout, Linear};
use crate::numerics::ops::{concat, temporal_max_pool};
use crate::numerics::rng::Rng;
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;
use crate::params::{ParamStore, Session};

/// Strided pooling constants for segment-level features.
pub const POOL_KERNEL: usize = 5;
pub const POOL_STRIDE: usize = 3;

/// How a modality's per-frame feature vector is organized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLayout {
    /// Unstructured feature vector of the given width.
    Flat(usize),
    /// `points x coords` grid (skeleton joints, IMU/sEMG channels).
    Points { points: usize, coords: usize },
}

impl FeatureLayout {
    pub fn width(&self) -> usize {
        match *self {
            FeatureLayout::Flat(e) => e,
            FeatureLayout::Points { points, coords } => points * coords,
        }
    }
}

/// Contiguous segment boundaries for `frames` frames split `segments`
/// ways. The last segment absorbs any remainder.
pub fn segment_bounds(frames: usize, segments: usize) -> Result<Vec<(usize, usize)>> {
    if segments == 0 {
        return Err(Error::Contract("segment count must be >= 1".into()));
    }
    if frames < segments {
        return Err(Error::InputTooShort { frames, segments });
    }
    let base = frames / segments;
    let rem = frames % segments;
    let mut bounds = Vec::with_capacity(segments);
    let mut start = 0;
    for i in 0..segments {
        let len = if i == segments - 1 { base + rem } else { base };
        bounds.push((start, len));
        start += len;
    }
    Ok(bounds)
}

/// One sample's frame stream plus its segment boundaries.
#[derive(Debug, Clone)]
pub struct SampleFrames {
    /// `[frames, width]`
    pub frames: Tensor,
    pub bounds: Vec<(usize, usize)>,
}

/// A batch of segmented frames for one modality. Samples may have
/// different frame counts, but all share the segment count and feature
/// width.
#[derive(Debug, Clone)]
pub struct SegmentedSequence {
    pub modality_id: String,
    pub layout: FeatureLayout,
    pub samples: Vec<SampleFrames>,
    pub segment_count: usize,
    /// Base frames per segment (before the last segment's remainder).
    pub frames_per_segment: usize,
}

impl SegmentedSequence {
    /// Segment a uniform batch `[B, T, E]`.
    pub fn from_batch(
        modality_id: &str,
        layout: FeatureLayout,
        raw: &Tensor,
        segments: usize,
    ) -> Result<Self> {
        let shape = raw.shape();
        if shape.len() != 3 {
            return Err(Error::Contract(format!(
                "segment expects [batch, frames, features], got {shape:?}"
            )));
        }
        let (b, t, e) = (shape[0], shape[1], shape[2]);
        let mut per_sample = Vec::with_capacity(b);
        for bi in 0..b {
            let frames = Tensor::new(
                vec![t, e],
                raw.data()[bi * t * e..(bi + 1) * t * e].to_vec(),
            )?;
            per_sample.push(frames);
        }
        Self::from_samples(modality_id, layout, per_sample, segments)
    }

    /// Segment per-sample frame tensors `[T_i, E]`; `T_i` may vary.
    pub fn from_samples(
        modality_id: &str,
        layout: FeatureLayout,
        frames: Vec<Tensor>,
        segments: usize,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Contract("segment: empty batch".into()));
        }
        let width = layout.width();
        let mut samples = Vec::with_capacity(frames.len());
        let mut min_t = usize::MAX;
        for f in frames {
            let shape = f.shape();
            if shape.len() != 2 || shape[1] != width {
                return Err(Error::Contract(format!(
                    "modality '{modality_id}' expects frame width {width}, got {shape:?}"
                )));
            }
            let t = shape[0];
            min_t = min_t.min(t);
            samples.push(SampleFrames {
                bounds: segment_bounds(t, segments)?,
                frames: f,
            });
        }
        Ok(SegmentedSequence {
            modality_id: modality_id.to_string(),
            layout,
            samples,
            segment_count: segments,
            frames_per_segment: min_t / segments,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.samples.len()
    }

    pub fn feature_width(&self) -> usize {
        self.layout.width()
    }

    /// Segmentation is lossless: concatenating segment slices reproduces
    /// the original frames. Used by tests and the loader's sanity checks.
    pub fn reassemble(&self, sample: usize) -> Vec<f64> {
        let s = &self.samples[sample];
        let e = self.feature_width();
        let mut out = Vec::with_capacity(s.frames.numel());
        for &(start, len) in &s.bounds {
            out.extend_from_slice(&s.frames.data()[start * e..(start + len) * e]);
        }
        out
    }
}

// ── Spatial encoders ────────────────────────────────────────────────

/// Per-frame linear projection + relu, then temporal pooling to one
/// vector per segment. Stands in for heavyweight pretrained image
/// backbones behind the same interface.
#[derive(Debug, Clone)]
pub struct StubSpatialEncoder {
    proj: Linear,
    pub out_dim: usize,
}

impl StubSpatialEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(StubSpatialEncoder {
            proj: Linear::new(store, rng, name, in_dim, out_dim, true)?,
            out_dim,
        })
    }

    pub fn forward<'t>(
        &self,
        sess: &mut Session<'t, '_>,
        seq: &SegmentedSequence,
    ) -> Result<Var<'t>> {
        if seq.feature_width() != self.proj.in_dim {
            return Err(Error::Config(format!(
                "modality '{}' has feature width {} but the encoder expects {}",
                seq.modality_id,
                seq.feature_width(),
                self.proj.in_dim
            )));
        }
        let mut rows = Vec::with_capacity(seq.batch_size());
        for sample in &seq.samples {
            let frames = sess.tape().input(&sample.frames);
            let mut segs = Vec::with_capacity(sample.bounds.len());
            for &(start, len) in &sample.bounds {
                let seg = frames.narrow(0, start, len);
                let feat = self.proj.forward(sess, seg).relu();
                let pooled = temporal_max_pool(feat, 0, POOL_KERNEL, POOL_STRIDE);
                segs.push(pooled.reshape(&[1, self.out_dim]));
            }
            rows.push(concat(&segs, 0).reshape(&[1, seq.segment_count, self.out_dim]));
        }
        Ok(concat(&rows, 0))
    }
}

/// Two stacked 2D convolutions for point-structured modalities: stage 1
/// mixes coordinates within each frame, stage 2 mixes frames within a
/// segment. Each stage is followed by batch norm (2D), relu, and dropout;
/// the result is temporally pooled, flattened, and projected.
#[derive(Debug, Clone)]
pub struct CooccurrenceEncoder {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    dropout: Dropout,
    proj: Linear,
    pub points: usize,
    pub coords: usize,
    pub out_dim: usize,
}

/// Stage kernel sizes: 1x3 over coordinates, then 3x3 over
/// frames x features.
pub const COOC_KERNEL1: (usize, usize) = (1, 3);
pub const COOC_KERNEL2: (usize, usize) = (3, 3);

impl CooccurrenceEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        points: usize,
        coords: usize,
        stage1_channels: usize,
        stage2_channels: usize,
        dropout: f64,
        out_dim: usize,
    ) -> Result<Self> {
        if coords < COOC_KERNEL1.1 {
            return Err(Error::Config(format!(
                "co-occurrence encoder needs >= {} coords per point, got {coords}",
                COOC_KERNEL1.1
            )));
        }
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), 1, stage1_channels, COOC_KERNEL1, false)?;
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), BatchNormMode::TwoD, stage1_channels)?;
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), 1, stage2_channels, COOC_KERNEL2, false)?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), BatchNormMode::TwoD, stage2_channels)?;
        let d1 = stage1_channels * points * (coords - COOC_KERNEL1.1 + 1);
        let flat = stage2_channels * (d1 - COOC_KERNEL2.1 + 1);
        let proj = Linear::new(store, rng, &format!("{name}.proj"), flat, out_dim, true)?;
        Ok(CooccurrenceEncoder {
            conv1,
            bn1,
            conv2,
            bn2,
            dropout: Dropout::new(dropout)?,
            proj,
            points,
            coords,
            out_dim,
        })
    }

    pub fn forward<'t>(
        &self,
        sess: &mut Session<'t, '_>,
        seq: &SegmentedSequence,
    ) -> Result<Var<'t>> {
        let (points, coords) = match seq.layout {
            FeatureLayout::Points { points, coords } => (points, coords),
            FeatureLayout::Flat(_) => {
                return Err(Error::Config(format!(
                    "modality '{}' is not point-structured; use the stub encoder",
                    seq.modality_id
                )))
            }
        };
        if points != self.points || coords != self.coords {
            return Err(Error::Config(format!(
                "modality '{}' has {points}x{coords} points but the encoder expects {}x{}",
                seq.modality_id, self.points, self.coords
            )));
        }
        let d1 = self.conv1.out_channels * points * (coords - COOC_KERNEL1.1 + 1);
        let mut rows = Vec::with_capacity(seq.batch_size());
        for sample in &seq.samples {
            let frames = sess.tape().input(&sample.frames);
            let mut segs = Vec::with_capacity(sample.bounds.len());
            for &(start, len) in &sample.bounds {
                if len < COOC_KERNEL2.0 {
                    return Err(Error::Contract(format!(
                        "co-occurrence encoder needs >= {} frames per segment, got {len}",
                        COOC_KERNEL2.0
                    )));
                }
                // stage 1: intra-frame, frames act as the batch axis
                let seg = frames
                    .narrow(0, start, len)
                    .reshape(&[len, 1, points, coords]);
                let s1 = self.conv1.forward(sess, seg);
                let s1 = self.bn1.forward(sess, s1).relu();
                let s1 = self.dropout.forward(sess, s1);
                // stage 2: inter-frame over the segment
                let img = s1.reshape(&[1, 1, len, d1]);
                let s2 = self.conv2.forward(sess, img);
                let s2 = self.bn2.forward(sess, s2).relu();
                let s2 = self.dropout.forward(sess, s2);
                // pool the frame axis down to one feature map
                let pooled = temporal_max_pool(s2, 2, POOL_KERNEL, POOL_STRIDE);
                let flat_dim = self.conv2.out_channels * (d1 - COOC_KERNEL2.1 + 1);
                let flat = pooled.reshape(&[1, flat_dim]);
                segs.push(self.proj.forward(sess, flat));
            }
            rows.push(concat(&segs, 0).reshape(&[1, seq.segment_count, self.out_dim]));
        }
        Ok(concat(&rows, 0))
    }
}

/// Spatial encoder selection, a named plug-in per modality.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum SpatialEncoder {
    Stub(StubSpatialEncoder),
    Cooccurrence(CooccurrenceEncoder),
}

impl SpatialEncoder {
    pub fn forward<'t>(
        &self,
        sess: &mut Session<'t, '_>,
        seq: &SegmentedSequence,
    ) -> Result<Var<'t>> {
        match self {
            SpatialEncoder::Stub(e) => e.forward(sess, seq),
            SpatialEncoder::Cooccurrence(e) => e.forward(sess, seq),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            SpatialEncoder::Stub(e) => e.out_dim,
            SpatialEncoder::Cooccurrence(e) => e.out_dim,
        }
    }
}

// ── LSTM ────────────────────────────────────────────────────────────

/// Gate block order within the stacked weight matrices: input, forget,
/// candidate, output.
#[derive(Debug, Clone)]
struct LstmLayer {
    w_ih: crate::params::ParamId,
    w_hh: crate::params::ParamId,
    bias: crate::params::ParamId,
    in_dim: usize,
}

/// Stacked unidirectional LSTM over the segment axis; returns every
/// hidden state of the top layer.
#[derive(Debug, Clone)]
pub struct Lstm {
    layers: Vec<LstmLayer>,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("LSTM needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let d_in = if l == 0 { in_dim } else { hidden };
            layers.push(LstmLayer {
                w_ih: store.register(
                    &format!("{name}.l{l}.w_ih"),
                    crate::params::init_weight(rng, &[d_in, 4 * hidden], d_in),
                )?,
                w_hh: store.register(
                    &format!("{name}.l{l}.w_hh"),
                    crate::params::init_weight(rng, &[hidden, 4 * hidden], hidden),
                )?,
                bias: store.register(&format!("{name}.l{l}.bias"), Tensor::zeros(&[4 * hidden]))?,
                in_dim: d_in,
            });
        }
        Ok(Lstm { layers, hidden })
    }

    /// `[B, S, in_dim] -> [B, S, hidden]`, left-to-right with zero
    /// initial state.
    pub fn forward<'t>(&self, sess: &mut Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        let shape = x.shape();
        assert!(
            shape.len() == 3 && shape[2] == self.layers[0].in_dim,
            "lstm expects [batch, steps, {}], got {shape:?}",
            self.layers[0].in_dim
        );
        let (b, steps) = (shape[0], shape[1]);
        let h_dim = self.hidden;
        let mut seq = x;
        for layer in &self.layers {
            let w_ih = sess.param(layer.w_ih);
            let w_hh = sess.param(layer.w_hh);
            let bias = sess.param(layer.bias);
            let mut h = sess.tape().constant(vec![0.0; b * h_dim], vec![b, h_dim]);
            let mut c = h;
            let mut outs = Vec::with_capacity(steps);
            for s in 0..steps {
                let x_t = seq.narrow(1, s, 1).reshape(&[b, layer.in_dim]);
                let gates = x_t.matmul(w_ih).add(h.matmul(w_hh)).add(bias);
                let i = gates.narrow(1, 0, h_dim).sigmoid();
                let f = gates.narrow(1, h_dim, h_dim).sigmoid();
                let g = gates.narrow(1, 2 * h_dim, h_dim).tanh();
                let o = gates.narrow(1, 3 * h_dim, h_dim).sigmoid();
                c = f.mul(c).add(i.mul(g));
                h = o.mul(c.tanh());
                outs.push(h.reshape(&[b, 1, h_dim]));
            }
            seq = concat(&outs, 1);
        }
        seq
    }
}

/// Full unimodal pipeline: spatial encoder, LSTM, relu + dropout.
#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    pub modality_id: String,
    pub spatial: SpatialEncoder,
    pub lstm: Lstm,
    pub dropout: Dropout,
}

impl ModalityEncoder {
    pub fn forward<'t>(
        &self,
        sess: &mut Session<'t, '_>,
        seq: &SegmentedSequence,
    ) -> Result<Var<'t>> {
        let spatial = self.spatial.forward(sess, seq)?;
        let hidden = self.lstm.forward(sess, spatial);
        let activated = hidden.relu();
        Ok(self.dropout.forward(sess, activated))
    }
}
