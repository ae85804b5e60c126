//! The `gradcheck` command: verifies the analytic gradient of every
//! building block and of the assembled model against central finite
//! differences, printing one line per block.
//!
//! The full-model check runs at a jittered (generic) parameter point;
//! at a fresh init the attention score gradients sit below what finite
//! differences can resolve at f64.

use std::path::Path;

use hamlet_core::attention::{mat_fuse, uat_encode, FusionMode, MultiHeadAttention};
use hamlet_core::config::RunConfig;
use hamlet_core::encoders::{
    CooccurrenceEncoder, FeatureLayout, Lstm, SegmentedSequence, StubSpatialEncoder,
};
use hamlet_core::layers::BATCH_NORM_EPS;
use hamlet_core::model::{
    build_model, cross_entropy_loss, jitter_params, EncoderKind, ModalitySpec, ModelConfig,
    Variant,
};
use hamlet_core::numerics::ops::{cross_entropy, temporal_max_pool};
use hamlet_core::numerics::{grad_check, Rng, Tensor};
use hamlet_core::params::{param_grad_check, ParamStore};
use hamlet_core::{Error, Result};

pub const ELEMENTARY_THRESHOLD: f64 = 1e-6;
pub const RECURRENT_THRESHOLD: f64 = 1e-5;
pub const BLOCK_THRESHOLD: f64 = 1e-4;
pub const FULL_MODEL_THRESHOLD: f64 = 1e-4;

struct BlockResult {
    name: &'static str,
    error: f64,
    threshold: f64,
}

/// Caps enforced on configs routed into the full-model check; larger
/// models make the finite-difference pass both slow and noise-bound.
const MAX_EMBEDDING: usize = 16;
const MAX_SEGMENTS: usize = 4;

pub fn cmd_gradcheck(config: Option<&Path>) -> Result<()> {
    let full_cfg = match config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            cfg.validate()?;
            if cfg.model.embedding_size > MAX_EMBEDDING {
                return Err(Error::Config(format!(
                    "gradcheck caps embedding_size at {MAX_EMBEDDING}, config has {}",
                    cfg.model.embedding_size
                )));
            }
            if cfg.segments() > MAX_SEGMENTS {
                return Err(Error::Config(format!(
                    "gradcheck caps segments at {MAX_SEGMENTS}, config has {}",
                    cfg.segments()
                )));
            }
            Some(cfg)
        }
        None => None,
    };

    let results = vec![
        check_matmul()?,
        check_softmax()?,
        check_relu()?,
        check_elementwise()?,
        check_dropout()?,
        check_batch_norm()?,
        check_cross_entropy()?,
        check_temporal_pool()?,
        check_conv2d()?,
        check_lstm()?,
        check_cooccurrence()?,
        check_stub_encoder()?,
        check_uat()?,
        check_mat()?,
        check_full_model(full_cfg.as_ref())?,
    ];

    let mut failures = Vec::new();
    for r in &results {
        let ok = r.error < r.threshold;
        println!(
            "{:<24} max rel error {:.3e}  (threshold {:.0e})  {}",
            r.name,
            r.error,
            r.threshold,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failures.push(r.name);
        }
    }
    if failures.is_empty() {
        println!("all {} blocks pass", results.len());
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "blocks over threshold: {}",
            failures.join(", ")
        )))
    }
}

fn check_matmul() -> Result<BlockResult> {
    let mut rng = Rng::new(101);
    let a = Tensor::uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = Tensor::uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let report = grad_check(
        |_, v| {
            let p = v[0].matmul(v[1]);
            p.mul(p).sum_all()
        },
        &[a, b],
        1e-5,
    )?;
    Ok(BlockResult {
        name: "matmul",
        error: report.max_rel_error,
        threshold: ELEMENTARY_THRESHOLD,
    })
}

fn check_softmax() -> Result<BlockResult> {
    let mut rng = Rng::new(102);
    let x = Tensor::uniform(&mut rng, &[3, 5], -2.0, 2.0);
    let report = grad_check(
        |_, v| {
            let s = v[0].softmax(1);
            s.mul(s).sum_all()
        },
        &[x],
        1e-5,
    )?;
    Ok(BlockResult {
        name: "softmax",
        error: report.max_rel_error,
        threshold: ELEMENTARY_THRESHOLD,
    })
}

fn check_relu() -> Result<BlockResult> {
    let mut rng = Rng::new(103);
    let x = Tensor::uniform(&mut rng, &[20], -1.0, 1.0);
    let report = grad_check(
        |_, v| {
            let r = v[0].relu();
            r.mul(r).sum_all()
        },
        &[x],
        1e-5,
    )?;
    Ok(BlockResult {
        name: "relu",
        error: report.max_rel_error,
        threshold: ELEMENTARY_THRESHOLD,
    })
}

fn check_elementwise() -> Result<BlockResult> {
    let mut rng = Rng::new(104);
    let a = Tensor::uniform(&mut rng, &[12], -1.0, 1.0);
    let b = Tensor::uniform(&mut rng, &[12], 0.5, 1.5);
    let report = grad_check(
        |_, v| {
            let (a, b) = (v[0], v[1]);
            let h = a.mul(b).add(a.sub(b)).div(b.add_scalar(2.0));
            h.tanh().mul(a.sigmoid()).sum_all()
        },
        &[a, b],
        1e-5,
    )?;
    Ok(BlockResult {
        name: "elementwise",
        error: report.max_rel_error,
        threshold: ELEMENTARY_THRESHOLD,
    })
}

fn check_dropout() -> Result<BlockResult> {
    let mut rng = Rng::new(105);
    let x = Tensor::uniform(&mut rng, &[16], -1.0, 1.0);
    let report = grad_check(
        |_, v| {
            let mut mask_rng = Rng::new(9);
            let d = v[0].dropout(0.3, true, &mut mask_rng);
            d.mul(d).sum_all()
        },
        &[x],
        1e-5,
    )?;
    Ok(BlockResult {
        name: "dropout",
        error: report.max_rel_error,
        threshold: ELEMENTARY_THRESHOLD,
    })
}

fn check_batch_norm() -> Result<BlockResult> {
    let mut rng = Rng::new(106);
    let x = Tensor::uniform(&mut rng, &[4, 3], -1.0, 1.0);
    let gamma = Tensor::uniform(&mut rng, &[1, 3], 0.5, 1.5);
    let beta = Tensor::uniform(&mut rng, &[1, 3], -0.5, 0.5);
    let report = grad_check(
        |_, v| {
            let (x, g, b) = (v[0], v[1], v[2]);
            let mean = x.mean_axes(&[0], true);
            let centered = x.sub(mean);
            let var = centered.mul(centered).mean_axes(&[0], true);
            let normalized = centered.div(var.add_scalar(BATCH_NORM_EPS).sqrt());
            normalized.mul(g).add(b).tanh().sum_all()
        },
        &[x, gamma, beta],
        1e-5,
    )?;
    Ok(BlockResult {
        name: "batch_norm",
        error: report.max_rel_error,
        threshold: ELEMENTARY_THRESHOLD,
    })
}

fn check_cross_entropy() -> Result<BlockResult> {
    let mut rng = Rng::new(107);
    let logits = Tensor::uniform(&mut rng, &[3, 5], -2.0, 2.0);
    let report = grad_check(
        |_, v| cross_entropy(v[0], &[4, 0, 2]).expect("labels fit"),
        &[logits],
        1e-5,
    )?;
    Ok(BlockResult {
        name: "cross_entropy",
        error: report.max_rel_error,
        threshold: ELEMENTARY_THRESHOLD,
    })
}

fn check_temporal_pool() -> Result<BlockResult> {
    let mut rng = Rng::new(108);
    let x = Tensor::uniform(&mut rng, &[11, 3], -1.0, 1.0);
    let w = Tensor::uniform(&mut rng, &[3], -1.0, 1.0);
    let report = grad_check(
        |_, v| {
            let pooled = temporal_max_pool(v[0], 0, 5, 3);
            pooled.mul(v[1]).sum_all().tanh()
        },
        &[x, w],
        1e-5,
    )?;
    Ok(BlockResult {
        name: "temporal_pool",
        error: report.max_rel_error,
        threshold: ELEMENTARY_THRESHOLD,
    })
}

fn check_conv2d() -> Result<BlockResult> {
    let mut rng = Rng::new(109);
    let x = Tensor::uniform(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
    let w = Tensor::uniform(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
    let b = Tensor::uniform(&mut rng, &[3], -0.5, 0.5);
    let report = grad_check(
        |_, v| v[0].conv2d(v[1], v[2]).tanh().sum_all(),
        &[x, w, b],
        1e-5,
    )?;
    Ok(BlockResult {
        name: "conv2d",
        error: report.max_rel_error,
        threshold: ELEMENTARY_THRESHOLD,
    })
}

fn check_lstm() -> Result<BlockResult> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(110);
    let lstm = Lstm::new(&mut store, &mut rng, "lstm", 3, 4, 2)?;
    let mut data_rng = Rng::new(111);
    let x = Tensor::uniform(&mut data_rng, &[2, 4, 3], -1.0, 1.0);
    let report = param_grad_check(&mut store, false, 0, 1e-5, |sess| {
        let xv = sess.tape().input(&x);
        Ok(lstm.forward(sess, xv).tanh().sum_all())
    })?;
    Ok(BlockResult {
        name: "lstm",
        error: report.max_rel_error,
        threshold: RECURRENT_THRESHOLD,
    })
}

fn check_cooccurrence() -> Result<BlockResult> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(112);
    let enc = CooccurrenceEncoder::new(&mut store, &mut rng, "cooc", 3, 3, 2, 3, 0.25, 4)?;
    let mut data_rng = Rng::new(113);
    let raw = Tensor::uniform(&mut data_rng, &[1, 6, 9], -1.0, 1.0);
    let seq = SegmentedSequence::from_batch(
        "points",
        FeatureLayout::Points { points: 3, coords: 3 },
        &raw,
        2,
    )?;
    let report = param_grad_check(&mut store, true, 42, 1e-5, |sess| {
        Ok(enc.forward(sess, &seq)?.tanh().sum_all())
    })?;
    Ok(BlockResult {
        name: "cooccurrence_encoder",
        error: report.max_rel_error,
        threshold: RECURRENT_THRESHOLD,
    })
}

fn check_stub_encoder() -> Result<BlockResult> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(114);
    let enc = StubSpatialEncoder::new(&mut store, &mut rng, "stub", 4, 6)?;
    let mut data_rng = Rng::new(115);
    let raw = Tensor::uniform(&mut data_rng, &[2, 9, 4], -1.0, 1.0);
    let seq = SegmentedSequence::from_batch("vec", FeatureLayout::Flat(4), &raw, 3)?;
    let report = param_grad_check(&mut store, false, 0, 1e-5, |sess| {
        Ok(enc.forward(sess, &seq)?.tanh().sum_all())
    })?;
    Ok(BlockResult {
        name: "stub_encoder",
        error: report.max_rel_error,
        threshold: RECURRENT_THRESHOLD,
    })
}

fn check_uat() -> Result<BlockResult> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(116);
    let mha = MultiHeadAttention::new(&mut store, &mut rng, "uat", 8, 8, 2)?;
    jitter_params(&mut store, 117, 0.3);
    let mut data_rng = Rng::new(118);
    let h = Tensor::uniform(&mut data_rng, &[2, 3, 8], -1.0, 1.0);
    let report = param_grad_check(&mut store, false, 0, 1e-4, |sess| {
        let hv = sess.tape().input(&h);
        let (emb, _) = uat_encode(sess, &mha, hv);
        Ok(emb.tanh().sum_all())
    })?;
    Ok(BlockResult {
        name: "uat",
        error: report.max_rel_error,
        threshold: BLOCK_THRESHOLD,
    })
}

fn check_mat() -> Result<BlockResult> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(119);
    let mha = MultiHeadAttention::new(&mut store, &mut rng, "mat", 8, 8, 2)?;
    jitter_params(&mut store, 120, 0.3);
    let mut data_rng = Rng::new(121);
    let a = Tensor::uniform(&mut data_rng, &[2, 8], -1.0, 1.0);
    let b = Tensor::uniform(&mut data_rng, &[2, 8], -1.0, 1.0);
    let c = Tensor::uniform(&mut data_rng, &[2, 8], -1.0, 1.0);
    let report = param_grad_check(&mut store, false, 0, 1e-4, |sess| {
        let embs = [
            sess.tape().input(&a),
            sess.tape().input(&b),
            sess.tape().input(&c),
        ];
        let (fused, _) = mat_fuse(sess, &mha, &embs, FusionMode::Concat)?;
        Ok(fused.tanh().sum_all())
    })?;
    Ok(BlockResult {
        name: "mat",
        error: report.max_rel_error,
        threshold: BLOCK_THRESHOLD,
    })
}

/// Two stub modalities, batch 2, three segments, embedding 8 by default;
/// a config can reshape this within the caps.
fn check_full_model(cfg: Option<&RunConfig>) -> Result<BlockResult> {
    let (e_spatial, e_hidden, uat_heads, mat_heads, fusion, variant, lstm_layers) = match cfg {
        Some(c) => (
            c.model.spatial_embedding.min(MAX_EMBEDDING),
            c.model.embedding_size,
            c.model.uat_heads,
            c.model.mat_heads,
            c.model.fusion.mode(),
            c.model.variant,
            c.model.lstm_layers,
        ),
        None => (6, 8, 1, 2, FusionMode::Concat, Variant::Hamlet, 2),
    };
    let model_cfg = ModelConfig {
        modalities: vec![
            ModalitySpec {
                name: "rgb".into(),
                layout: FeatureLayout::Flat(4),
                encoder: EncoderKind::Stub,
            },
            ModalitySpec {
                name: "skeleton".into(),
                layout: FeatureLayout::Flat(5),
                encoder: EncoderKind::Stub,
            },
        ],
        class_count: 3,
        spatial_embedding: e_spatial,
        hidden_embedding: e_hidden,
        lstm_layers,
        uat_heads,
        mat_heads,
        fusion,
        variant,
        dropout: 0.0,
        classifier_hidden: 0,
        cooc_stage1_channels: 2,
        cooc_stage2_channels: 3,
    };
    model_cfg.validate()?;
    let mut store = ParamStore::new();
    let model = build_model(&model_cfg, &mut store, 21)?;
    jitter_params(&mut store, 1005, 0.4);
    let mut data_rng = Rng::new(50);
    let rgb = Tensor::uniform(&mut data_rng, &[2, 9, 4], -1.0, 1.0);
    let skel = Tensor::uniform(&mut data_rng, &[2, 9, 5], -1.0, 1.0);
    let batch = vec![
        SegmentedSequence::from_batch("rgb", FeatureLayout::Flat(4), &rgb, 3)?,
        SegmentedSequence::from_batch("skeleton", FeatureLayout::Flat(5), &skel, 3)?,
    ];
    let labels = [0usize, 2];
    let report = param_grad_check(&mut store, true, 7, 1e-4, |sess| {
        let (logits, _) = model.forward(sess, &batch)?;
        cross_entropy_loss(logits, &labels)
    })?;
    Ok(BlockResult {
        name: "full_model",
        error: report.max_rel_error,
        threshold: FULL_MODEL_THRESHOLD,
    })
}

