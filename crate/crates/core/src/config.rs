//! Run configuration: one TOML file with `[model]`, `[training]`,
//! `[data]`, and `[output]` sections. Command-line flags override file
//! values; the effective (fully resolved) config is written next to run
//! outputs and reloads to an identical run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::FusionMode;
use crate::data::{generate_synthetic, load_dataset, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{EncoderKind, ModalitySpec, ModelConfig, Variant};
use crate::training::TrainOptions;

/// Fusion selection as spelled in configs: `mat-sum`, `mat-concat`,
/// `sum`, `concat`. The `mat-` prefix is only valid for the full model;
/// plain modes are for the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionSpec {
    #[serde(rename = "mat-sum")]
    MatSum,
    #[serde(rename = "mat-concat")]
    MatConcat,
    #[serde(rename = "sum")]
    PlainSum,
    #[serde(rename = "concat")]
    PlainConcat,
}

impl std::str::FromStr for FusionSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mat-sum" => Ok(FusionSpec::MatSum),
            "mat-concat" => Ok(FusionSpec::MatConcat),
            "sum" => Ok(FusionSpec::PlainSum),
            "concat" => Ok(FusionSpec::PlainConcat),
            other => Err(Error::Config(format!(
                "unknown fusion '{other}' (expected mat-sum, mat-concat, sum, or concat)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionSpec::MatSum => "mat-sum",
            FusionSpec::MatConcat => "mat-concat",
            FusionSpec::PlainSum => "sum",
            FusionSpec::PlainConcat => "concat",
        };
        f.write_str(s)
    }
}

impl FusionSpec {
    pub fn mode(&self) -> FusionMode {
        match self {
            FusionSpec::MatSum | FusionSpec::PlainSum => FusionMode::Sum,
            FusionSpec::MatConcat | FusionSpec::PlainConcat => FusionMode::Concat,
        }
    }

    pub fn uses_mat(&self) -> bool {
        matches!(self, FusionSpec::MatSum | FusionSpec::MatConcat)
    }
}

fn default_embedding() -> usize {
    128
}
fn default_spatial() -> usize {
    128
}
fn default_lstm_layers() -> usize {
    2
}
fn default_uat_heads() -> usize {
    1
}
fn default_mat_heads() -> usize {
    2
}
fn default_fusion() -> FusionSpec {
    FusionSpec::MatConcat
}
fn default_variant() -> Variant {
    Variant::Hamlet
}
fn default_dropout() -> f64 {
    0.3
}
fn default_cooc1() -> usize {
    16
}
fn default_cooc2() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_embedding")]
    pub embedding_size: usize,
    #[serde(default = "default_spatial")]
    pub spatial_embedding: usize,
    #[serde(default = "default_lstm_layers")]
    pub lstm_layers: usize,
    #[serde(default = "default_uat_heads")]
    pub uat_heads: usize,
    #[serde(default = "default_mat_heads")]
    pub mat_heads: usize,
    #[serde(default = "default_fusion")]
    pub fusion: FusionSpec,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// 0 selects half the fused width.
    #[serde(default)]
    pub classifier_hidden: usize,
    /// modality name -> encoder kind; unlisted modalities use the stub.
    #[serde(default)]
    pub encoders: BTreeMap<String, EncoderKind>,
    #[serde(default = "default_cooc1")]
    pub cooc_stage1_channels: usize,
    #[serde(default = "default_cooc2")]
    pub cooc_stage2_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embedding_size: default_embedding(),
            spatial_embedding: default_spatial(),
            lstm_layers: default_lstm_layers(),
            uat_heads: default_uat_heads(),
            mat_heads: default_mat_heads(),
            fusion: default_fusion(),
            variant: default_variant(),
            dropout: default_dropout(),
            classifier_hidden: 0,
            encoders: BTreeMap::new(),
            cooc_stage1_channels: default_cooc1(),
            cooc_stage2_channels: default_cooc2(),
        }
    }
}

fn default_lr() -> f64 {
    3e-4
}
fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    50
}
fn default_t0() -> usize {
    10
}
fn default_t_mult() -> u64 {
    2
}
fn default_weight_decay() -> f64 {
    1e-2
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_t0")]
    pub t0_epochs: usize,
    #[serde(default = "default_t_mult")]
    pub t_mult: u64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub schedule_per_epoch: bool,
    /// Worker threads for folds and sweep cells; 0 = one per fold, up to
    /// the machine's parallelism.
    #[serde(default)]
    pub workers: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            lr: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            t0_epochs: default_t0(),
            t_mult: default_t_mult(),
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            seed: default_seed(),
            schedule_per_epoch: false,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Path to a dataset manifest...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// ...or an inline synthetic recipe (exactly one of the two).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Segments per sequence; defaults to the synthetic spec's value or 8.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<usize>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_out_dir(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Relaxes the dropout range check below.
    #[serde(default)]
    pub allow_any_dropout: bool,
    /// NaN/Inf detection on every tape operation.
    #[serde(default)]
    pub check_finite: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config '{}': {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Canonical JSON form, embedded in checkpoints and hashed. The
    /// output directory is normalized away: it is run metadata, not part
    /// of what defines the trained model.
    pub fn to_json(&self) -> String {
        let mut normalized = self.clone();
        normalized.output = OutputSection::default();
        serde_json::to_string(&normalized).expect("config serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json)
            .map_err(|e| Error::Checkpoint(format!("embedded config does not parse: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.embedding_size == 0 || m.spatial_embedding == 0 {
            return Err(Error::Config("embedding sizes must be >= 1".into()));
        }
        let uses_uat = matches!(m.variant, Variant::Hamlet | Variant::Usa);
        if uses_uat && !m.embedding_size.is_multiple_of(m.uat_heads) {
            return Err(Error::Config(format!(
                "embedding_size {} is not divisible by uat_heads {}",
                m.embedding_size, m.uat_heads
            )));
        }
        if m.variant == Variant::Hamlet && !m.embedding_size.is_multiple_of(m.mat_heads) {
            return Err(Error::Config(format!(
                "embedding_size {} is not divisible by mat_heads {}",
                m.embedding_size, m.mat_heads
            )));
        }
        match (m.variant, m.fusion.uses_mat()) {
            (Variant::Hamlet, false) => {
                return Err(Error::Config(
                    "variant hamlet requires fusion mat-sum or mat-concat".into(),
                ))
            }
            (Variant::Hamlet, true) => {}
            (other, true) => {
                return Err(Error::Config(format!(
                    "variant {other} uses plain fusion; pick sum or concat"
                )))
            }
            (_, false) => {}
        }
        if m.variant == Variant::Keyless && m.fusion != FusionSpec::PlainConcat {
            return Err(Error::Config("variant keyless requires fusion concat".into()));
        }
        if !self.allow_any_dropout && !(0.2..=0.4).contains(&m.dropout) {
            return Err(Error::Config(format!(
                "dropout {} is outside [0.2, 0.4]; pass --allow-any-dropout to override",
                m.dropout
            )));
        }
        if self.allow_any_dropout && !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", m.dropout)));
        }
        if self.training.batch_size == 0 || self.training.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "data section must give a manifest or a synthetic spec, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "data section needs a manifest path or a synthetic spec".into(),
                ))
            }
            (None, Some(spec)) => spec.validate()?,
            (Some(_), None) => {}
        }
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.data
            .segments
            .or_else(|| self.data.synthetic.as_ref().map(|s| s.segments))
            .unwrap_or(8)
    }

    /// Loads the manifest or generates the synthetic dataset (seeded by
    /// the training seed).
    pub fn resolve_dataset(&self) -> Result<Dataset> {
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(path), None) => load_dataset(path),
            (None, Some(spec)) => generate_synthetic(spec, self.training.seed),
            _ => Err(Error::Config("exactly one data source is required".into())),
        }
    }

    /// Derives the model layout from the dataset's modality descriptors.
    pub fn model_config(&self, dataset: &Dataset) -> Result<ModelConfig> {
        let mut modalities = Vec::with_capacity(dataset.manifest.modalities.len());
        for descriptor in &dataset.manifest.modalities {
            let encoder = self
                .model
                .encoders
                .get(&descriptor.name)
                .copied()
                .unwrap_or(EncoderKind::Stub);
            modalities.push(ModalitySpec {
                name: descriptor.name.clone(),
                layout: descriptor.layout()?,
                encoder,
            });
        }
        for name in self.model.encoders.keys() {
            if dataset.modality(name).is_none() {
                return Err(Error::Config(format!(
                    "encoder override names unknown modality '{name}'"
                )));
            }
        }
        Ok(ModelConfig {
            modalities,
            class_count: dataset.class_count(),
            spatial_embedding: self.model.spatial_embedding,
            hidden_embedding: self.model.embedding_size,
            lstm_layers: self.model.lstm_layers,
            uat_heads: self.model.uat_heads,
            mat_heads: self.model.mat_heads,
            fusion: self.model.fusion.mode(),
            variant: self.model.variant,
            dropout: self.model.dropout,
            classifier_hidden: self.model.classifier_hidden,
            cooc_stage1_channels: self.model.cooc_stage1_channels,
            cooc_stage2_channels: self.model.cooc_stage2_channels,
        })
    }

    pub fn train_options(&self) -> TrainOptions {
        let t = &self.training;
        TrainOptions {
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            t0_epochs: t.t0_epochs,
            t_mult: t.t_mult,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            seed: t.seed,
            schedule_per_epoch: t.schedule_per_epoch,
            check_finite: self.check_finite,
        }
    }

    pub fn workers(&self) -> usize {
        if self.training.workers > 0 {
            self.training.workers
        } else {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        }
    }
}
