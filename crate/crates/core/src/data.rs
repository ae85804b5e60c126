//! Dataset ingestion and generation.
//!
//! Datasets are a JSON manifest plus one headerless CSV per sample per
//! modality (rows = frames, columns = flattened features, decimal
//! floats). The synthetic generator writes the same format it loads, and
//! is deterministic per seed down to the byte.
//!
//! Standardization is per-channel z-scoring fit on a training split only
//! and applied lazily, so cross-validation folds never leak test
//! statistics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureLayout, SegmentedSequence};
use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

// ── Manifest ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityKind {
    /// Per-frame feature vector, dims `[E]`.
    Vector,
    /// Point grid, dims `[points, coords]`.
    Points,
    /// Flattened image frames, dims `[channels, height, width]`.
    ImageStub,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalityDescriptor {
    pub name: String,
    pub kind: ModalityKind,
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_rate: Option<f64>,
}

impl ModalityDescriptor {
    pub fn layout(&self) -> Result<FeatureLayout> {
        match self.kind {
            ModalityKind::Vector => {
                if self.dims.len() != 1 {
                    return Err(Error::Data(format!(
                        "modality '{}': vector kind expects dims [E], got {:?}",
                        self.name, self.dims
                    )));
                }
                Ok(FeatureLayout::Flat(self.dims[0]))
            }
            ModalityKind::Points => {
                if self.dims.len() != 2 {
                    return Err(Error::Data(format!(
                        "modality '{}': points kind expects dims [points, coords], got {:?}",
                        self.name, self.dims
                    )));
                }
                Ok(FeatureLayout::Points {
                    points: self.dims[0],
                    coords: self.dims[1],
                })
            }
            ModalityKind::ImageStub => {
                if self.dims.len() != 3 {
                    return Err(Error::Data(format!(
                        "modality '{}': image-stub kind expects dims [c, h, w], got {:?}",
                        self.name, self.dims
                    )));
                }
                Ok(FeatureLayout::Flat(self.dims.iter().product()))
            }
        }
    }

    pub fn width(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub actor: String,
    pub class_id: usize,
    /// modality name -> CSV path, relative to the manifest.
    pub files: BTreeMap<String, String>,
    pub frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub modalities: Vec<ModalityDescriptor>,
    pub samples: Vec<SampleRecord>,
}

// ── In-memory dataset ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MultimodalSample {
    pub id: String,
    pub actor: String,
    pub class_id: usize,
    /// modality name -> frames `[T, width]`
    pub modalities: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.manifest.classes.len()
    }

    /// Distinct actor ids, sorted.
    pub fn actors(&self) -> Vec<String> {
        let mut actors: Vec<String> = self.samples.iter().map(|s| s.actor.clone()).collect();
        actors.sort();
        actors.dedup();
        actors
    }

    pub fn modality(&self, name: &str) -> Option<&ModalityDescriptor> {
        self.manifest.modalities.iter().find(|m| m.name == name)
    }
}

// ── Loading ─────────────────────────────────────────────────────────

fn parse_csv(path: &Path, expected_width: usize) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Data(format!("cannot read '{}': {e}", path.display()))
    })?;
    let mut rows: Vec<f64> = Vec::new();
    let mut frames = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut width = 0usize;
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                msg: format!("non-numeric cell '{}'", cell.trim()),
            })?;
            rows.push(v);
            width += 1;
        }
        if width != expected_width {
            return Err(Error::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected {expected_width} columns, found {width}"),
            });
        }
        frames += 1;
    }
    if frames == 0 {
        return Err(Error::Data(format!("'{}' contains no frames", path.display())));
    }
    Tensor::new(vec![frames, expected_width], rows)
}

/// Loads a manifest and every referenced sample file. Returns raw
/// (unstandardized) data; fit a [`Standardizer`] on the training split.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| {
        Error::Data(format!("cannot read manifest '{}': {e}", manifest_path.display()))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: manifest_path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    validate_manifest(&manifest)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for record in &manifest.samples {
        let mut modalities = BTreeMap::new();
        for descriptor in &manifest.modalities {
            let rel = record.files.get(&descriptor.name).ok_or_else(|| {
                Error::Data(format!(
                    "sample '{}' is missing a file for modality '{}'",
                    record.id, descriptor.name
                ))
            })?;
            let tensor = parse_csv(&base.join(rel), descriptor.width())?;
            if tensor.shape()[0] != record.frames {
                return Err(Error::Data(format!(
                    "sample '{}' modality '{}': manifest says {} frames, file has {}",
                    record.id,
                    descriptor.name,
                    record.frames,
                    tensor.shape()[0]
                )));
            }
            modalities.insert(descriptor.name.clone(), tensor);
        }
        samples.push(MultimodalSample {
            id: record.id.clone(),
            actor: record.actor.clone(),
            class_id: record.class_id,
            modalities,
        });
    }
    Ok(Dataset { manifest, samples })
}

fn validate_manifest(manifest: &DatasetManifest) -> Result<()> {
    if manifest.samples.is_empty() {
        return Err(Error::Data(format!("dataset '{}' has no samples", manifest.name)));
    }
    if manifest.classes.is_empty() {
        return Err(Error::Data("manifest declares no classes".into()));
    }
    if manifest.modalities.is_empty() {
        return Err(Error::Data("manifest declares no modalities".into()));
    }
    for m in &manifest.modalities {
        m.layout()?;
    }
    let c = manifest.classes.len();
    for s in &manifest.samples {
        if s.class_id >= c {
            return Err(Error::LabelOutOfRange {
                label: s.class_id,
                classes: c,
            });
        }
    }
    Ok(())
}

// ── Standardization ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel z-scoring, fit on a chosen subset and invertible via the
/// stored statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub stats: BTreeMap<String, ChannelStats>,
}

impl Standardizer {
    /// Per-channel mean/std over every frame of the `indices` samples.
    pub fn fit(dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Contract("standardizer needs a non-empty split".into()));
        }
        let mut stats = BTreeMap::new();
        for descriptor in &dataset.manifest.modalities {
            let width = descriptor.width();
            let mut sum = vec![0.0f64; width];
            let mut sq = vec![0.0f64; width];
            let mut count = 0usize;
            for &i in indices {
                let frames = &dataset.samples[i].modalities[&descriptor.name];
                let t = frames.shape()[0];
                for f in 0..t {
                    for c in 0..width {
                        let v = frames.data()[f * width + c];
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
                count += t;
            }
            let n = count as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let std: Vec<f64> = sq
                .iter()
                .zip(&mean)
                .map(|(&s, &m)| ((s / n - m * m).max(0.0)).sqrt().max(1e-8))
                .collect();
            stats.insert(descriptor.name.clone(), ChannelStats { mean, std });
        }
        Ok(Standardizer { stats })
    }

    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        let mut out = dataset.clone();
        for sample in &mut out.samples {
            for (name, frames) in sample.modalities.iter_mut() {
                if let Some(cs) = self.stats.get(name) {
                    let width = cs.mean.len();
                    let data = frames.data_mut();
                    Self::standardize_rows(data, width, cs);
                }
            }
        }
        out
    }

    fn standardize_rows(data: &mut [f64], width: usize, cs: &ChannelStats) {
        for row in data.chunks_mut(width) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - cs.mean[c]) / cs.std[c];
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("cannot serialize standardizer: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

// ── Synthetic generation ────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticModality {
    pub name: String,
    pub kind: ModalityKind,
    pub dims: Vec<usize>,
}

fn default_amplitude() -> f64 {
    1.5
}

fn default_window_fraction() -> f64 {
    0.25
}

fn default_window_jitter() -> usize {
    2
}

/// Template waveform for informative modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Waveform {
    #[default]
    Sine,
    Square,
    /// Sine for even classes, square for odd.
    Alternating,
}

/// Recipe for a labeled multimodal dataset where each class plants a
/// distinctive template (class-specific frequency, channel phase, and
/// temporal window) into one informative modality; every other modality
/// carries pure Gaussian noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub modalities: Vec<SyntheticModality>,
    pub frames: usize,
    pub segments: usize,
    pub noise_sigma: f64,
    /// class index -> informative modality index; empty selects
    /// round-robin assignment.
    #[serde(default)]
    pub informative: Vec<usize>,
    pub samples_per_actor_per_class: usize,
    pub actors: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Template window length as a fraction of the sequence.
    #[serde(default = "default_window_fraction")]
    pub window_fraction: f64,
    /// Max per-sample shift of the window start, in frames.
    #[serde(default = "default_window_jitter")]
    pub window_jitter: usize,
    #[serde(default)]
    pub waveform: Waveform,
}

impl SyntheticSpec {
    pub fn informative_modality(&self, class: usize) -> usize {
        if self.informative.is_empty() {
            class % self.modalities.len()
        } else {
            self.informative[class]
        }
    }

    pub fn window_frames(&self) -> usize {
        ((self.frames as f64 * self.window_fraction).round() as usize).max(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic spec needs >= 2 classes".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("synthetic spec needs >= 1 modality".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.frames < self.segments || self.segments == 0 {
            return Err(Error::Config(format!(
                "frames {} must cover segments {}",
                self.frames, self.segments
            )));
        }
        if !self.informative.is_empty() {
            if self.informative.len() != self.classes {
                return Err(Error::Config(
                    "informative map must name one modality per class".into(),
                ));
            }
            if self.informative.iter().any(|&m| m >= self.modalities.len()) {
                return Err(Error::Config("informative map references unknown modality".into()));
            }
        }
        if self.actors == 0 || self.samples_per_actor_per_class == 0 {
            return Err(Error::Config("actors and samples per class must be >= 1".into()));
        }
        if self.window_frames() > self.frames {
            return Err(Error::Config("template window exceeds sequence length".into()));
        }
        for m in &self.modalities {
            let d = ModalityDescriptor {
                name: m.name.clone(),
                kind: m.kind,
                dims: m.dims.clone(),
                frame_rate: None,
            };
            d.layout()?;
        }
        Ok(())
    }
}

/// Deterministic synthetic dataset; the same seed produces identical
/// samples (and identical bytes once written).
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(seed);
    let window = spec.window_frames();
    let feasible = spec.frames - window;
    let mut samples = Vec::new();
    let mut records = Vec::new();
    for actor in 0..spec.actors {
        for class in 0..spec.classes {
            for trial in 0..spec.samples_per_actor_per_class {
                let mut rng = root.fork(&format!("sample/{actor}/{class}/{trial}"));
                let id = format!("a{actor}_c{class}_t{trial}");
                let informative = spec.informative_modality(class);
                let amp = spec.amplitude * rng.uniform(0.9, 1.1);
                // class-specific window, shifted per sample
                let base = if spec.classes > 1 {
                    class * feasible / (spec.classes - 1).max(1)
                } else {
                    0
                };
                let jitter = spec.window_jitter.min(feasible);
                let offset = if jitter > 0 {
                    rng.below(2 * jitter + 1) as isize - jitter as isize
                } else {
                    0
                };
                let start = (base as isize + offset).clamp(0, feasible as isize) as usize;

                let mut modalities = BTreeMap::new();
                let mut files = BTreeMap::new();
                for (mi, m) in spec.modalities.iter().enumerate() {
                    let width: usize = m.dims.iter().product();
                    let mut data = vec![0.0f64; spec.frames * width];
                    for v in data.iter_mut() {
                        *v = spec.noise_sigma * rng.normal(0.0, 1.0);
                    }
                    if mi == informative {
                        let freq = 1.0 + class as f64;
                        for t in 0..window {
                            let phase =
                                2.0 * std::f64::consts::PI * freq * t as f64 / window as f64;
                            for c in 0..width {
                                let channel_phase = c as f64 * std::f64::consts::PI / 4.0;
                                let wave = (phase + channel_phase).sin();
                                let value = match spec.waveform {
                                    Waveform::Sine => amp * wave,
                                    Waveform::Square => amp * wave.signum(),
                                    Waveform::Alternating => {
                                        if class % 2 == 0 {
                                            amp * wave
                                        } else {
                                            amp * wave.signum()
                                        }
                                    }
                                };
                                data[(start + t) * width + c] += value;
                            }
                        }
                    }
                    modalities.insert(
                        m.name.clone(),
                        Tensor::new(vec![spec.frames, width], data)?,
                    );
                    files.insert(m.name.clone(), format!("samples/{id}_{}.csv", m.name));
                }
                samples.push(MultimodalSample {
                    id: id.clone(),
                    actor: format!("actor{actor}"),
                    class_id: class,
                    modalities,
                });
                records.push(SampleRecord {
                    id,
                    actor: format!("actor{actor}"),
                    class_id: class,
                    files,
                    frames: spec.frames,
                });
            }
        }
    }
    let manifest = DatasetManifest {
        name: "synthetic".into(),
        classes: (0..spec.classes).map(|c| format!("class{c}")).collect(),
        modalities: spec
            .modalities
            .iter()
            .map(|m| ModalityDescriptor {
                name: m.name.clone(),
                kind: m.kind,
                dims: m.dims.clone(),
                frame_rate: None,
            })
            .collect(),
        samples: records,
    };
    Ok(Dataset { manifest, samples })
}

/// Writes manifest + per-sample CSVs in the format [`load_dataset`]
/// reads. Floats use the shortest round-trip decimal form, so
/// write-then-load reproduces values exactly.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("samples"))?;
    for (sample, record) in dataset.samples.iter().zip(&dataset.manifest.samples) {
        for (name, rel) in &record.files {
            let frames = &sample.modalities[name];
            let width = frames.shape()[1];
            let mut out = String::new();
            for row in frames.data().chunks(width) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            std::fs::write(dir.join(rel), out)?;
        }
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| Error::Data(format!("cannot serialize manifest: {e}")))?;
    std::fs::write(&manifest_path, json)?;
    Ok(manifest_path)
}

// ── Batching ────────────────────────────────────────────────────────

/// One training/eval batch: per-modality segmented sequences plus labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub modalities: Vec<SegmentedSequence>,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<String>,
}

pub fn make_batch(dataset: &Dataset, indices: &[usize], segments: usize) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut modalities = Vec::with_capacity(dataset.manifest.modalities.len());
    for descriptor in &dataset.manifest.modalities {
        let layout = descriptor.layout()?;
        let frames: Vec<Tensor> = indices
            .iter()
            .map(|&i| dataset.samples[i].modalities[&descriptor.name].clone())
            .collect();
        modalities.push(SegmentedSequence::from_samples(
            &descriptor.name,
            layout,
            frames,
            segments,
        )?);
    }
    Ok(Batch {
        modalities,
        labels: indices.iter().map(|&i| dataset.samples[i].class_id).collect(),
        sample_ids: indices
            .iter()
            .map(|&i| dataset.samples[i].id.clone())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 2,
            modalities: vec![
                SyntheticModality {
                    name: "imu".into(),
                    kind: ModalityKind::Vector,
                    dims: vec![4],
                },
                SyntheticModality {
                    name: "emg".into(),
                    kind: ModalityKind::Vector,
                    dims: vec![3],
                },
            ],
            frames: 20,
            segments: 4,
            noise_sigma: 0.5,
            informative: vec![],
            samples_per_actor_per_class: 1,
            actors: 2,
            amplitude: 1.5,
            window_fraction: 0.25,
            window_jitter: 2,
            waveform: Waveform::Alternating,
        }
    }

    #[test]
    fn empty_manifest_is_rejected() {
        let manifest = DatasetManifest {
            name: "x".into(),
            classes: vec!["a".into()],
            modalities: vec![ModalityDescriptor {
                name: "m".into(),
                kind: ModalityKind::Vector,
                dims: vec![2],
                frame_rate: None,
            }],
            samples: vec![],
        };
        let err = validate_manifest(&manifest).unwrap_err();
        assert!(err.to_string().contains("no samples"), "{err}");
    }

    #[test]
    fn counting_two_actors_two_classes() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.1;
        let ds = generate_synthetic(&spec, 1).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.actors(), vec!["actor0", "actor1"]);
        let per_class: Vec<usize> = (0..2)
            .map(|c| ds.samples.iter().filter(|s| s.class_id == c).count())
            .collect();
        assert_eq!(per_class, vec![2, 2], "label balance");
    }

    #[test]
    fn zero_sigma_makes_noninformative_modalities_exactly_zero() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        let ds = generate_synthetic(&spec, 7).unwrap();
        for sample in &ds.samples {
            let informative = spec.informative_modality(sample.class_id);
            for (mi, m) in spec.modalities.iter().enumerate() {
                if mi != informative {
                    let t = &sample.modalities[&m.name];
                    assert!(t.data().iter().all(|&v| v == 0.0), "expected pure zeros");
                }
            }
        }
    }

    #[test]
    fn same_seed_is_byte_identical_on_disk() {
        let spec = small_spec();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_dataset(&generate_synthetic(&spec, 5).unwrap(), d1.path()).unwrap();
        write_dataset(&generate_synthetic(&spec, 5).unwrap(), d2.path()).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.json")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
        for entry in std::fs::read_dir(d1.path().join("samples")).unwrap() {
            let p1 = entry.unwrap().path();
            let p2 = d2.path().join("samples").join(p1.file_name().unwrap());
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn template_variance_concentrates_in_window() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        spec.window_jitter = 0;
        let ds = generate_synthetic(&spec, 3).unwrap();
        let window = spec.window_frames();
        let feasible = spec.frames - window;
        for sample in &ds.samples {
            let informative = spec.informative_modality(sample.class_id);
            let m = &spec.modalities[informative];
            let frames = &sample.modalities[&m.name];
            let width = m.dims[0];
            let start = sample.class_id * feasible / (spec.classes - 1).max(1);
            let total: f64 = frames.data().iter().map(|v| v * v).sum();
            let inside: f64 = (start..start + window)
                .flat_map(|t| (0..width).map(move |c| (t, c)))
                .map(|(t, c)| {
                    let v = frames.data()[t * width + c];
                    v * v
                })
                .sum();
            assert!(inside / total > 0.9, "window energy fraction {}", inside / total);
        }
    }

    #[test]
    fn write_then_load_roundtrips_exactly() {
        let spec = small_spec();
        let ds = generate_synthetic(&spec, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&loaded.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.actor, b.actor);
            assert_eq!(a.class_id, b.class_id);
            for (name, t) in &a.modalities {
                assert_eq!(t.data(), b.modalities[name].data(), "exact float round-trip");
            }
        }
    }

    #[test]
    fn loader_reports_file_and_line_for_bad_cells() {
        let spec = small_spec();
        let ds = generate_synthetic(&spec, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        // corrupt one cell on line 3
        let victim = dir.path().join("samples/a0_c0_t0_imu.csv");
        let mut text = std::fs::read_to_string(&victim).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let mut broken: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        broken[2] = "1.0,oops,3.0,4.0".into();
        text = broken.join("\n");
        std::fs::write(&victim, text).unwrap();
        let err = load_dataset(&manifest).unwrap_err();
        match err {
            Error::Parse { line, ref msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("oops"), "{msg}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn standardization_yields_unit_stats_on_train_split() {
        let mut spec = small_spec();
        spec.actors = 4;
        spec.samples_per_actor_per_class = 3;
        let ds = generate_synthetic(&spec, 9).unwrap();
        let train: Vec<usize> = (0..ds.len() / 2).collect();
        let standardizer = Standardizer::fit(&ds, &train).unwrap();
        let std_ds = standardizer.apply(&ds);
        // recompute statistics over the same split: mean ~ 0, std ~ 1
        let recomputed = Standardizer::fit(&std_ds, &train).unwrap();
        for cs in recomputed.stats.values() {
            for &m in &cs.mean {
                assert!(m.abs() < 1e-9, "mean {m}");
            }
            for &s in &cs.std {
                assert!((s - 1.0).abs() < 1e-9, "std {s}");
            }
        }
    }

    #[test]
    fn batch_carries_labels_and_segments() {
        let spec = small_spec();
        let ds = generate_synthetic(&spec, 4).unwrap();
        let batch = make_batch(&ds, &[0, 2, 3], spec.segments).unwrap();
        assert_eq!(batch.modalities.len(), 2);
        assert_eq!(batch.labels.len(), 3);
        assert_eq!(batch.modalities[0].segment_count, 4);
        assert_eq!(batch.modalities[0].batch_size(), 3);
    }

    #[test]
    fn informative_map_is_validated() {
        let mut spec = small_spec();
        spec.informative = vec![0];
        assert!(spec.validate().is_err(), "length mismatch");
        spec.informative = vec![0, 5];
        assert!(spec.validate().is_err(), "unknown modality");
        spec.informative = vec![1, 0];
        assert!(spec.validate().is_ok());
    }
}
