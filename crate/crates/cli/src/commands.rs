//! Command implementations: train, eval, sweep, attention export, and
//! synthetic data generation.

use std::path::{Path, PathBuf};

use serde::Serialize;

use hamlet_core::config::RunConfig;
use hamlet_core::data::{make_batch, write_dataset, Dataset, Standardizer};
use hamlet_core::model::{
    build_model, load_checkpoint, restore_params, save_checkpoint, HamletModel,
};
use hamlet_core::numerics::{Rng, Tape};
use hamlet_core::params::{ParamStore, Session};
use hamlet_core::training::{evaluate, loaocv, train};
use hamlet_core::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const STANDARDIZER_FILE: &str = "standardizer.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Train on the configured dataset (the whole set is the training
/// split), then persist every artifact needed to reproduce or reuse the
/// run.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out_dir = &cfg.output.dir;
    std::fs::create_dir_all(out_dir)?;

    let dataset = cfg.resolve_dataset()?;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let standardizer = Standardizer::fit(&dataset, &indices)?;
    let std_data = standardizer.apply(&dataset);

    let model_cfg = cfg.model_config(&dataset)?;
    let mut store = ParamStore::new();
    let model = build_model(&model_cfg, &mut store, cfg.training.seed)?;
    let opts = cfg.train_options();
    let history = train(
        &model,
        &mut store,
        &std_data,
        &indices,
        None,
        cfg.segments(),
        &opts,
    )?;

    save_checkpoint(&out_dir.join(CHECKPOINT_FILE), &store, &cfg.to_json())?;
    history.write_csv(&out_dir.join(HISTORY_FILE))?;
    standardizer.save(&out_dir.join(STANDARDIZER_FILE))?;
    std::fs::write(out_dir.join(CONFIG_FILE), cfg.to_toml())?;

    if let Some(last) = history.epochs.last() {
        println!(
            "trained {} epochs: loss {:.6}, train accuracy {:.2}%",
            history.epochs.len(),
            last.train_loss,
            last.train_acc * 100.0
        );
    }
    println!("artifacts written to {}", out_dir.display());
    Ok(())
}

/// Rebuilds a model from a checkpoint plus the dataset it should run on.
pub fn load_model_from_checkpoint(
    checkpoint: &Path,
    data_override: Option<&Path>,
) -> Result<(RunConfig, Dataset, HamletModel, ParamStore, Option<Standardizer>)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = RunConfig::from_json(&ckpt.config_json)?;
    let dataset = match data_override {
        Some(path) => hamlet_core::data::load_dataset(path)?,
        None => cfg.resolve_dataset()?,
    };
    let model_cfg = cfg.model_config(&dataset)?;
    let mut store = ParamStore::new();
    let model = build_model(&model_cfg, &mut store, cfg.training.seed)?;
    restore_params(&mut store, &ckpt)?;
    let standardizer_path = checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join(STANDARDIZER_FILE);
    let standardizer = if standardizer_path.exists() {
        Some(Standardizer::load(&standardizer_path)?)
    } else {
        None
    };
    Ok((cfg, dataset, model, store, standardizer))
}

pub fn cmd_eval(checkpoint: &Path, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (cfg, dataset, model, mut store, standardizer) =
        load_model_from_checkpoint(checkpoint, data)?;
    let dataset = match &standardizer {
        Some(s) => s.apply(&dataset),
        None => dataset,
    };
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let report = evaluate(
        &model,
        &mut store,
        &dataset,
        &indices,
        cfg.training.batch_size,
        cfg.segments(),
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Data(format!("cannot serialize report: {e}")))?;
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, &json)?;
    }
    Ok(())
}

/// One sweep cell result; `metric` is mean cross-validated top-1
/// accuracy, or NaN when the cell failed.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub uat_heads: usize,
    pub mat_heads: usize,
    pub fusion: String,
    pub metric: f64,
}

pub fn cmd_sweep(cfg: &RunConfig, cells: &[String], fusions: &[String]) -> Result<()> {
    let out_dir = &cfg.output.dir;
    std::fs::create_dir_all(out_dir)?;
    let dataset = cfg.resolve_dataset()?;

    let mut parsed_cells = Vec::new();
    for cell in cells {
        let (u, m) = cell
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("cell '{cell}' is not of the form uat:mat")))?;
        let u: usize = u
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad head count in '{cell}'")))?;
        let m: usize = m
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad head count in '{cell}'")))?;
        parsed_cells.push((u, m));
    }

    let mut results = Vec::new();
    for fusion in fusions {
        let fusion_spec: hamlet_core::config::FusionSpec = fusion.parse()?;
        for &(uat, mat) in &parsed_cells {
            let mut cell_cfg = cfg.clone();
            cell_cfg.model.uat_heads = uat;
            cell_cfg.model.mat_heads = mat;
            cell_cfg.model.fusion = fusion_spec;
            let metric = run_sweep_cell(&cell_cfg, &dataset);
            let metric = match metric {
                Ok(m) => m,
                Err(err) => {
                    eprintln!("cell uat={uat} mat={mat} fusion={fusion_spec} failed: {err}");
                    f64::NAN
                }
            };
            println!("uat={uat} mat={mat} fusion={fusion_spec}: {metric:.4}");
            results.push(SweepCell {
                uat_heads: uat,
                mat_heads: mat,
                fusion: fusion_spec.to_string(),
                metric,
            });
        }
    }

    let mut csv = String::from("uat_heads,mat_heads,fusion,metric\n");
    for cell in &results {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            cell.uat_heads, cell.mat_heads, cell.fusion, cell.metric
        ));
    }
    std::fs::write(out_dir.join(SWEEP_FILE), csv)?;
    println!("sweep table written to {}", out_dir.join(SWEEP_FILE).display());
    Ok(())
}

fn run_sweep_cell(cfg: &RunConfig, dataset: &Dataset) -> Result<f64> {
    cfg.validate()?;
    let model_cfg = cfg.model_config(dataset)?;
    let report = loaocv(
        dataset,
        &model_cfg,
        cfg.segments(),
        &cfg.train_options(),
        cfg.workers(),
    )?;
    Ok(report.mean_top1)
}

/// One exported attention record: a modality's segment attention or the
/// fusion stage's modality attention, for one sample.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionRecord {
    pub sample_id: String,
    /// modality name, or "fusion" for the modality-set stage
    pub modality: String,
    pub head_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw: Option<Vec<Vec<Vec<f64>>>>,
    pub reduced: Vec<f64>,
}

pub fn export_attention_records(
    model: &HamletModel,
    store: &mut ParamStore,
    dataset: &Dataset,
    batch_size: usize,
    segments: usize,
    include_raw: bool,
) -> Result<Vec<AttentionRecord>> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut records = Vec::new();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = make_batch(dataset, chunk, segments)?;
        let tape = Tape::new();
        let mut sess = Session::new(&tape, store, false, Rng::new(0));
        let (_, maps) = model.forward(&mut sess, &batch.modalities)?;
        for (bi, sample_id) in batch.sample_ids.iter().enumerate() {
            for (name, attn) in &maps.unimodal {
                records.push(record_for(sample_id, name, attn.per_sample(bi), include_raw));
            }
            if let Some(attn) = &maps.fusion {
                records.push(record_for(sample_id, "fusion", attn.per_sample(bi), include_raw));
            }
        }
    }
    Ok(records)
}

fn record_for(
    sample_id: &str,
    modality: &str,
    map: hamlet_core::attention::AttentionMap,
    include_raw: bool,
) -> AttentionRecord {
    let shape = map.raw.shape().to_vec();
    let (h, l) = (shape[0], shape[1]);
    let raw = include_raw.then(|| {
        (0..h)
            .map(|hi| {
                (0..l)
                    .map(|i| {
                        (0..l)
                            .map(|j| map.raw.data()[(hi * l + i) * l + j])
                            .collect()
                    })
                    .collect()
            })
            .collect()
    });
    AttentionRecord {
        sample_id: sample_id.to_string(),
        modality: modality.to_string(),
        head_count: h,
        raw,
        reduced: map.reduced,
    }
}

pub fn cmd_export_attention(
    checkpoint: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
    include_raw: bool,
    per_sample: bool,
) -> Result<()> {
    let (cfg, dataset, model, mut store, standardizer) =
        load_model_from_checkpoint(checkpoint, data)?;
    let dataset = match &standardizer {
        Some(s) => s.apply(&dataset),
        None => dataset,
    };
    let records = export_attention_records(
        &model,
        &mut store,
        &dataset,
        cfg.training.batch_size,
        cfg.segments(),
        include_raw,
    )?;
    let to_json = |records: &[AttentionRecord]| -> Result<String> {
        serde_json::to_string_pretty(records)
            .map_err(|e| Error::Data(format!("cannot serialize attention maps: {e}")))
    };
    if per_sample {
        let dir = out
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("attention"));
        std::fs::create_dir_all(&dir)?;
        let mut ids: Vec<String> = records.iter().map(|r| r.sample_id.clone()).collect();
        ids.dedup();
        for id in ids {
            let subset: Vec<AttentionRecord> = records
                .iter()
                .filter(|r| r.sample_id == id)
                .cloned()
                .collect();
            std::fs::write(dir.join(format!("{id}.json")), to_json(&subset)?)?;
        }
        println!("attention maps written to {}", dir.display());
    } else {
        let json = to_json(&records)?;
        match out {
            Some(path) => {
                std::fs::write(path, &json)?;
                println!("attention maps written to {}", path.display());
            }
            None => println!("{json}"),
        }
    }
    Ok(())
}

pub fn cmd_generate_data(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.training.seed = seed;
    }
    let Some(spec) = cfg.data.synthetic.clone() else {
        return Err(Error::Config(
            "generate-data needs a [data.synthetic] section in the config".into(),
        ));
    };
    let dataset = hamlet_core::data::generate_synthetic(&spec, cfg.training.seed)?;
    std::fs::create_dir_all(out)?;
    let manifest = write_dataset(&dataset, out)?;
    println!(
        "wrote {} samples ({} classes, {} actors) to {}",
        dataset.len(),
        dataset.class_count(),
        dataset.actors().len(),
        manifest.display()
    );
    Ok(())
}
