//! The command-level pipeline behind the `sail` binary: Stage I/II
//! training, explanation, evaluation, ablations and data export. Each
//! command writes into `config.out_dir` and leaves a `<command>.manifest.json`
//! carrying the config hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::attribution::{explain, AttributionMap, CamMethod, Target};
use crate::config::RunConfig;
use crate::error::{bail, Result, SailError};
use crate::io::{quantize, read_f64, write_f64, write_pgm, Checkpoint};
use crate::metrics::{evaluate_sample, mean_std, top3_frequency, ClassificationReport, SampleRecord};
use crate::model::{HeadVariant, SailModel};
use crate::synth::{make_dataset, stack_images, Splits, SyntheticScene};
use crate::training::{evaluate_classification, finetune_classification, pretrain_segmentation, EpochLog, Stage};

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const MAPS_DIR: &str = "maps";
/// Scenes per explanation batch.
const EXPLAIN_BATCH: usize = 16;

fn prepare(config: &RunConfig) -> Result<PathBuf> {
    let out = config.out_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.json"), config.to_json())?;
    Ok(out)
}

fn write_manifest(out: &Path, command: &str, config: &RunConfig, extra: Value) -> Result<()> {
    let mut doc = json!({ "command": command, "config_hash": config.hash() });
    if let (Some(d), Value::Object(e)) = (doc.as_object_mut(), extra) {
        d.extend(e);
    }
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(out.join(format!("{command}.manifest.json")), text)?;
    Ok(())
}

pub fn dataset(config: &RunConfig) -> Result<Splits> {
    let d = &config.data;
    make_dataset(d.n_train, d.n_val, d.n_test, &d.synth, config.seed)
}

fn metric(log: &EpochLog, name: &str) -> Option<f64> {
    log.metrics.iter().find(|(k, _)| *k == name).map(|(_, v)| *v)
}

fn log_csv(history: &[EpochLog], stage: Stage) -> String {
    let (header, cols): (&str, &[&str]) = match stage {
        Stage::Segmentation => ("epoch,lr,loss,dice,iou", &["val_dice", "val_iou"]),
        Stage::Classification => (
            "epoch,lr,loss,f1,auroc,kappa,accuracy,alpha",
            &["val_f1", "val_auroc", "val_kappa", "val_accuracy", "alpha"],
        ),
    };
    let mut s = format!("{header}\n");
    for e in history {
        let _ = write!(s, "{},{},{}", e.epoch, e.lr, e.train_loss);
        for c in cols {
            match metric(e, c) {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push_str(",NA"),
            }
        }
        s.push('\n');
    }
    s
}

/// Stage I: writes `stage1.ckpt` and `stage1_log.csv`.
pub fn cmd_pretrain(config: &RunConfig) -> Result<PathBuf> {
    let out = prepare(config)?;
    let data = dataset(config)?;
    let model = SailModel::new(config.model.clone(), config.seed)?;
    let trained = pretrain_segmentation(model, &data.train, &data.val, &config.pretrain)?;
    let path = out.join(STAGE1_CKPT);
    Checkpoint::from_trained(&trained, config).save(&path)?;
    fs::write(out.join("stage1_log.csv"), log_csv(&trained.history, Stage::Segmentation))?;
    write_manifest(
        &out,
        "pretrain",
        config,
        json!({ "files": [STAGE1_CKPT, "stage1_log.csv"], "best_epoch": trained.best_epoch }),
    )?;
    Ok(path)
}

fn load_stage(path: &Path, stage: Stage) -> Result<(Checkpoint, SailModel)> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.stage != stage {
        bail!(Usage, "{} holds a {:?} checkpoint, expected {:?}", path.display(), ck.meta.stage, stage);
    }
    let model = ck.to_model()?;
    Ok((ck, model))
}

fn finetune_model(config: &RunConfig, init: Option<&SailModel>, data: &Splits) -> Result<crate::training::TrainedCheckpoint> {
    let model = SailModel::new(config.model.clone(), config.seed)?;
    finetune_classification(model, init, &data.train, &data.val, &config.finetune)
}

/// Stage II: initializes from `checkpoint` (default `stage1.ckpt` in the
/// output directory) unless `from_scratch`; writes `stage2.ckpt` and
/// `stage2_log.csv`.
pub fn cmd_finetune(config: &RunConfig, checkpoint: Option<&Path>, from_scratch: bool) -> Result<PathBuf> {
    let init = if from_scratch {
        None
    } else {
        let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| config.out_dir.join(STAGE1_CKPT));
        Some(load_stage(&path, Stage::Segmentation)?.1)
    };
    let out = prepare(config)?;
    let data = dataset(config)?;
    let trained = finetune_model(config, init.as_ref(), &data)?;
    let path = out.join(STAGE2_CKPT);
    Checkpoint::from_trained(&trained, config).save(&path)?;
    fs::write(out.join("stage2_log.csv"), log_csv(&trained.history, Stage::Classification))?;
    write_manifest(
        &out,
        "finetune",
        config,
        json!({
            "files": [STAGE2_CKPT, "stage2_log.csv"],
            "best_epoch": trained.best_epoch,
            "from_scratch": trained.from_scratch,
        }),
    )?;
    Ok(path)
}

/// Explains every scene with the predicted class as target, batching and
/// parallelizing across scenes; results keep scene order.
pub fn explain_scenes(
    model: &SailModel,
    scenes: &[SyntheticScene],
    method: CamMethod,
    layer_id: &str,
) -> Result<Vec<AttributionMap>> {
    let ids = model.config().layer_ids();
    let available: Vec<&String> = ids
        .iter()
        .filter(|id| model.config().head_variant.uses_decoder() || !id.starts_with("dec."))
        .collect();
    if !available.iter().any(|id| *id == layer_id) {
        let list: Vec<&str> = available.iter().map(|s| s.as_str()).collect();
        bail!(Lookup, "unknown layer '{layer_id}'; valid ids: {}", list.join(", "));
    }
    let parts: Vec<Vec<AttributionMap>> = scenes
        .par_chunks(EXPLAIN_BATCH)
        .map(|chunk| {
            let images = stack_images(&chunk.iter().collect::<Vec<_>>())?;
            explain(model, &images, &Target::Predicted, method, layer_id)
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Writes `map_{i}.pgm`, `map_{i}.f64`, `index.csv` and `manifest.json`
/// under `dir`.
pub fn write_maps(dir: &Path, maps: &[AttributionMap], config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::from("sample,predicted_class,probability,zero_map\n");
    for (i, m) in maps.iter().enumerate() {
        write_pgm(&dir.join(format!("map_{i}.pgm")), &quantize(&m.values, u16::MAX), m.height, m.width, u16::MAX)?;
        write_f64(&dir.join(format!("map_{i}.f64")), &m.values)?;
        let _ = writeln!(index, "{i},{},{},{}", m.target_class, m.probability, u8::from(m.zero_map));
    }
    fs::write(dir.join("index.csv"), index)?;
    let (h, w) = maps.first().map_or((0, 0), |m| (m.height, m.width));
    let manifest = json!({
        "config_hash": config.hash(),
        "method": maps.first().map_or(config.xai.method, |m| m.method),
        "layer_id": maps.first().map_or(config.xai.layer_id.clone(), |m| m.layer_id.clone()),
        "count": maps.len(),
        "height": h,
        "width": w,
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Explains the test split with the Stage II checkpoint; returns the maps
/// directory.
pub fn cmd_explain(config: &RunConfig, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| config.out_dir.join(STAGE2_CKPT));
    let (_, model) = load_stage(&path, Stage::Classification)?;
    let data = dataset(config)?;
    let maps = explain_scenes(&model, &data.test, config.xai.method, &config.xai.layer_id)?;
    let out = prepare(config)?;
    let dir = out.join(MAPS_DIR);
    write_maps(&dir, &maps, config)?;
    write_manifest(&out, "explain", config, json!({ "files": [MAPS_DIR] }))?;
    Ok(dir)
}

/// A saved map as read back for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredMap {
    pub values: Vec<f64>,
    pub target_class: usize,
    pub zero_map: bool,
}

pub fn read_maps(dir: &Path) -> Result<(Value, Vec<StoredMap>)> {
    let manifest: Value = serde_json::from_str(
        &fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| SailError::Usage(format!("cannot read maps manifest in {}: {e}", dir.display())))?,
    )?;
    let index = fs::read_to_string(dir.join("index.csv"))?;
    let mut maps = Vec::new();
    for (i, line) in index.lines().skip(1).enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        let parsed = (cols.len() == 4 && cols[0] == i.to_string())
            .then(|| Some((cols[1].parse::<usize>().ok()?, cols[3] == "1")))
            .flatten();
        let Some((target_class, zero_map)) = parsed else {
            bail!(Corrupt, "bad line {} in {}", i + 2, dir.join("index.csv").display());
        };
        maps.push(StoredMap {
            values: read_f64(&dir.join(format!("map_{i}.f64")))?,
            target_class,
            zero_map,
        });
    }
    Ok((manifest, maps))
}

/// Scores each map against its scene, in parallel across scenes.
pub fn score_maps(
    model: &SailModel,
    scenes: &[SyntheticScene],
    maps: &[StoredMap],
    steps: usize,
) -> Result<Vec<SampleRecord>> {
    if maps.len() != scenes.len() {
        bail!(Usage, "{} maps for {} scenes", maps.len(), scenes.len());
    }
    scenes
        .par_iter()
        .zip(maps)
        .map(|(s, m)| {
            if m.values.len() != s.image.len() {
                bail!(Usage, "map has {} values, scene has {} pixels", m.values.len(), s.image.len());
            }
            evaluate_sample(model, &s.image_tensor(), &s.mask, &m.values, m.zero_map, m.target_class, steps)
        })
        .collect()
}

fn stored(maps: &[AttributionMap]) -> Vec<StoredMap> {
    maps.iter()
        .map(|m| StoredMap {
            values: m.values.clone(),
            target_class: m.target_class,
            zero_map: m.zero_map,
        })
        .collect()
}

fn fmt_layers(l: &[usize; 3]) -> String {
    format!("{};{};{}", l[0], l[1], l[2])
}

pub fn records_csv(records: &[SampleRecord]) -> String {
    let layers = records.first().map_or(0, |r| r.layer_distribution.len());
    let mut s = String::from("sample,rma,rra,deletion_auc,insertion_auc,top3_layers,top3_ratio");
    for l in 1..=layers {
        let _ = write!(s, ",m{l}");
    }
    s.push('\n');
    for (i, r) in records.iter().enumerate() {
        let _ = write!(
            s,
            "{i},{},{},{},{},{},{}",
            r.rma,
            r.rra,
            r.deletion_auc,
            r.insertion_auc,
            fmt_layers(&r.top3_layers),
            r.top3_ratio
        );
        for v in &r.layer_distribution {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Means, population standard deviations and the cohort top-3 frequency.
pub fn summarize(records: &[SampleRecord]) -> Result<Value> {
    let mut columns: Vec<(String, Vec<f64>)> = vec![
        ("rma".into(), records.iter().map(|r| r.rma).collect()),
        ("rra".into(), records.iter().map(|r| r.rra).collect()),
        ("deletion_auc".into(), records.iter().map(|r| r.deletion_auc).collect()),
        ("insertion_auc".into(), records.iter().map(|r| r.insertion_auc).collect()),
        ("top3_ratio".into(), records.iter().map(|r| r.top3_ratio).collect()),
    ];
    let layers = records.first().map_or(0, |r| r.layer_distribution.len());
    for l in 0..layers {
        columns.push((format!("m{}", l + 1), records.iter().map(|r| r.layer_distribution[l]).collect()));
    }
    let mut means = BTreeMap::new();
    let mut stds = BTreeMap::new();
    for (name, xs) in &columns {
        let (m, s) = mean_std(xs);
        means.insert(name.clone(), m);
        stds.insert(name.clone(), s);
    }
    let sets: Vec<[usize; 3]> = records.iter().map(|r| r.top3_layers).collect();
    let (modal, freq) = top3_frequency(&sets)?;
    Ok(json!({
        "count": records.len(),
        "mean": means,
        "std": stds,
        "top3_frequency": { "layers": modal, "frequency": freq },
    }))
}

fn report_json(r: &ClassificationReport) -> Value {
    serde_json::to_value(r).expect("report serializes")
}

/// Scores the maps in `maps` (default `<out>/maps`) against the test split;
/// writes `eval/metrics.csv` and `eval/summary.json`. Artifacts produced
/// under a different config hash are refused unless `force`.
pub fn cmd_evaluate(config: &RunConfig, checkpoint: Option<&Path>, maps: Option<&Path>, force: bool) -> Result<PathBuf> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| config.out_dir.join(STAGE2_CKPT));
    let (ck, model) = load_stage(&path, Stage::Classification)?;
    let maps_dir = maps.map(Path::to_path_buf).unwrap_or_else(|| config.out_dir.join(MAPS_DIR));
    let (manifest, stored) = read_maps(&maps_dir)?;
    let hash = config.hash();
    if !force {
        for (what, h) in [("maps", manifest["config_hash"].as_str().unwrap_or("")), ("checkpoint", ck.meta.config_hash.as_str())] {
            if h != hash {
                bail!(Config, "{what} were produced by config {h}, current config is {hash}; pass --force to override");
            }
        }
    }
    let data = dataset(config)?;
    if stored.len() != data.test.len() {
        bail!(Usage, "{} maps for {} test scenes", stored.len(), data.test.len());
    }
    let records = score_maps(&model, &data.test, &stored, config.xai.steps)?;
    let mut summary = summarize(&records)?;
    summary["config_hash"] = Value::from(hash);
    summary["classification"] = report_json(&evaluate_classification(&model, &data.test)?);
    summary["method"] = manifest["method"].clone();
    summary["layer_id"] = manifest["layer_id"].clone();

    let out = prepare(config)?;
    let dir = out.join("eval");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("metrics.csv"), records_csv(&records))?;
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(dir.join("summary.json"), text)?;
    write_manifest(&out, "evaluate", config, json!({ "files": ["eval/metrics.csv", "eval/summary.json"] }))?;
    Ok(dir)
}

fn mean_of(summary: &Value, key: &str) -> f64 {
    summary["mean"][key].as_f64().unwrap_or(f64::NAN)
}

/// Trains every head variant from the same Stage I backbone (or from
/// scratch) and writes `ablate_heads.csv` with classification and
/// explanation scores at the fusion layer.
pub fn cmd_ablate_heads(config: &RunConfig, checkpoint: Option<&Path>, from_scratch: bool) -> Result<PathBuf> {
    let init = if from_scratch {
        None
    } else {
        let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| config.out_dir.join(STAGE1_CKPT));
        Some(load_stage(&path, Stage::Segmentation)?.1)
    };
    let out = prepare(config)?;
    let data = dataset(config)?;
    let mut csv = String::from(
        "variant,auroc,auprc,accuracy,f1,kappa,rma,rra,deletion_auc,insertion_auc,top3_ratio,alpha\n",
    );
    for variant in HeadVariant::ALL {
        let mut cfg = config.clone();
        cfg.model.head_variant = variant;
        let trained = finetune_model(&cfg, init.as_ref(), &data)?;
        let model = &trained.model;
        let maps = explain_scenes(model, &data.test, cfg.xai.method, "fusion")?;
        let records = score_maps(model, &data.test, &stored(&maps), cfg.xai.steps)?;
        let summary = summarize(&records)?;
        let r = evaluate_classification(model, &data.test)?;
        let alpha = model.alpha().map_or("NA".to_string(), |a| a.to_string());
        let _ = writeln!(
            csv,
            "{variant},{},{},{},{},{},{},{},{},{},{},{alpha}",
            r.auroc,
            r.auprc,
            r.accuracy,
            r.f1,
            r.kappa,
            mean_of(&summary, "rma"),
            mean_of(&summary, "rra"),
            mean_of(&summary, "deletion_auc"),
            mean_of(&summary, "insertion_auc"),
            mean_of(&summary, "top3_ratio"),
        );
    }
    fs::write(out.join("ablate_heads.csv"), csv)?;
    write_manifest(
        &out,
        "ablate-heads",
        config,
        json!({ "files": ["ablate_heads.csv"], "from_scratch": from_scratch }),
    )?;
    Ok(out.join("ablate_heads.csv"))
}

/// Explains the Stage II model at every registered layer and writes
/// `ablate_layers.csv`.
pub fn cmd_ablate_layers(config: &RunConfig, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| config.out_dir.join(STAGE2_CKPT));
    let (_, model) = load_stage(&path, Stage::Classification)?;
    let out = prepare(config)?;
    let data = dataset(config)?;
    let mut csv = String::from("layer_id,rma,rra,deletion_auc,insertion_auc,top3_ratio,top3_layers,top3_frequency\n");
    for id in model.config().layer_ids() {
        let maps = explain_scenes(&model, &data.test, config.xai.method, &id)?;
        let records = score_maps(&model, &data.test, &stored(&maps), config.xai.steps)?;
        let summary = summarize(&records)?;
        let modal: Vec<usize> = serde_json::from_value(summary["top3_frequency"]["layers"].clone())?;
        let _ = writeln!(
            csv,
            "{id},{},{},{},{},{},{},{}",
            mean_of(&summary, "rma"),
            mean_of(&summary, "rra"),
            mean_of(&summary, "deletion_auc"),
            mean_of(&summary, "insertion_auc"),
            mean_of(&summary, "top3_ratio"),
            fmt_layers(&[modal[0], modal[1], modal[2]]),
            summary["top3_frequency"]["frequency"],
        );
    }
    fs::write(out.join("ablate_layers.csv"), csv)?;
    write_manifest(&out, "ablate-layers", config, json!({ "files": ["ablate_layers.csv"] }))?;
    Ok(out.join("ablate_layers.csv"))
}

/// Exports every scene as an 8-bit image PGM plus a layer-mask PGM
/// (`maxval = L`) under `data/<split>/`, with a `labels.csv` per split.
pub fn cmd_gen_data(config: &RunConfig) -> Result<PathBuf> {
    let out = prepare(config)?;
    let data = dataset(config)?;
    let root = out.join("data");
    for (name, scenes) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        let mut labels = String::from("sample,seed,label,lesion_pixels\n");
        for (i, s) in scenes.iter().enumerate() {
            let (h, w) = (s.height(), s.width());
            write_pgm(&dir.join(format!("scene_{i}_image.pgm")), &quantize(&s.image, 255), h, w, 255)?;
            let mask: Vec<u16> = s.mask.labels().iter().map(|&l| l as u16).collect();
            write_pgm(&dir.join(format!("scene_{i}_mask.pgm")), &mask, h, w, s.mask.layer_count() as u16)?;
            let _ = writeln!(labels, "{i},{},{},{}", s.seed, s.label, s.lesion_region.len());
        }
        fs::write(dir.join("labels.csv"), labels)?;
    }
    write_manifest(&out, "gen-data", config, json!({ "files": ["data"] }))?;
    Ok(root)
}
