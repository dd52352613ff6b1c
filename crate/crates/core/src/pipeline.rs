//! End-to-end operations behind the command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate, compute_metrics, confusion, loso_folds, ConfusionMatrix, EvalReport,
};
use crate::sampling::keyframe_downsample;
use crate::store::{write_atomic, Checkpoint, Dataset, DatasetMeta};
use crate::synthdata::gen_dataset;
use crate::train::{predict, train, TrainOutcome};

/// Synthetic clips downsampled to the encoder's frame count.
pub fn generate(cfg: &RunConfig) -> Result<Dataset> {
    cfg.synth.validate()?;
    let raw = gen_dataset(&cfg.synth)?;
    let samples = raw
        .iter()
        .map(|s| keyframe_downsample(s, cfg.encoder.frames).map(|(_, d)| d))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        meta: DatasetMeta {
            classes: cfg.synth.emotion_mode.class_names(),
            frames: cfg.encoder.frames,
            config_digest: cfg.digest(),
        },
        samples,
    })
}

fn check_classes(cfg: &RunConfig, classes: &[String]) -> Result<()> {
    if classes.len() != cfg.encoder.num_classes {
        return Err(Error::contract(format!(
            "dataset has {} classes but the model has {}",
            classes.len(),
            cfg.encoder.num_classes
        )));
    }
    Ok(())
}

pub fn evaluate(
    ckpt: &Checkpoint,
    data: &Dataset,
    indices: &[usize],
    fold_id: Option<String>,
) -> Result<EvalReport> {
    let cfg = &ckpt.manifest.config;
    check_classes(cfg, &data.meta.classes)?;
    if ckpt.manifest.classes != data.meta.classes {
        return Err(Error::contract("checkpoint and dataset class names differ"));
    }
    let seqs: Vec<_> = indices.iter().map(|&i| data.samples[i].clone()).collect();
    let preds = predict(&ckpt.params, cfg, &seqs)?;
    let labels: Vec<usize> = seqs.iter().map(|s| s.emotion).collect();
    let mut r = compute_metrics(&confusion(&preds, &labels, cfg.encoder.num_classes)?)?;
    r.fold_id = fold_id;
    Ok(r)
}

pub struct FoldResult {
    pub subject: String,
    pub outcome: TrainOutcome,
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
}

pub struct LosoResult {
    pub folds: Vec<FoldResult>,
    pub aggregate: EvalReport,
}

/// Trains one model per held-out subject (in parallel) and combines the
/// fold confusion matrices per `cfg.aggregation`.
pub fn run_loso(cfg: &RunConfig, data: &Dataset) -> Result<LosoResult> {
    check_classes(cfg, &data.meta.classes)?;
    let folds = loso_folds(&data.subject_ids());
    if let Some(f) = folds.iter().find(|f| f.train.is_empty()) {
        return Err(Error::contract(format!(
            "degenerate fold: holding out subject {} leaves no training data",
            f.test_subject
        )));
    }
    let results = folds
        .par_iter()
        .map(|f| {
            let train_set: Vec<_> = f.train.iter().map(|&i| data.samples[i].clone()).collect();
            let outcome = train(cfg, &train_set, &data.meta.classes)?;
            let checkpoint = Checkpoint::new(
                cfg,
                cfg.seed,
                data.meta.classes.clone(),
                outcome.params.clone(),
            );
            let report = evaluate(
                &checkpoint,
                data,
                &f.test,
                Some(format!("fold-{}", f.test_subject)),
            )?;
            Ok(FoldResult {
                subject: f.test_subject.clone(),
                outcome,
                checkpoint,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cms: Vec<ConfusionMatrix> = results.iter().map(|r| r.report.cm.clone()).collect();
    let mut agg = aggregate(&cms, cfg.aggregation)?;
    agg.fold_id = Some("loso".into());
    Ok(LosoResult {
        folds: results,
        aggregate: agg,
    })
}

/// Writes `report_<id>_<digest>.json` and `confusion_<id>_<digest>.csv`.
pub fn write_report(dir: &Path, report: &EvalReport, digest: &str) -> Result<(PathBuf, PathBuf)> {
    let id = report.fold_id.as_deref().unwrap_or("eval");
    let short = &digest[..digest.len().min(12)];
    let json_path = dir.join(format!("report_{id}_{short}.json"));
    let csv_path = dir.join(format!("confusion_{id}_{short}.csv"));
    let json = serde_json::to_vec_pretty(report).expect("report serializes");
    write_atomic(&json_path, &json)?;
    write_atomic(&csv_path, report.cm.to_csv().as_bytes())?;
    Ok((json_path, csv_path))
}

/// Writes the epoch log and augmentation log as JSON lines.
pub fn write_train_logs(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    let mut log = String::new();
    for r in &outcome.log {
        log.push_str(&serde_json::to_string(r).expect("record serializes"));
        log.push('\n');
    }
    write_atomic(&dir.join("train_log.jsonl"), log.as_bytes())?;
    let mut aug = String::new();
    for r in &outcome.aug_log {
        aug.push_str(&serde_json::to_string(r).expect("record serializes"));
        aug.push('\n');
    }
    write_atomic(&dir.join("augment_log.jsonl"), aug.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub seed: u64,
    pub started_at: u64,
    pub finished_at: u64,
    pub train_log: Vec<String>,
    pub reports: Vec<String>,
    pub version: String,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn write_run_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    write_atomic(&dir.join("run_manifest.json"), &json)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
