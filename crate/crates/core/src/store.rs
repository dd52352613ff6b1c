//! On-disk datasets and checkpoints.
//!
//! A dataset directory holds `dataset.json` (class names), `manifest.jsonl`
//! (one record per clip), and one tensor file per clip. A checkpoint
//! directory holds `checkpoint.json` and one tensor file per parameter.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aucodes::AuAnnotation;
use crate::config::RunConfig;
use crate::encoder::Params;
use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor};
use crate::sampling::{KeyFrames, MeSequence};

pub const DATASET_META: &str = "dataset.json";
pub const DATASET_MANIFEST: &str = "manifest.jsonl";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

/// Writes `bytes` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub classes: Vec<String>,
    pub frames: usize,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub subject_id: String,
    pub emotion: usize,
    pub au_ids: Vec<u8>,
    pub onset: usize,
    pub apex: usize,
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<MeSequence>,
}

impl Dataset {
    pub fn subject_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let clips = dir.join("clips");
        fs::create_dir_all(&clips).map_err(|e| Error::io(&clips, e))?;
        let mut manifest = String::new();
        for (i, s) in self.samples.iter().enumerate() {
            let rel = format!("clips/{i:05}.tensor");
            write_tensor(&dir.join(&rel), &s.frames)?;
            let rec = ManifestRecord {
                path: rel,
                subject_id: s.subject_id.clone(),
                emotion: s.emotion,
                au_ids: s.au_set.codes().to_vec(),
                onset: s.keyframes.onset,
                apex: s.keyframes.apex,
                offset: s.keyframes.offset,
                shape: s.frames.shape().to_vec(),
            };
            manifest.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            manifest.push('\n');
        }
        let meta = serde_json::to_vec_pretty(&self.meta).expect("meta serializes");
        write_atomic(&dir.join(DATASET_META), &meta)?;
        write_atomic(&dir.join(DATASET_MANIFEST), manifest.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(DATASET_META);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta =
            serde_json::from_str(&text).map_err(|e| format_err(&meta_path, e.to_string()))?;
        let man_path = dir.join(DATASET_MANIFEST);
        let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let mut samples = Vec::new();
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| format_err(&man_path, format!("line {}: {e}", n + 1)))?;
            let frames = read_tensor(&dir.join(&rec.path))?;
            if frames.shape() != rec.shape {
                return Err(format_err(
                    &man_path,
                    format!("line {}: shape mismatch", n + 1),
                ));
            }
            if rec.emotion >= meta.classes.len() {
                return Err(format_err(
                    &man_path,
                    format!("line {}: emotion out of range", n + 1),
                ));
            }
            let ids: Vec<u32> = rec.au_ids.iter().map(|&a| a as u32).collect();
            let seq = MeSequence::new(
                frames,
                rec.subject_id,
                rec.emotion,
                AuAnnotation::new(&ids)?,
                KeyFrames::new(rec.onset, rec.apex, rec.offset),
            )?;
            samples.push(seq);
        }
        Ok(Dataset { meta, samples })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: RunConfig,
    pub config_digest: String,
    pub seed: u64,
    pub classes: Vec<String>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: Params,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, seed: u64, classes: Vec<String>, params: Params) -> Self {
        let entries = params
            .iter()
            .map(|(k, v)| ParamEntry {
                name: k.clone(),
                shape: v.shape().to_vec(),
                file: format!("params/{k}.tensor"),
            })
            .collect();
        // Stored without its output location so identical runs give identical bytes.
        let mut config = config.clone();
        config.output_dir = Default::default();
        Checkpoint {
            manifest: CheckpointManifest {
                config_digest: config.digest(),
                config,
                seed,
                classes,
                params: entries,
            },
            params,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for e in &self.manifest.params {
            write_tensor(&dir.join(&e.file), &self.params[&e.name])?;
        }
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&dir.join(CHECKPOINT_MANIFEST), &json)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
        let mut params = Params::new();
        for e in &manifest.params {
            let t = read_tensor(&dir.join(&e.file))?;
            if t.shape() != e.shape {
                return Err(format_err(
                    &path,
                    format!("parameter {} shape mismatch", e.name),
                ));
            }
            params.insert(e.name.clone(), t);
        }
        Ok(Checkpoint { manifest, params })
    }
}
