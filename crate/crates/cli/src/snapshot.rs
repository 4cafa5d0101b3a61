//! Model snapshots: a JSON manifest plus one little-endian `f64` blob.
//!
//! A model directory holds
//!
//! * `model.json`: shapes, flags, seed, epoch count and the blob layout,
//! * `params.bin`: head parameters, then Adam first and second moments,
//!   each in `v1, v2, v3, W, gamma` order,
//! * `report.json`: per-epoch history and parameter counts.
//!
//! Nothing time-dependent is written, so identical runs produce identical
//! directories.

use std::fs;
use std::path::Path;

use hsprobe::head::{AblationFlags, Block, HeadParams};
use hsprobe::train::{AdamState, EpochStats, Method, TrainReport};
use hsprobe::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MODEL_FILE: &str = "model.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const REPORT_FILE: &str = "report.json";
const FORMAT: &str = "hsprobe-model";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub method: Method,
    pub num_layers_incl_embedding: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub flags: AblationFlags,
    pub seed: u64,
    pub epochs: usize,
    pub adam_step: u64,
    /// Blob sections in order; each is followed by the same layout for the
    /// two Adam moments.
    pub blocks: Vec<BlockLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub method: Method,
    pub flags: AblationFlags,
    pub train_split: String,
    pub eval_split: Option<String>,
    pub train_examples: usize,
    pub trainable_params: usize,
    pub history: Vec<EpochStats>,
}

impl ReportSummary {
    pub fn from_report(report: &TrainReport) -> Self {
        Self {
            method: report.method,
            flags: report.flags,
            train_split: report.train_split.clone(),
            eval_split: report.eval_split.clone(),
            train_examples: report.train_examples,
            trainable_params: report.trainable_params,
            history: report.history.clone(),
        }
    }
}

fn push_params(buf: &mut Vec<u8>, params: &HeadParams) {
    for b in Block::ALL {
        for v in params.block(b) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_model(report: &TrainReport, seed: u64, dir: &Path) -> Result<()> {
    let params = &report.params;
    let manifest = ModelManifest {
        format: FORMAT.into(),
        version: VERSION,
        method: report.method,
        num_layers_incl_embedding: params.num_layers(),
        dim: params.dim(),
        num_classes: params.num_classes,
        flags: report.flags,
        seed,
        epochs: report.history.len(),
        adam_step: report.optimizer.step,
        blocks: Block::ALL
            .iter()
            .map(|&b| BlockLayout { name: b.name().into(), len: params.block(b).len() })
            .collect(),
    };
    let mut blob = Vec::with_capacity(params.len() * 3 * 8);
    push_params(&mut blob, params);
    push_params(&mut blob, &report.optimizer.first_moment);
    push_params(&mut blob, &report.optimizer.second_moment);

    fs::create_dir_all(dir)?;
    fs::write(dir.join(MODEL_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join(PARAMS_FILE), blob)?;
    fs::write(dir.join(REPORT_FILE), serde_json::to_vec_pretty(&ReportSummary::from_report(report))?)?;
    Ok(())
}

pub struct LoadedModel {
    pub manifest: ModelManifest,
    pub report: TrainReport,
}

pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let manifest: ModelManifest = serde_json::from_slice(&fs::read(dir.join(MODEL_FILE))?)
        .map_err(|e| Error::Format(format!("{MODEL_FILE}: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported model format {:?} v{}",
            manifest.format, manifest.version
        )));
    }
    let template = HeadParams::zeros(manifest.num_layers_incl_embedding, manifest.dim, manifest.num_classes);
    let expected: Vec<BlockLayout> = Block::ALL
        .iter()
        .map(|&b| BlockLayout { name: b.name().into(), len: template.block(b).len() })
        .collect();
    if manifest.blocks != expected {
        return Err(Error::Corruption("block layout does not match declared shapes".into()));
    }

    let blob = fs::read(dir.join(PARAMS_FILE))?;
    let n = template.len();
    if blob.len() != n * 3 * 8 {
        return Err(Error::Corruption(format!(
            "{PARAMS_FILE} has {} bytes, expected {}",
            blob.len(),
            n * 3 * 8
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    let params = HeadParams::from_flat(&template, &values[..n])?;
    let first_moment = HeadParams::from_flat(&template, &values[n..2 * n])?;
    let second_moment = HeadParams::from_flat(&template, &values[2 * n..])?;
    params.validate()?;

    let summary: ReportSummary = serde_json::from_slice(&fs::read(dir.join(REPORT_FILE))?)
        .map_err(|e| Error::Format(format!("{REPORT_FILE}: {e}")))?;
    let report = TrainReport {
        method: manifest.method,
        flags: manifest.flags,
        train_split: summary.train_split,
        eval_split: summary.eval_split,
        train_examples: summary.train_examples,
        trainable_params: summary.trainable_params,
        history: summary.history,
        params,
        optimizer: AdamState { first_moment, second_moment, step: manifest.adam_step },
        epoch_seconds: Vec::new(),
    };
    Ok(LoadedModel { manifest, report })
}
