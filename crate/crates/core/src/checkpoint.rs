//! Versioned JSON checkpoints, run manifests and embedding exports.
//!
//! A checkpoint is a single JSON object:
//!
//! ```text
//! {
//!   "format": "hdml-checkpoint",
//!   "version": 1,
//!   "input_dim": 64,
//!   "train_classes": [0, 3, ...],
//!   "config": { ...every TrainConfig field... },
//!   "models": { "embedder": ..., "generator": ..., "classifier": ... }
//! }
//! ```
//!
//! Every dense layer is stored as `{"weight": {"rows", "cols", "data"}, "bias": [...],
//! "activation": "relu" | "identity"}` with row-major weights of shape out × in.
//! Floats are written with enough digits to reload bit-identically.
//! `train_classes` lists the global class ids in classifier output order.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbedderParams;
use crate::error::{Error, Result};
use crate::numgrad::{Matrix, Sequential};
use crate::train::{Models, TrainConfig, TrainOutcome};

pub const CHECKPOINT_FORMAT: &str = "hdml-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub train_classes: Vec<usize>,
    pub config: TrainConfig,
    pub models: Models,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, models: &Models, train_classes: &BTreeSet<usize>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input_dim: models.embedder.extractor.layers[0].in_dim(),
            train_classes: train_classes.iter().copied().collect(),
            config: config.clone(),
            models: models.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            other => return Err(Error::input(format!("not a checkpoint (format {other:?})"))),
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            other => return Err(Error::input(format!("unsupported checkpoint version {other:?}"))),
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Shape consistency between the stored networks, which serde alone does not check.
    fn validate(&self) -> Result<()> {
        let m = &self.models;
        let layers = m
            .embedder
            .extractor
            .layers
            .iter()
            .chain(std::iter::once(&m.embedder.projector))
            .chain(&m.generator.net.layers)
            .chain(std::iter::once(&m.classifier.layer));
        for layer in layers {
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::input("checkpoint layer bias disagrees with its weight"));
            }
        }
        let extractor = Sequential::new(m.embedder.extractor.layers.clone())?;
        let embedder = EmbedderParams::new(extractor, m.embedder.projector.clone())?;
        let generator = Sequential::new(m.generator.net.layers.clone())?;
        let bad = |what: &str| Err(Error::input(format!("checkpoint {what}")));
        if embedder.extractor.layers.is_empty() || generator.layers.is_empty() {
            return bad("has an empty network");
        }
        if embedder.extractor.layers[0].in_dim() != self.input_dim {
            return bad("input_dim disagrees with the extractor");
        }
        if generator.layers[0].in_dim() != embedder.projector.out_dim()
            || generator.layers[generator.layers.len() - 1].out_dim() != embedder.feature_dim()
        {
            return bad("generator does not map embeddings back to features");
        }
        if m.classifier.layer.in_dim() != embedder.feature_dim() {
            return bad("classifier input disagrees with the feature width");
        }
        if m.classifier.classes() != self.train_classes.len() {
            return bad("classifier width disagrees with train_classes");
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Summary of a training run, written next to the checkpoint.
pub fn manifest_json(config: &TrainConfig, outcome: &TrainOutcome, dataset_rows: usize, input_dim: usize) -> serde_json::Value {
    let evaluations: Vec<serde_json::Value> = outcome
        .evaluations
        .iter()
        .map(|(epoch, r)| serde_json::json!({"epoch": epoch, "metrics": r.to_json()}))
        .collect();
    serde_json::json!({
        "format": "hdml-manifest",
        "version": 1,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "dataset": {"rows": dataset_rows, "input_dim": input_dim},
        "split": outcome.split,
        "steps_per_epoch": outcome.steps_per_epoch,
        "total_steps": outcome.history.len(),
        "skipped_batches": outcome.skipped_batches,
        "degenerate_tuples": outcome.degenerate_tuples,
        "j_avg_by_epoch": outcome.j_avg_by_epoch,
        "final_lambda": outcome.final_lambda,
        "evaluations": evaluations,
        "final_metrics": outcome.final_report.as_ref().map(|r| r.to_json()),
    })
}

/// `sample_id,label,z_0,…` with lossless float formatting.
pub fn embeddings_to_csv(sample_ids: &[usize], labels: &[usize], z: &Matrix) -> Result<String> {
    if sample_ids.len() != z.rows() || labels.len() != z.rows() {
        return Err(Error::dims("embeddings_to_csv", z.shape(), (labels.len(), sample_ids.len())));
    }
    let mut out = String::from("sample_id,label");
    for k in 0..z.cols() {
        write!(out, ",z_{k}").expect("string write");
    }
    out.push('\n');
    for ((id, label), row) in sample_ids.iter().zip(labels).zip(z.row_iter()) {
        write!(out, "{id},{label}").expect("string write");
        for v in row {
            write!(out, ",{v:?}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}
