use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{clean_accuracy, Attack, EvalSlice, HeatmapGrid, RestartHistogram, SurfaceSample};
use crate::attacks::{pgd_restarts_with, spsa, AttackConfig, RestartPolicy};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model, TrainingMetadata};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub layers: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub param_count: usize,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub training: Option<TrainingMetadata>,
}

impl ModelInfo {
    pub fn of<T: Scalar>(model: &Model<T>) -> Self {
        Self {
            layers: model.layers().to_vec(),
            input_shape: model.input_shape().to_vec(),
            classes: model.classes(),
            param_count: model.param_count(),
            checkpoint: None,
            training: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub attack: Attack,
    pub adversarial_accuracy: f64,
    /// Relative path of the per-example CSV, when written.
    #[serde(default)]
    pub artifact: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub kind: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelInfo,
    pub eval: EvalSlice,
    pub clean_accuracy: f64,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub artifacts: Vec<ArtifactRef>,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Clean accuracy plus one row per attack on `data` (the evaluation slice).
/// With `out_dir`, each row also gets `attack_<i>.csv` with per-example
/// outcomes, referenced relative to `out_dir`.
pub fn build_report<T: Scalar>(
    model: &Model<T>,
    info: ModelInfo,
    data: &Dataset<T>,
    eval: EvalSlice,
    suite: &[Attack],
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    if suite.is_empty() {
        return Err(Error::Contract("attack suite is empty".into()));
    }
    let clean = clean_accuracy(model, data)?;
    let mut rows = Vec::with_capacity(suite.len());
    let mut artifacts = Vec::new();
    for (i, attack) in suite.iter().enumerate() {
        let attack = attack.resolved();
        let result = match &attack {
            Attack::Pgd(c) => pgd_restarts_with(
                model,
                data.images(),
                data.labels(),
                c,
                RestartPolicy::SkipSucceeded,
            )?,
            Attack::Spsa(c) => spsa(model, data.images(), data.labels(), c)?,
        };
        let artifact = match out_dir {
            Some(dir) => {
                let name = format!("attack_{i}.csv");
                let mut csv = String::from("example,label,prediction,final_loss,success\n");
                for (j, &y) in data.labels().iter().enumerate() {
                    writeln!(
                        csv,
                        "{j},{y},{},{},{}",
                        result.predictions[j],
                        result.final_loss[j].to_f64_lossy(),
                        u8::from(result.success[j])
                    )
                    .expect("string write");
                }
                write_text(&dir.join(&name), &csv)?;
                artifacts.push(ArtifactRef {
                    kind: "attack_examples".into(),
                    path: name.clone(),
                });
                Some(name)
            }
            None => None,
        };
        rows.push(ReportRow {
            attack,
            adversarial_accuracy: result.accuracy(data.labels()),
            artifact,
        });
    }
    Ok(EvalReport {
        model: info,
        eval,
        clean_accuracy: clean,
        rows,
        artifacts,
    })
}

/// `step,iters,adv_accuracy`, one row per cell, 6-decimal fixed point.
pub fn heatmap_csv(grid: &HeatmapGrid) -> String {
    let mut out = String::from("step,iters,adv_accuracy\n");
    for (s, row) in grid.steps.iter().zip(&grid.accuracy) {
        for (n, acc) in grid.iters.iter().zip(row) {
            writeln!(out, "{s:.6},{n},{acc:.6}").expect("string write");
        }
    }
    out
}

/// `restart,loss`, one row per restart.
pub fn histogram_csv(h: &RestartHistogram) -> String {
    let mut out = String::from("restart,loss\n");
    for (r, l) in h.losses.iter().enumerate() {
        writeln!(out, "{r},{l}").expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramMetadata {
    pub example: usize,
    pub label: usize,
    pub restarts: usize,
    pub threshold: f64,
    pub max_loss: f64,
    pub above_threshold: usize,
    pub config: AttackConfig,
}

pub fn histogram_metadata(h: &RestartHistogram) -> HistogramMetadata {
    HistogramMetadata {
        example: h.example,
        label: h.label,
        restarts: h.losses.len(),
        threshold: h.threshold,
        max_loss: h.max_loss(),
        above_threshold: h.losses.iter().filter(|&&l| l > h.threshold).count(),
        config: h.config,
    }
}

/// `i,j,loss` with `i, j ∈ [−k, k]`.
pub fn surface_csv(s: &SurfaceSample) -> String {
    let k = s.k as isize;
    let mut out = String::from("i,j,loss\n");
    for (a, row) in s.losses.iter().enumerate() {
        for (b, l) in row.iter().enumerate() {
            writeln!(out, "{},{},{l}", a as isize - k, b as isize - k).expect("string write");
        }
    }
    out
}
