//! Two-stage training (classifier, then restoration with the classifier
//! frozen), evaluation over the seven categories, and the ablation harness.

mod ablation;
mod adam;
pub mod checkpoint;
mod classify;
pub mod data;
mod restoration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ablation::{kernel_variants, run_ablation, standard_variants, AblationReport, AblationRun, Variant, VariantSummary};
pub use adam::{cosine_lr, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, RngState};
pub use classify::{f1_scores, load_classifier, train_classifier, ClassifierOutcome, CLASSIFIER_KIND};
pub use data::{load_split, paired_crop, Batch, Sample, Sampler};
pub use restoration::{evaluate, evaluate_with, load_model, train_restoration, RunFiles, TrainOutcome, Trainer, MODEL_KIND};

/// One optimizer step as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,lr,loss\n";

    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:e}\n", self.step, self.lr, self.loss)
    }
}

/// Writes a whole step log as CSV.
pub fn write_log_csv(path: &std::path::Path, log: &[StepLog]) -> Result<()> {
    let mut text = String::from(StepLog::CSV_HEADER);
    log.iter().for_each(|l| text.push_str(&l.csv_row()));
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn append(path: &std::path::Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides the step count implied by `epochs` when set.
    pub max_steps: Option<u64>,
    pub lr0: f64,
    pub lr_min: f64,
    /// Square crop side; 0 trains on whole images.
    pub crop: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub classifier_epochs: usize,
    pub classifier_batch_size: usize,
    pub classifier_lr: f64,
    /// Validation interval in steps; 0 validates only at the end.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 100,
            max_steps: None,
            lr0: 3e-4,
            lr_min: 1e-6,
            crop: 64,
            seed: 0,
            adam: AdamConfig::default(),
            classifier_epochs: 5,
            classifier_batch_size: 1,
            classifier_lr: 2e-3,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Large-scale preset: batch 16, 256 crops, 800 epochs.
    pub fn full() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 800,
            crop: 256,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Param(m.to_string()));
        if !(self.lr0.is_finite() && self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_min < self.lr0) {
            return bad("learning rates must satisfy 0 <= lr_min < lr0");
        }
        if !(self.classifier_lr.is_finite() && self.classifier_lr > 0.0) {
            return bad("classifier_lr must be positive");
        }
        if !self.crop.is_multiple_of(4) {
            return bad("crop must be divisible by 4");
        }
        if self.batch_size == 0 || self.classifier_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    /// Optimizer steps for a training set of `n` samples.
    pub fn total_steps(&self, n: usize) -> u64 {
        self.max_steps
            .unwrap_or_else(|| (self.epochs * n.div_ceil(self.batch_size)) as u64)
    }
}
