//! Multi-label degradation classifier training.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::{cosine_lr, Adam};
use super::checkpoint::Checkpoint;
use super::data::{Sample, Sampler};
use super::{StepLog, TrainConfig};
use crate::classifier::{bce_multilabel, threshold, Classifier, LabelVector, NUM_LABELS};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::net::CLASSIFIER_PREFIX;
use crate::params::{Graph, Mode, ParamStore};

pub const CLASSIFIER_KIND: &str = "classifier";

/// Keeps the classifier's sampling stream apart from the restoration one.
const SAMPLER_SALT: u64 = 0xc1a5_5e7d;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassifierMeta {
    kind: String,
    train: TrainConfig,
    epoch_losses: Vec<f64>,
    f1: [f64; NUM_LABELS],
}

pub struct ClassifierOutcome {
    pub classifier: Classifier,
    pub store: ParamStore<f32>,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Per-label F1 on the held-out samples at the 0.5 threshold.
    pub f1: [f64; NUM_LABELS],
    pub log: Vec<StepLog>,
    pub seconds: f64,
}

impl ClassifierOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let meta = ClassifierMeta {
            kind: CLASSIFIER_KIND.into(),
            train: *cfg,
            epoch_losses: self.epoch_losses.clone(),
            f1: self.f1,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
        ck.push_store("model/", &self.store)?;
        Ok(ck)
    }
}

/// Rebuilds a classifier from its checkpoint.
pub fn load_classifier(ck: &Checkpoint) -> Result<(Classifier, ParamStore<f32>)> {
    let meta: ClassifierMeta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("not a classifier checkpoint: {e}")))?;
    if meta.kind != CLASSIFIER_KIND {
        return Err(Error::Checkpoint(format!("expected a classifier checkpoint, found {}", meta.kind)));
    }
    let mut store = ParamStore::new(meta.train.seed);
    let classifier = Classifier::new(&mut store, CLASSIFIER_PREFIX);
    ck.fill_store("model/", &mut store)?;
    Ok((classifier, store))
}

/// Per-label F1. A label that is neither present nor predicted scores 1.
pub fn f1_scores(pred: &[LabelVector], truth: &[LabelVector]) -> [f64; NUM_LABELS] {
    let mut out = [0.0; NUM_LABELS];
    for (l, o) in out.iter_mut().enumerate() {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, t) in pred.iter().zip(truth) {
            match (p.0[l], t.0[l]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        *o = if tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
    }
    out
}

/// Thresholded predictions for whole images, in chunks.
pub(crate) fn predict(classifier: &Classifier, store: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<LabelVector>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let x = Tensor::stack(&chunk.iter().map(|s| s.degraded.to_tensor()).collect::<Vec<_>>())?;
        let mut g = Graph::new(store, Mode::Eval);
        let x = g.tape.constant(x);
        let logits = classifier.classify(&mut g, x)?.logits;
        let logits = g.tape.value(logits);
        out.extend((0..chunk.len()).map(|i| threshold(logits, i)));
    }
    Ok(out)
}

/// Trains for `cfg.classifier_epochs` on crops of the degraded inputs with
/// a cosine schedule from `classifier_lr`, then scores the held-out set.
pub fn train_classifier(train: &[Sample], test: &[Sample], cfg: &TrainConfig) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Validation("classifier training needs non-empty train and test splits".into()));
    }
    let start = Instant::now();
    let mut store = ParamStore::<f32>::new(cfg.seed);
    let classifier = Classifier::new(&mut store, CLASSIFIER_PREFIX);
    let mut adam = Adam::new(cfg.adam, &store);
    let mut sampler = Sampler::new(train.len(), cfg.seed ^ SAMPLER_SALT);
    let per_epoch = train.len().div_ceil(cfg.classifier_batch_size);
    let total = (per_epoch * cfg.classifier_epochs) as u64;
    let side = train[0].degraded.height.min(train[0].degraded.width);
    let crop = if cfg.crop == 0 || cfg.crop >= side { 0 } else { cfg.crop };
    let mut epoch_losses = Vec::with_capacity(cfg.classifier_epochs);
    let mut step = 0u64;
    let mut log = Vec::with_capacity(total as usize);
    for epoch in 0..cfg.classifier_epochs {
        let mut sum = 0.0;
        for _ in 0..per_epoch {
            let lr = cosine_lr(step, total, cfg.classifier_lr, cfg.lr_min);
            let batch = sampler.next_batch(train, cfg.classifier_batch_size, crop)?;
            let (loss, grads) = {
                let mut g = Graph::new(&store, Mode::Train);
                let x = g.tape.constant(batch.degraded);
                let out = classifier.classify(&mut g, x)?;
                let loss = bce_multilabel(&mut g, out.logits, &batch.labels)?;
                let v = g.tape.value(loss).item() as f64;
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "classifier loss became {v} at step {step} on {:?}",
                        batch.names
                    )));
                }
                g.backward(loss)?;
                let grads: Vec<_> = g.param_grads().into_iter().map(|(id, gr)| (id, gr.to_vec())).collect();
                (v, grads)
            };
            adam.step(&mut store, &grads, lr)?;
            sum += loss;
            step += 1;
            log.push(StepLog { step, lr, loss });
        }
        let mean = sum / per_epoch as f64;
        log::info!("classifier epoch {} loss {mean:.5}", epoch + 1);
        epoch_losses.push(mean);
    }
    let pred = predict(&classifier, &store, test)?;
    let truth: Vec<LabelVector> = test.iter().map(|s| s.labels).collect();
    let f1 = f1_scores(&pred, &truth);
    Ok(ClassifierOutcome {
        classifier,
        store,
        epoch_losses,
        f1,
        log,
        seconds: start.elapsed().as_secs_f64(),
    })
}
