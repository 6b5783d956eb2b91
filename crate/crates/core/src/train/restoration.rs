//! Restoration training with a frozen classifier, evaluation, and the
//! resumable trainer state.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::{cosine_lr, Adam};
use super::append;
use super::checkpoint::Checkpoint;
use super::data::{Batch, Sample, Sampler, SamplerState};
use super::{StepLog, TrainConfig};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::layers::BN_MOMENTUM;
use crate::loss::{total_loss, LossWeights};
use crate::metrics::{psnr, ssim, ImageMetric, MetricReport};
use crate::net::{Net, NetConfig, CLASSIFIER_PREFIX};
use crate::params::{Graph, Mode, ParamId, ParamStore};

pub const MODEL_KIND: &str = "restoration";

const SAMPLER_SALT: u64 = 0x7e57_0a7a;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerState {
    step: u64,
    total_steps: u64,
    adam_t: u64,
    sampler: SamplerState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    kind: String,
    net: NetConfig,
    train: TrainConfig,
    loss: LossWeights,
    state: TrainerState,
    /// Validation PSNR when this checkpoint was written, if measured.
    val_psnr: Option<f64>,
}

/// Everything that evolves during restoration training.
pub struct Trainer {
    pub net: Net,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub sampler: Sampler,
    pub step: u64,
    pub total_steps: u64,
    pub cfg: TrainConfig,
    pub loss: LossWeights,
    /// Where the last batch is written if the loss goes non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl Trainer {
    /// Fresh model. With condition embedding on, `classifier` supplies the
    /// frozen classifier weights; without it they stay at their seeded
    /// initialization.
    pub fn new(
        net_cfg: NetConfig,
        cfg: TrainConfig,
        loss: LossWeights,
        train_len: usize,
        classifier: Option<&ParamStore<f32>>,
    ) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        if train_len == 0 {
            return Err(Error::Validation("the training split is empty".into()));
        }
        if net_cfg.use_ldo && cfg.batch_size < 2 {
            // the kernel generator normalizes pooled 1x1 features over the batch
            return Err(Error::Validation("training with dynamic filtering needs batch_size >= 2".into()));
        }
        let mut store = ParamStore::new(cfg.seed);
        let net = Net::new(&mut store, net_cfg)?;
        match (net.classifier.is_some(), classifier) {
            (true, Some(cls)) => store.copy_from(cls, |n| n.to_string())?,
            (true, None) => log::warn!("no classifier weights given; the frozen classifier keeps its initialization"),
            (false, Some(_)) => log::info!("condition embedding is off; classifier weights unused"),
            (false, None) => {}
        }
        let adam = Adam::new(cfg.adam, &store);
        Ok(Trainer {
            net,
            store,
            adam,
            sampler: Sampler::new(train_len, cfg.seed ^ SAMPLER_SALT),
            step: 0,
            total_steps: cfg.total_steps(train_len),
            cfg,
            loss,
            dump_dir: None,
        })
    }

    pub fn finished(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.cfg.lr0, self.cfg.lr_min)
    }

    /// Loss and parameter gradients for one batch, plus running-statistics
    /// updates. Does not touch the parameters.
    fn forward_backward(&self, batch: &Batch) -> Result<(f64, Vec<(ParamId, Vec<f32>)>, Vec<crate::params::RunningUpdate<f32>>)> {
        let mut g = Graph::new(&self.store, Mode::Train);
        let x = g.tape.constant(batch.degraded.clone());
        let gt = g.tape.constant(batch.clean.clone());
        let outs = self.net.forward(&mut g, x)?;
        let loss = total_loss(&mut g, &outs, gt, &self.loss)?;
        let v = g.tape.value(loss).item() as f64;
        if !v.is_finite() {
            return Err(self.numeric_failure(batch, format!("loss became {v}")));
        }
        g.backward(loss)?;
        let grads: Vec<(ParamId, Vec<f32>)> = g.param_grads().into_iter().map(|(id, gr)| (id, gr.to_vec())).collect();
        if let Some((id, _)) = grads.iter().find(|(_, gr)| gr.iter().any(|x| !x.is_finite())) {
            let name = self.store.get(*id).name.clone();
            return Err(self.numeric_failure(batch, format!("non-finite gradient for {name}")));
        }
        Ok((v, grads, std::mem::take(&mut g.updates)))
    }

    fn numeric_failure(&self, batch: &Batch, what: String) -> Error {
        let mut msg = format!("{what} at step {} (lr {:.3e}); batch {:?}", self.step, self.lr(), batch.names);
        if let Some(dir) = &self.dump_dir {
            match dump_batch(dir, self.step, batch) {
                Ok(p) => {
                    let _ = write!(msg, "; batch written to {}", p.display());
                }
                Err(e) => {
                    let _ = write!(msg, "; batch dump failed: {e}");
                }
            }
        }
        Error::Numeric(msg)
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self, data: &[Sample]) -> Result<StepLog> {
        let lr = self.lr();
        let batch = self.sampler.next_batch(data, self.cfg.batch_size, self.cfg.crop)?;
        let (loss, grads, updates) = self.forward_backward(&batch)?;
        self.store.apply_running_updates(&updates, BN_MOMENTUM);
        self.adam.step(&mut self.store, &grads, lr)?;
        self.step += 1;
        Ok(StepLog { step: self.step, lr, loss })
    }

    /// Gradients of the classifier parameters on one batch (all zero or
    /// absent while it is frozen).
    pub fn classifier_grads(&self, batch: &Batch) -> Result<Vec<(String, Vec<f32>)>> {
        let (_, grads, _) = self.forward_backward(batch)?;
        Ok(grads
            .into_iter()
            .map(|(id, g)| (self.store.get(id).name.clone(), g))
            .filter(|(n, _)| n.starts_with(&format!("{CLASSIFIER_PREFIX}.")))
            .collect())
    }

    pub fn checkpoint(&self, val_psnr: Option<f64>) -> Result<Checkpoint> {
        let meta = ModelMeta {
            kind: MODEL_KIND.into(),
            net: self.net.cfg,
            train: self.cfg,
            loss: self.loss,
            state: TrainerState {
                step: self.step,
                total_steps: self.total_steps,
                adam_t: self.adam.t,
                sampler: self.sampler.state(),
            },
            val_psnr: val_psnr.filter(|v| v.is_finite()),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
        ck.push_store("model/", &self.store)?;
        for (i, p) in self.store.params().iter().enumerate() {
            if !self.adam.m[i].is_empty() {
                let shape = p.tensor.shape();
                ck.push(format!("adam.m/{}", p.name), Tensor::new(shape, self.adam.m[i].clone())?)?;
                ck.push(format!("adam.v/{}", p.name), Tensor::new(shape, self.adam.v[i].clone())?)?;
            }
        }
        Ok(ck)
    }

    /// Resumes exactly where `checkpoint` left off.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = model_meta(ck)?;
        let mut store = ParamStore::new(meta.train.seed);
        let net = Net::new(&mut store, meta.net)?;
        ck.fill_store("model/", &mut store)?;
        let mut adam = Adam::new(meta.train.adam, &store);
        adam.t = meta.state.adam_t;
        for (i, p) in store.params().iter().enumerate() {
            if let (Some(m), Some(v)) = (ck.get(&format!("adam.m/{}", p.name)), ck.get(&format!("adam.v/{}", p.name))) {
                if m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state for {} has the wrong shape", p.name)));
                }
                adam.m[i] = m.data().to_vec();
                adam.v[i] = v.data().to_vec();
            }
        }
        Ok(Trainer {
            net,
            store,
            adam,
            sampler: Sampler::from_state(&meta.state.sampler)?,
            step: meta.state.step,
            total_steps: meta.state.total_steps,
            cfg: meta.train,
            loss: meta.loss,
            dump_dir: None,
        })
    }
}

fn model_meta(ck: &Checkpoint) -> Result<ModelMeta> {
    let meta: ModelMeta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("not a restoration checkpoint: {e}")))?;
    if meta.kind != MODEL_KIND {
        return Err(Error::Checkpoint(format!("expected a restoration checkpoint, found {}", meta.kind)));
    }
    Ok(meta)
}

/// Network and weights for inference.
pub fn load_model(ck: &Checkpoint) -> Result<(Net, ParamStore<f32>)> {
    let meta = model_meta(ck)?;
    let mut store = ParamStore::new(meta.train.seed);
    let net = Net::new(&mut store, meta.net)?;
    ck.fill_store("model/", &mut store)?;
    Ok((net, store))
}

fn dump_batch(dir: &Path, step: u64, batch: &Batch) -> Result<PathBuf> {
    let out = dir.join(format!("nan_dump_step{step}"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for (i, name) in batch.names.iter().enumerate() {
        Image::from_tensor(&batch.degraded, i)?.save_png(&out.join(format!("{i:02}_degraded.png")))?;
        Image::from_tensor(&batch.clean, i)?.save_png(&out.join(format!("{i:02}_clean.png")))?;
        log::error!("dumped batch item {i}: {name}");
    }
    let names = serde_json::to_vec_pretty(&batch.names)?;
    std::fs::write(out.join("names.json"), names).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

/// Scores `restore(sample)` against each clean image. Predictions are
/// clipped to `[0, 1]` before scoring.
pub fn evaluate_with(samples: &[Sample], mut restore: impl FnMut(&Sample) -> Result<Image>) -> Result<MetricReport> {
    let mut images = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = restore(s)?.clipped();
        images.push(ImageMetric {
            name: s.name.clone(),
            category: s.category,
            psnr: crate::metrics::PsnrField::new(psnr(&pred, &s.clean, 1.0)?),
            ssim: ssim(&pred, &s.clean)?,
        });
    }
    Ok(MetricReport::from_images(images))
}

/// Full-image evaluation of a network.
pub fn evaluate(net: &Net, store: &ParamStore<f32>, samples: &[Sample]) -> Result<MetricReport> {
    evaluate_with(samples, |s| {
        let out = net.restore(store, &s.degraded.to_tensor())?;
        Image::from_tensor(&out, 0)
    })
}

/// Files a training run writes under its output directory.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn log_csv(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("checkpoints").join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("checkpoints").join("best.ckpt")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<StepLog>,
    /// Step and report of the best validation result.
    pub best: Option<(u64, MetricReport)>,
    /// Report of the final weights on the validation samples.
    pub last: Option<MetricReport>,
    pub seconds: f64,
}

/// Runs `trainer` to its step budget. Validates every `eval_every` steps
/// and at the end when `val` is non-empty, keeping the best checkpoint by
/// average PSNR. With `files`, writes the CSV log (`step,lr,loss`) and the
/// last and best checkpoints.
pub fn train_restoration(mut trainer: Trainer, train: &[Sample], val: &[Sample], files: Option<&RunFiles>) -> Result<TrainOutcome> {
    let start = Instant::now();
    if let Some(f) = files {
        std::fs::create_dir_all(f.dir.join("checkpoints")).map_err(|e| Error::io(&f.dir, e))?;
        trainer.dump_dir = Some(f.dir.clone());
        if trainer.step == 0 || !f.log_csv().exists() {
            std::fs::write(f.log_csv(), StepLog::CSV_HEADER).map_err(|e| Error::io(f.log_csv(), e))?;
        }
    }
    let mut log = Vec::new();
    let mut best: Option<(u64, MetricReport)> = None;
    let mut last = None;
    let every = trainer.cfg.eval_every;
    while !trainer.finished() {
        let entry = trainer.step(train)?;
        if let Some(f) = files {
            append(&f.log_csv(), &entry.csv_row())?;
        }
        if entry.step % 50 == 0 {
            log::info!("step {} lr {:.3e} loss {:.5}", entry.step, entry.lr, entry.loss);
        }
        log.push(entry);
        let at_end = trainer.finished();
        if !val.is_empty() && (at_end || (every > 0 && trainer.step.is_multiple_of(every))) {
            let report = evaluate(&trainer.net, &trainer.store, val)?;
            let p = report.mean_psnr();
            log::info!("step {} validation PSNR {p:.3}", trainer.step);
            if best.as_ref().is_none_or(|(_, b)| p > b.mean_psnr()) {
                if let Some(f) = files {
                    trainer.checkpoint(Some(p))?.save(&f.best())?;
                }
                best = Some((trainer.step, report.clone()));
            }
            if at_end {
                last = Some(report);
            }
        }
    }
    if let Some(f) = files {
        trainer.checkpoint(last.as_ref().map(|r| r.mean_psnr()))?.save(&f.last())?;
        if val.is_empty() {
            trainer.checkpoint(None)?.save(&f.best())?;
        }
    }
    Ok(TrainOutcome {
        trainer,
        log,
        best,
        last,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::category::Category;
    use crate::synth::scenes::clean_scene;

    fn pairs(n: usize, size: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let clean = clean_scene(size, size, 11, i as u64);
                let mut degraded = clean.clone();
                degraded.data.iter_mut().for_each(|v| *v = (*v * 0.7 + 0.2).min(1.0));
                Sample {
                    name: format!("p{i}"),
                    category: Category::ALL[i % 7],
                    labels: Category::ALL[i % 7].labels(),
                    clean,
                    degraded,
                }
            })
            .collect()
    }

    fn tiny() -> NetConfig {
        NetConfig {
            base_channels: 4,
            res_blocks: 1,
            ..Default::default()
        }
    }

    fn cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            crop: 16,
            max_steps: Some(steps),
            lr0: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn single_image_batches_need_the_baseline() {
        let c = TrainConfig { batch_size: 1, ..cfg(1) };
        let e = Trainer::new(tiny(), c, LossWeights::default(), 4, None).err().unwrap();
        assert!(matches!(e, Error::Validation(_)));
        let base = NetConfig { use_ldo: false, use_cfe: false, ..tiny() };
        let mut t = Trainer::new(base, c, LossWeights::default(), 4, None).unwrap();
        t.step(&pairs(4, 16)).unwrap();
    }

    #[test]
    fn zero_learning_rate_leaves_weights_bitwise_unchanged() {
        let data = pairs(4, 16);
        let c = TrainConfig {
            lr0: 1e-30,
            lr_min: 0.0,
            ..cfg(3)
        };
        let mut t = Trainer::new(tiny(), c, LossWeights::default(), data.len(), None).unwrap();
        t.cfg.lr0 = 0.0;
        let before: Vec<Vec<f32>> = t.store.params().iter().map(|p| p.tensor.data().to_vec()).collect();
        t.step(&data).unwrap();
        for (p, b) in t.store.params().iter().zip(&before) {
            assert_eq!(p.tensor.data(), &b[..], "{}", p.name);
        }
    }

    #[test]
    fn frozen_classifier_receives_no_gradient() {
        let data = pairs(4, 16);
        let mut t = Trainer::new(tiny(), cfg(3), LossWeights::default(), data.len(), None).unwrap();
        let before: Vec<Vec<f32>> = t
            .store
            .params()
            .iter()
            .filter(|p| p.name.starts_with("classifier."))
            .map(|p| p.tensor.data().to_vec())
            .collect();
        assert!(!before.is_empty());
        for _ in 0..3 {
            let batch = t.sampler.clone().next_batch(&data, 2, 16).unwrap();
            for (name, g) in t.classifier_grads(&batch).unwrap() {
                assert!(g.iter().all(|&v| v == 0.0), "{name}");
            }
            t.step(&data).unwrap();
        }
        let after: Vec<Vec<f32>> = t
            .store
            .params()
            .iter()
            .filter(|p| p.name.starts_with("classifier."))
            .map(|p| p.tensor.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let data = pairs(2, 16);
        let c = TrainConfig { crop: 0, ..cfg(40) };
        let mut t = Trainer::new(tiny(), c, LossWeights::default(), data.len(), None).unwrap();
        let out = train_restoration(t, &data, &[], None).unwrap();
        t = out.trainer;
        let first = out.log[0].loss;
        let last = out.log.last().unwrap().loss;
        assert!(last < 0.8 * first, "{first} -> {last}");
        assert!(t.finished());
    }

    #[test]
    fn resume_is_bitwise() {
        let data = pairs(3, 16);
        let mut a = Trainer::new(tiny(), cfg(10), LossWeights::default(), data.len(), None).unwrap();
        for _ in 0..4 {
            a.step(&data).unwrap();
        }
        let bytes = a.checkpoint(None).unwrap().to_bytes().unwrap();
        let mut b = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(b.checkpoint(None).unwrap().to_bytes().unwrap(), bytes);
        for _ in 0..6 {
            let (la, lb) = (a.step(&data).unwrap(), b.step(&data).unwrap());
            assert_eq!(la.loss.to_bits(), lb.loss.to_bits());
        }
        assert_eq!(
            a.checkpoint(None).unwrap().to_bytes().unwrap(),
            b.checkpoint(None).unwrap().to_bytes().unwrap()
        );
    }

    #[test]
    fn nan_input_aborts_with_numeric_error_and_dump() {
        let mut data = pairs(2, 16);
        data[0].degraded.data[5] = f32::NAN;
        data[1].degraded.data[5] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(tiny(), cfg(2), LossWeights::default(), data.len(), None).unwrap();
        let files = RunFiles {
            dir: dir.path().to_path_buf(),
        };
        let err = train_restoration(t, &data, &[], Some(&files)).err().unwrap();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert_eq!(err.exit_code(), 3);
        assert!(dir.path().join("nan_dump_step0").join("names.json").exists());
    }

    #[test]
    fn ground_truth_predictions_score_perfectly() {
        let data = pairs(7, 16);
        let r = evaluate_with(&data, |s| Ok(s.clean.clone())).unwrap();
        assert_eq!(r.rows.len(), 7);
        for row in &r.rows {
            assert!(row.psnr.psnr_infinite);
            assert!((row.ssim.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_categories_are_absent() {
        let data: Vec<Sample> = pairs(7, 16).into_iter().filter(|s| s.category != Category::Snow).collect();
        let r = evaluate_with(&data, |s| Ok(s.degraded.clone())).unwrap();
        let snow = r.row("snow").unwrap();
        assert!(snow.absent);
        assert_eq!(snow.images, 0);
        let present: Vec<f64> = r.rows.iter().filter(|x| !x.absent).map(|x| x.psnr.value()).collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        assert!((r.mean_psnr() - mean).abs() < 1e-9);
    }

    #[test]
    fn run_directory_contents() {
        let data = pairs(3, 16);
        let dir = tempfile::tempdir().unwrap();
        let files = RunFiles {
            dir: dir.path().to_path_buf(),
        };
        let c = TrainConfig {
            eval_every: 2,
            ..cfg(4)
        };
        let t = Trainer::new(tiny(), c, LossWeights::default(), data.len(), None).unwrap();
        let out = train_restoration(t, &data, &data, Some(&files)).unwrap();
        let csv = std::fs::read_to_string(files.log_csv()).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("step,lr,loss\n"));
        let best = Checkpoint::load(&files.best()).unwrap();
        let (net, store) = load_model(&best).unwrap();
        let r = evaluate(&net, &store, &data).unwrap();
        assert_eq!(r.mean_psnr(), out.best.unwrap().1.mean_psnr());
        assert!(Checkpoint::load(&files.last()).is_ok());
    }
}
