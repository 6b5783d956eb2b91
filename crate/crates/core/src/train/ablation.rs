//! Controlled comparisons: the same data, seeds and step budget for every
//! network variant.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::restoration::{evaluate, train_restoration, RunFiles, Trainer};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::metrics::MetricReport;
use crate::net::NetConfig;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub net: NetConfig,
}

/// Baseline, then LDO, then LDO with condition embedding.
pub fn standard_variants(base: NetConfig) -> Vec<Variant> {
    let v = |label: &str, use_ldo, use_cfe| Variant {
        label: label.into(),
        net: NetConfig { use_ldo, use_cfe, ..base },
    };
    vec![
        v("Baseline", false, false),
        v("Baseline + LDO", true, false),
        v("Baseline + LDO + CFE", true, true),
    ]
}

/// Full model at each dynamic-kernel size.
pub fn kernel_variants(base: NetConfig, sizes: &[usize]) -> Vec<Variant> {
    sizes
        .iter()
        .map(|&k| Variant {
            label: format!("LDO + CFE, k={k}"),
            net: NetConfig {
                use_ldo: true,
                use_cfe: true,
                ldo_kernel_size: k,
                ..base
            },
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub final_loss: f64,
    pub seconds: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub label: String,
    pub psnr: Vec<f64>,
    pub median_psnr: f64,
    pub median_ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub runs: Vec<AblationRun>,
    /// One row per variant, in the order given.
    pub summary: Vec<VariantSummary>,
    pub seconds: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.label == label)
    }

    pub fn table(&self) -> String {
        let mut out = String::from("variant\tmedian PSNR\tmedian SSIM\tper-seed PSNR\n");
        for s in &self.summary {
            let per: Vec<String> = s.psnr.iter().map(|p| format!("{p:.3}")).collect();
            out.push_str(&format!(
                "{}\t{:.3}\t{:.4}\t{}\n",
                s.label,
                s.median_psnr,
                s.median_ssim,
                per.join(" ")
            ));
        }
        out
    }
}

/// Trains every variant once per seed and scores the final weights on
/// `test`. With `out_dir`, each run gets its own subdirectory.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    train: &[Sample],
    test: &[Sample],
    variants: &[Variant],
    seeds: &[u64],
    cfg: &TrainConfig,
    loss: LossWeights,
    classifier: Option<&ParamStore<f32>>,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one variant and one seed".into()));
    }
    if test.is_empty() {
        return Err(Error::Validation("the test split is empty".into()));
    }
    let start = std::time::Instant::now();
    let mut runs = Vec::new();
    for v in variants {
        for &seed in seeds {
            let c = TrainConfig { seed, ..*cfg };
            let trainer = Trainer::new(v.net, c, loss, train.len(), classifier)?;
            let files = out_dir.map(|d| RunFiles {
                dir: d.join(format!("{}_seed{seed}", slug(&v.label))),
            });
            let out = train_restoration(trainer, train, &[], files.as_ref())?;
            let report = evaluate(&out.trainer.net, &out.trainer.store, test)?;
            log::info!("{} seed {seed}: {:.3} dB", v.label, report.mean_psnr());
            runs.push(AblationRun {
                variant: v.label.clone(),
                seed,
                final_loss: out.log.last().map_or(f64::NAN, |l| l.loss),
                seconds: out.seconds,
                report,
            });
        }
    }
    let summary = variants
        .iter()
        .map(|v| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v.label).collect();
            let psnr: Vec<f64> = mine.iter().map(|r| r.report.mean_psnr()).collect();
            VariantSummary {
                label: v.label.clone(),
                median_psnr: median(psnr.clone()),
                median_ssim: median(mine.iter().filter_map(|r| r.report.average.ssim).collect()),
                psnr,
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        steps: cfg.total_steps(train.len()),
        runs,
        summary,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}
