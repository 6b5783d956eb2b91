//! PSNR, SSIM and the per-category evaluation report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::error::{Error, Result};
use crate::imageio::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    let sum: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&p, &g)| {
            let d = p as f64 - g as f64;
            d * d
        })
        .sum();
    Ok(sum / pred.data.len() as f64)
}

/// `10 log10(range^2 / MSE)`; `f64::INFINITY` for identical images.
pub fn psnr(pred: &Image, gt: &Image, data_range: f64) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..k).map(|i| g[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|i| g[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean local SSIM of the channel-mean grayscale images with an `11 x 11`
/// Gaussian window (`sigma = 1.5`) over the valid region.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = (pred.height, pred.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let a = pred.gray();
    let b = gt.gray();
    let g = gaussian_window();
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, h, w, &g);
    let mu_b = filter_valid(&b, h, w, &g);
    let e_aa = filter_valid(&prod(&a, &a), h, w, &g);
    let e_bb = filter_valid(&prod(&b, &b), h, w, &g);
    let e_ab = filter_valid(&prod(&a, &b), h, w, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// A PSNR value serialized as a number, or `null` plus `psnr_infinite` when
/// the pair is identical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsnrField {
    pub psnr: Option<f64>,
    pub psnr_infinite: bool,
}

impl PsnrField {
    pub fn new(v: f64) -> Self {
        if v.is_infinite() {
            PsnrField {
                psnr: None,
                psnr_infinite: true,
            }
        } else {
            PsnrField {
                psnr: Some(v),
                psnr_infinite: false,
            }
        }
    }

    pub fn value(&self) -> f64 {
        if self.psnr_infinite {
            f64::INFINITY
        } else {
            self.psnr.unwrap_or(f64::NAN)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetric {
    pub name: String,
    pub category: Category,
    #[serde(flatten)]
    pub psnr: PsnrField,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub label: String,
    pub images: usize,
    /// Set when no test image of this category was evaluated.
    pub absent: bool,
    #[serde(flatten)]
    pub psnr: PsnrField,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// One row per category, in table column order.
    pub rows: Vec<CategoryRow>,
    /// Mean of the per-category means over present categories.
    pub average: CategoryRow,
    pub images: Vec<ImageMetric>,
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageMetric>) -> Self {
        let mut by_cat: BTreeMap<Category, Vec<&ImageMetric>> = BTreeMap::new();
        for m in &images {
            by_cat.entry(m.category).or_default().push(m);
        }
        let mut rows = Vec::new();
        let (mut psnr_means, mut ssim_means) = (Vec::new(), Vec::new());
        for cat in Category::REPORT_ORDER {
            match by_cat.get(&cat) {
                Some(ms) => {
                    let p = mean(ms.iter().map(|m| m.psnr.value()));
                    let s = mean(ms.iter().map(|m| m.ssim));
                    psnr_means.push(p);
                    ssim_means.push(s);
                    rows.push(CategoryRow {
                        label: cat.report_label().into(),
                        images: ms.len(),
                        absent: false,
                        psnr: PsnrField::new(p),
                        ssim: Some(s),
                    });
                }
                None => rows.push(CategoryRow {
                    label: cat.report_label().into(),
                    images: 0,
                    absent: true,
                    psnr: PsnrField {
                        psnr: None,
                        psnr_infinite: false,
                    },
                    ssim: None,
                }),
            }
        }
        let present = !psnr_means.is_empty();
        let average = CategoryRow {
            label: "average".into(),
            images: images.len(),
            absent: !present,
            psnr: if present {
                PsnrField::new(mean(psnr_means.into_iter()))
            } else {
                PsnrField {
                    psnr: None,
                    psnr_infinite: false,
                }
            },
            ssim: present.then(|| mean(ssim_means.into_iter())),
        };
        MetricReport { rows, average, images }
    }

    pub fn row(&self, label: &str) -> Option<&CategoryRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Mean PSNR over all present categories (infinite if any is).
    pub fn mean_psnr(&self) -> f64 {
        self.average.psnr.value()
    }

    /// Plain-text table in column order.
    pub fn table(&self) -> String {
        let mut head = String::from("metric");
        let mut p = String::from("PSNR");
        let mut s = String::from("SSIM");
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            head.push_str(&format!("\t{}", r.label));
            p.push_str(&format!("\t{}", fmt_opt(r.absent, r.psnr.value(), 3)));
            s.push_str(&format!("\t{}", fmt_opt(r.absent, r.ssim.unwrap_or(f64::NAN), 4)));
        }
        format!("{head}\n{p}\n{s}\n")
    }
}

fn fmt_opt(absent: bool, v: f64, digits: usize) -> String {
    if absent {
        "-".into()
    } else if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.digits$}")
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    s / n as f64
}
