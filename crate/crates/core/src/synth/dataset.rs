//! Balanced seven-category dataset generation and the JSON-lines manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::degrade::{apply_mixed, DegradationSpec, MaskConfig};
use super::scenes::clean_scene;
use crate::category::Category;
use crate::classifier::LabelVector;
use crate::error::{Error, Result};
use crate::imageio::Image;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Degraded images per category, both splits together.
    pub per_category: usize,
    /// Share of each category (and of the clean pool) held out for testing.
    pub test_fraction: f64,
    /// Side of the square images written to disk.
    pub size: usize,
    pub seed: u64,
    pub masks: MaskConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            per_category: 60,
            test_fraction: 1.0 / 6.0,
            size: 64,
            seed: 0,
            masks: MaskConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_category == 0 {
            return Err(Error::Validation("per_category must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Validation("test_fraction must lie in [0, 1)".into()));
        }
        if self.size < 4 || !self.size.is_multiple_of(4) {
            return Err(Error::Validation(format!("size {} is not a positive multiple of 4", self.size)));
        }
        Ok(())
    }

    /// `(train, test)` entries per category.
    pub fn split_counts(&self) -> (usize, usize) {
        let test = (self.per_category as f64 * self.test_fraction).round() as usize;
        let test = test.min(self.per_category - 1);
        (self.per_category - test, test)
    }
}

/// One clean/degraded pair. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clean: String,
    pub degraded: String,
    pub category: Category,
    pub labels: LabelVector,
    pub params: DegradationSpec,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn parse(root: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Validation(format!("manifest line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<ManifestEntry>>>()?;
        Ok(Manifest {
            root: root.into(),
            entries,
        })
    }

    /// Reads `path`, which may be the manifest file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(root, &text)
    }

    pub fn select(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Keeps only the given categories (one-category training uses this).
    pub fn restrict(&self, cats: &[Category]) -> Manifest {
        Manifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| cats.contains(&e.category)).cloned().collect(),
        }
    }

    pub fn counts(&self, split: Split) -> BTreeMap<Category, usize> {
        let mut m = BTreeMap::new();
        for e in self.select(split) {
            *m.entry(e.category).or_insert(0) += 1;
        }
        m
    }

    pub fn load_pair(&self, e: &ManifestEntry) -> Result<(Image, Image)> {
        Ok((Image::load_png(&self.root.join(&e.clean))?, Image::load_png(&self.root.join(&e.degraded))?))
    }
}

/// Seed of one degraded image, derived from the run seed, the image index
/// within its category and the category itself.
pub fn image_seed(seed: u64, index: usize, category: Category) -> u64 {
    let cat = Category::ALL.iter().position(|&c| c == category).unwrap_or(0) as u64;
    let mut z = seed
        .wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((cat + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Parameter draws use stream 0 of the image seed, masks and noise stream 1,
/// so a degraded image can be rebuilt from its clean source and recipe.
pub fn sample_spec(category: Category, seed: u64) -> DegradationSpec {
    DegradationSpec::sample(category, seed, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn regenerate(clean: &Image, spec: &DegradationSpec, masks: &MaskConfig) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    apply_mixed(clean, spec, masks, &mut rng)
}

/// Center square crop resized to `size x size`.
pub fn prepare_clean(img: &Image, size: usize) -> Result<Image> {
    let side = img.height.min(img.width);
    if side == 0 {
        return Err(Error::Validation("empty image".into()));
    }
    let sq = img.crop((img.height - side) / 2, (img.width - side) / 2, side, side)?;
    let out = if side == size { sq } else { sq.resize(size, size) };
    Ok(out.quantized())
}

/// Readable images of `dir`, sorted by file name. Unreadable files are
/// skipped with a warning.
pub fn load_clean_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match Image::load_png(&p) {
            Ok(img) if img.height > 0 && img.width > 0 => {
                out.push((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), img))
            }
            Ok(_) => log::warn!("skipping empty image {}", p.display()),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub manifest: Manifest,
    /// Degraded images per category, both splits.
    pub counts: BTreeMap<Category, usize>,
    /// Files whose bytes differ from what was on disk before.
    pub changed: usize,
    pub written: usize,
}

/// Tracks files written by one run so a failure can remove them again.
struct Writer {
    root: PathBuf,
    created: Vec<PathBuf>,
    changed: usize,
    written: usize,
}

impl Writer {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        self.written += 1;
        let existed = path.exists();
        if existed && fs::read(&path).map(|old| old == bytes).unwrap_or(false) {
            return Ok(());
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        if !existed {
            self.created.push(path.clone());
        }
        f.write_all(bytes).map_err(|e| Error::io(&path, e))?;
        self.changed += 1;
        Ok(())
    }

    fn rollback(&self) {
        for p in self.created.iter().rev() {
            let _ = fs::remove_file(p);
        }
    }
}

/// Builds the dataset from named clean images. Each clean image is reused
/// by every category; clean images are split between train and test so the
/// test split holds unseen content.
pub fn synth_from_images(clean: &[(String, Image)], out_dir: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    cfg.validate()?;
    if clean.is_empty() {
        return Err(Error::Validation("no readable clean images".into()));
    }
    let (n_train, n_test) = cfg.split_counts();
    let pool_test = if n_test == 0 {
        0
    } else {
        if clean.len() < 2 {
            return Err(Error::Validation("a test split needs at least two clean images".into()));
        }
        ((clean.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, clean.len() - 1)
    };
    let pool_train = clean.len() - pool_test;
    let prepared = clean
        .iter()
        .map(|(_, img)| prepare_clean(img, cfg.size))
        .collect::<Result<Vec<_>>>()?;

    let mut w = Writer {
        root: out_dir.to_path_buf(),
        created: Vec::new(),
        changed: 0,
        written: 0,
    };
    let result = (|| -> Result<SynthSummary> {
        let clean_rel = |i: usize| {
            let split = if i < pool_train { Split::Train } else { Split::Test };
            format!("clean/{split}/{i:04}.png")
        };
        for (i, img) in prepared.iter().enumerate() {
            w.put(&clean_rel(i), &img.encode_png()?)?;
        }
        let mut entries = Vec::new();
        let mut counts = BTreeMap::new();
        for cat in Category::ALL {
            for j in 0..n_train + n_test {
                let (split, src) = if j < n_train {
                    (Split::Train, j % pool_train)
                } else {
                    (Split::Test, pool_train + (j - n_train) % pool_test)
                };
                let seed = image_seed(cfg.seed, j, cat);
                let spec = sample_spec(cat, seed);
                let degraded = regenerate(&prepared[src], &spec, &cfg.masks)?;
                let rel = format!("{}/{split}/{j:04}.png", cat.dir_name());
                w.put(&rel, &degraded.encode_png()?)?;
                entries.push(ManifestEntry {
                    clean: clean_rel(src),
                    degraded: rel,
                    category: cat,
                    labels: cat.labels(),
                    params: spec,
                    seed,
                    split,
                });
                *counts.entry(cat).or_insert(0) += 1;
            }
        }
        let manifest = Manifest {
            root: out_dir.to_path_buf(),
            entries,
        };
        w.put(MANIFEST_FILE, manifest.to_jsonl()?.as_bytes())?;
        w.put("synth_config.json", serde_json::to_string_pretty(cfg)?.as_bytes())?;
        Ok(SynthSummary {
            manifest,
            counts,
            changed: 0,
            written: 0,
        })
    })();
    match result {
        Ok(mut s) => {
            s.changed = w.changed;
            s.written = w.written;
            Ok(s)
        }
        Err(e) => {
            w.rollback();
            Err(e)
        }
    }
}

pub fn synth_dataset(clean_dir: &Path, out_dir: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    let clean = load_clean_dir(clean_dir)?;
    if clean.is_empty() {
        return Err(Error::Validation(format!("no readable images in {}", clean_dir.display())));
    }
    synth_from_images(&clean, out_dir, cfg)
}

/// Writes `count` procedural clean scenes as `scene_NNNN.png`.
pub fn gen_clean(out_dir: &Path, count: usize, size: usize, seed: u64) -> Result<usize> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for i in 0..count {
        clean_scene(size, size, seed, i as u64).save_png(&out_dir.join(format!("scene_{i:04}.png")))?;
    }
    Ok(count)
}
