//! In-memory paired datasets, seed-ordered batch sampling and paired crops.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::RngState;
use crate::category::Category;
use crate::classifier::LabelVector;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::synth::{Manifest, Split};

#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub category: Category,
    pub labels: LabelVector,
    pub clean: Image,
    pub degraded: Image,
}

/// Loads every pair of one split. An empty split is an error.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<Sample>> {
    let entries = manifest.select(split);
    if entries.is_empty() {
        return Err(Error::Validation(format!("the {} split is empty", split.name())));
    }
    entries
        .into_iter()
        .map(|e| {
            let (clean, degraded) = manifest.load_pair(e)?;
            if (clean.height, clean.width) != (degraded.height, degraded.width) {
                return Err(Error::Validation(format!("{} and {} differ in size", e.clean, e.degraded)));
            }
            Ok(Sample {
                name: e.degraded.clone(),
                category: e.category,
                labels: e.labels,
                clean,
                degraded,
            })
        })
        .collect()
}

/// Crops both images at one random location.
pub fn paired_crop<R: Rng>(clean: &Image, degraded: &Image, size: usize, rng: &mut R) -> Result<(Image, Image)> {
    if (clean.height, clean.width) != (degraded.height, degraded.width) {
        return Err(Error::Shape("paired images differ in size".into()));
    }
    if size > clean.height || size > clean.width {
        return Err(Error::Validation(format!(
            "crop {size} exceeds image size {}x{}",
            clean.height, clean.width
        )));
    }
    let top = rng.random_range(0..=clean.height - size);
    let left = rng.random_range(0..=clean.width - size);
    Ok((clean.crop(top, left, size, size)?, degraded.crop(top, left, size, size)?))
}

pub struct Batch {
    /// `[N, 3, crop, crop]`
    pub clean: Tensor<f32>,
    pub degraded: Tensor<f32>,
    pub labels: Vec<LabelVector>,
    pub names: Vec<String>,
}

/// Epoch-wise shuffled sampling without replacement. One generator drives
/// both the visiting order and the crop positions, so the batch sequence is a
/// function of the seed alone.
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerState {
    pub rng: RngState,
    pub order: Vec<usize>,
    pub pos: usize,
    pub epoch: u64,
}

impl Sampler {
    pub fn new(len: usize, seed: u64) -> Self {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            // forces a shuffle on first use
            pos: len,
            epoch: 0,
        }
    }

    /// Completed passes over the data.
    pub fn epoch(&self) -> u64 {
        self.epoch.saturating_sub(1)
    }

    fn next_index(&mut self) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    /// Next `batch` samples, each cropped to `crop` (0 keeps the full image).
    pub fn next_batch(&mut self, samples: &[Sample], batch: usize, crop: usize) -> Result<Batch> {
        if samples.len() != self.order.len() || samples.is_empty() {
            return Err(Error::Usage("sampler does not match the dataset".into()));
        }
        let (mut clean, mut degraded, mut labels, mut names) = (vec![], vec![], vec![], vec![]);
        for _ in 0..batch {
            let s = &samples[self.next_index()];
            let (c, d) = if crop == 0 {
                (s.clean.clone(), s.degraded.clone())
            } else {
                paired_crop(&s.clean, &s.degraded, crop, &mut self.rng)?
            };
            clean.push(c.to_tensor());
            degraded.push(d.to_tensor());
            labels.push(s.labels);
            names.push(s.name.clone());
        }
        Ok(Batch {
            clean: Tensor::stack(&clean)?,
            degraded: Tensor::stack(&degraded)?,
            labels,
            names,
        })
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            rng: RngState::capture(&self.rng),
            order: self.order.clone(),
            pos: self.pos,
            epoch: self.epoch,
        }
    }

    pub fn from_state(s: &SamplerState) -> Result<Self> {
        let mut seen = vec![false; s.order.len()];
        for &i in &s.order {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Checkpoint("sampler order is not a permutation".into()));
            }
        }
        if s.pos > s.order.len() {
            return Err(Error::Checkpoint("sampler position out of range".into()));
        }
        Ok(Sampler {
            rng: s.rng.restore()?,
            order: s.order.clone(),
            pos: s.pos,
            epoch: s.epoch,
        })
    }
}
