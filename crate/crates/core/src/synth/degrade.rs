//! Degradation formulas and per-image recipes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::guided::illumination_map;
use super::maps::{depth_map, rain_mask, snow_mask};
use crate::category::Category;
use crate::classifier::Degradation;
use crate::error::{Error, Result};
use crate::imageio::Image;

pub const ALPHA_RANGE: (f64, f64) = (2.0, 3.0);
pub const SIGMA_RANGE: (f64, f64) = (0.03, 0.08);
pub const BETA_RANGE: (f64, f64) = (1.0, 2.0);
pub const AIRLIGHT_RANGE: (f64, f64) = (0.6, 0.9);
pub const SNOW_INTENSITY: f64 = 1.01;

/// Mask densities for the procedural rain and snow generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Fraction of pixels covered by rain streaks.
    pub rain_coverage: f64,
    /// Snowflakes per pixel.
    pub snow_density: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            rain_coverage: 0.05,
            snow_density: 0.004,
        }
    }
}

/// Sampled parameters of one degraded image. Only the parameters of the
/// degradations in `types` are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub types: Vec<Degradation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_illum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_haze: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub airlight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snow_intensity: Option<f64>,
    pub seed: u64,
}

impl DegradationSpec {
    /// Draws the parameters for `category` from their sampling ranges.
    pub fn sample<R: Rng>(category: Category, seed: u64, rng: &mut R) -> Self {
        let has = |d| category.types().contains(&d);
        let mut draw = |r: (f64, f64)| rng.random_range(r.0..=r.1);
        let (mut alpha, mut sigma, mut beta, mut air) = (None, None, None, None);
        if has(Degradation::Haze) {
            beta = Some(draw(BETA_RANGE));
            air = Some(draw(AIRLIGHT_RANGE));
        }
        if has(Degradation::Noise) {
            alpha = Some(draw(ALPHA_RANGE));
            sigma = Some(draw(SIGMA_RANGE));
        }
        DegradationSpec {
            types: category.types().to_vec(),
            alpha_illum: alpha,
            sigma,
            beta_haze: beta,
            airlight: air,
            snow_intensity: has(Degradation::Snow).then_some(SNOW_INTENSITY),
            seed,
        }
    }

    pub fn category(&self) -> Result<Category> {
        Category::from_types(&self.types)
    }

    pub fn validate(&self) -> Result<()> {
        let cat = self.category()?;
        let need = |d, v: Option<f64>, name: &str| -> Result<()> {
            if cat.types().contains(&d) && v.is_none() {
                return Err(Error::Validation(format!("{cat} recipe lacks {name}")));
            }
            Ok(())
        };
        need(Degradation::Haze, self.beta_haze, "beta_haze")?;
        need(Degradation::Haze, self.airlight, "airlight")?;
        need(Degradation::Noise, self.alpha_illum, "alpha_illum")?;
        need(Degradation::Noise, self.sigma, "sigma")?;
        need(Degradation::Snow, self.snow_intensity, "snow_intensity")?;
        Ok(())
    }
}

/// `clip(I / L * L^alpha + N(0, sigma))`, with independent noise per channel.
pub fn apply_noise<R: Rng>(img: &Image, illum: &[f64], alpha: f64, sigma: f64, rng: &mut R) -> Image {
    let n = img.plane_len();
    let normal = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    let mut out = img.clone();
    for c in 0..3 {
        for (i, v) in out.plane_mut(c).iter_mut().enumerate() {
            let l = illum[i];
            let base = *v as f64 / l * l.powf(alpha);
            let eps = normal.map_or(0.0, |d| d.sample(rng));
            *v = (base + eps).clamp(0.0, 1.0) as f32;
        }
    }
    debug_assert_eq!(out.data.len(), 3 * n);
    out
}

/// Transmittance `t = exp(-beta d)`.
pub fn transmittance(depth: &[f32], beta: f64) -> Vec<f64> {
    depth.iter().map(|&d| (-beta * d as f64).exp()).collect()
}

/// Atmospheric scattering: `I t + A (1 - t)`.
pub fn apply_haze(img: &Image, depth: &[f32], beta: f64, airlight: f64) -> Image {
    let t = transmittance(depth, beta);
    let mut out = img.clone();
    for c in 0..3 {
        for (i, v) in out.plane_mut(c).iter_mut().enumerate() {
            *v = (*v as f64 * t[i] + airlight * (1.0 - t[i])) as f32;
        }
    }
    out
}

/// `clip(I + M)`
pub fn apply_rain(img: &Image, mask: &[f32]) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        for (v, &m) in out.plane_mut(c).iter_mut().zip(mask) {
            *v = (*v + m).clamp(0.0, 1.0);
        }
    }
    out
}

/// `clip(I (1 - M) + C M)`
pub fn apply_snow(img: &Image, mask: &[f32], intensity: f64) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        for (v, &m) in out.plane_mut(c).iter_mut().zip(mask) {
            let m = m as f64;
            *v = (*v as f64 * (1.0 - m) + intensity * m).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Per-image maps consumed by the degradation formulas.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneMaps {
    pub rain: Option<Vec<f32>>,
    pub snow: Option<Vec<f32>>,
    pub depth: Option<Vec<f32>>,
    /// Overrides the illumination estimate of the noise step. When absent
    /// it is computed from the image entering that step.
    pub illumination: Option<Vec<f64>>,
}

impl SceneMaps {
    /// Draws the maps `spec` needs from `rng`, in the order snow, rain, depth.
    pub fn sample<R: Rng>(h: usize, w: usize, spec: &DegradationSpec, masks: &MaskConfig, rng: &mut R) -> Self {
        let has = |d| spec.types.contains(&d);
        let mut maps = SceneMaps::default();
        if has(Degradation::Snow) {
            maps.snow = Some(snow_mask(h, w, masks.snow_density, rng).0);
        }
        if has(Degradation::Rain) {
            maps.rain = Some(rain_mask(h, w, masks.rain_coverage, rng));
        }
        if has(Degradation::Haze) {
            maps.depth = Some(depth_map(h, w, rng));
        }
        maps
    }
}

/// Composes the single degradations of `spec` in the fixed order rain, haze,
/// noise (snow is never mixed). Noise samples come from `rng`.
pub fn compose<R: Rng>(img: &Image, spec: &DegradationSpec, maps: &SceneMaps, rng: &mut R) -> Result<Image> {
    spec.validate()?;
    let n = img.plane_len();
    let map = |m: &Option<Vec<f32>>, what: &str| -> Result<Vec<f32>> {
        match m {
            Some(v) if v.len() == n => Ok(v.clone()),
            Some(v) => Err(Error::Validation(format!("{what} map has {} pixels, image has {n}", v.len()))),
            None => Err(Error::Validation(format!("{what} map missing"))),
        }
    };
    let has = |d| spec.types.contains(&d);
    let mut out = img.clone();
    if has(Degradation::Snow) {
        out = apply_snow(&out, &map(&maps.snow, "snow")?, spec.snow_intensity.unwrap_or(SNOW_INTENSITY));
    }
    if has(Degradation::Rain) {
        out = apply_rain(&out, &map(&maps.rain, "rain")?);
    }
    if has(Degradation::Haze) {
        let (beta, a) = (spec.beta_haze.unwrap_or_default(), spec.airlight.unwrap_or_default());
        out = apply_haze(&out, &map(&maps.depth, "depth")?, beta, a);
    }
    if has(Degradation::Noise) {
        let l = match &maps.illumination {
            Some(l) if l.len() == n => l.clone(),
            Some(_) => return Err(Error::Validation("illumination map size mismatch".into())),
            None => illumination_map(&out),
        };
        let (alpha, sigma) = (spec.alpha_illum.unwrap_or_default(), spec.sigma.unwrap_or_default());
        out = apply_noise(&out, &l, alpha, sigma, rng);
    }
    Ok(out)
}

/// Samples the maps and composes the degradations with one shared stream.
pub fn apply_mixed<R: Rng>(img: &Image, spec: &DegradationSpec, masks: &MaskConfig, rng: &mut R) -> Result<Image> {
    spec.validate()?;
    let maps = SceneMaps::sample(img.height, img.width, spec, masks, rng);
    compose(img, spec, &maps, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn noise_formula_cases() {
        let img = random(8, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ones = vec![1.0; 64];
        assert_eq!(apply_noise(&img, &ones, 2.5, 0.0, &mut rng), img);
        let half = Image::filled(4, 4, 0.5);
        let quarter = vec![0.25; 16];
        let out = apply_noise(&half, &quarter, 2.0, 0.0, &mut rng);
        assert!(out.data.iter().all(|&v| (v - 0.125).abs() < 1e-7));
    }

    #[test]
    fn haze_formula_cases() {
        let img = random(6, 6, 2);
        assert_eq!(apply_haze(&img, &[0.0; 36], 1.7, 0.8), img);
        let dark = Image::filled(2, 2, 0.2);
        let out = apply_haze(&dark, &[1.0; 4], std::f64::consts::LN_2, 0.8);
        assert!(out.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn haze_stays_between_image_and_airlight() {
        let img = random(8, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = depth_map(8, 8, &mut rng);
        let a = 0.7;
        let out = apply_haze(&img, &d, 1.5, a);
        for (o, i) in out.data.iter().zip(&img.data) {
            let (lo, hi) = (i.min(a as f32), i.max(a as f32));
            assert!(*o >= lo - 1e-6 && *o <= hi + 1e-6);
        }
    }

    #[test]
    fn rain_and_snow_identities() {
        let img = random(5, 5, 4);
        assert_eq!(apply_rain(&img, &[0.0; 25]), img);
        assert_eq!(apply_snow(&img, &[0.0; 25], SNOW_INTENSITY), img);
        let white = Image::filled(5, 5, 1.0);
        assert_eq!(apply_rain(&white, &[1.0; 25]), white);
        let full = apply_snow(&img, &[1.0; 25], SNOW_INTENSITY);
        assert!(full.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sampled_parameters_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = DegradationSpec::sample(Category::RainHazeNoise, 0, &mut rng);
            let a = s.alpha_illum.unwrap();
            let sg = s.sigma.unwrap();
            let b = s.beta_haze.unwrap();
            let air = s.airlight.unwrap();
            assert!((2.0..=3.0).contains(&a));
            assert!((0.03..=0.08).contains(&sg));
            assert!((1.0..=2.0).contains(&b));
            assert!((0.6..=0.9).contains(&air));
            assert!(s.snow_intensity.is_none());
        }
        let s = DegradationSpec::sample(Category::Snow, 0, &mut rng);
        assert_eq!(s.snow_intensity, Some(1.01));
    }

    #[test]
    fn invalid_combination_rejected() {
        let spec = DegradationSpec {
            types: vec![Degradation::Snow, Degradation::Rain],
            alpha_illum: None,
            sigma: None,
            beta_haze: None,
            airlight: None,
            snow_intensity: Some(1.01),
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Image::filled(8, 8, 0.5);
        assert!(matches!(
            apply_mixed(&img, &spec, &MaskConfig::default(), &mut rng),
            Err(Error::Validation(_))
        ));
    }

    fn spec(cat: Category, seed: u64) -> DegradationSpec {
        DegradationSpec::sample(cat, seed, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let (h, w) = (320, 320);
        let img = Image::filled(h, w, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sigma = 0.05;
        let out = apply_noise(&img, &vec![1.0; h * w], 2.0, sigma, &mut rng);
        let n = out.data.len() as f64;
        let mean = out.data.iter().map(|&v| v as f64 - 0.5).sum::<f64>() / n;
        let var = out.data.iter().map(|&v| (v as f64 - 0.5 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(n >= 1e5);
        assert!((var - sigma * sigma).abs() <= 0.05 * sigma * sigma, "{var}");
    }

    #[test]
    fn haze_monotone_on_grid() {
        let (i, a) = (0.2f32, 0.8);
        let px = Image::filled(1, 1, i);
        let at = |beta: f64, d: f32| apply_haze(&px, &[d], beta, a).data[0];
        for bi in 0..10 {
            for di in 0..10 {
                let beta = 1.0 + bi as f64 / 9.0;
                let d = 0.1 + 0.9 * di as f32 / 9.0;
                if bi > 0 {
                    assert!(at(beta, d) > at(beta - 1.0 / 9.0, d));
                }
                if di > 0 {
                    assert!(at(beta, d) > at(beta, d - 0.1));
                }
                let t = transmittance(&[d], beta)[0];
                assert!(t > 0.0 && t <= 1.0);
            }
        }
    }

    #[test]
    fn neutral_maps_give_identity() {
        let img = random(16, 16, 6);
        let mut s = spec(Category::RainHazeNoise, 6);
        s.sigma = Some(0.0);
        let maps = SceneMaps {
            rain: Some(vec![0.0; 256]),
            depth: Some(vec![0.0; 256]),
            illumination: Some(vec![1.0; 256]),
            ..Default::default()
        };
        let out = compose(&img, &s, &maps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn rain_haze_with_empty_rain_is_haze() {
        let img = random(16, 16, 7);
        let rh = spec(Category::RainHaze, 7);
        let mut maps = SceneMaps::sample(16, 16, &rh, &MaskConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        maps.rain = Some(vec![0.0; 256]);
        let mixed = compose(&img, &rh, &maps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let haze = apply_haze(&img, maps.depth.as_ref().unwrap(), rh.beta_haze.unwrap(), rh.airlight.unwrap());
        assert_eq!(mixed, haze);
    }

    #[test]
    fn mixed_equals_explicit_composition() {
        let img = random(32, 32, 8);
        let s = spec(Category::RainHaze, 8);
        let masks = MaskConfig::default();
        let got = apply_mixed(&img, &s, &masks, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rain = rain_mask(32, 32, masks.rain_coverage, &mut rng);
        let depth = depth_map(32, 32, &mut rng);
        let want = apply_haze(&apply_rain(&img, &rain), &depth, s.beta_haze.unwrap(), s.airlight.unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn outputs_in_range_and_reproducible() {
        let img = random(24, 24, 10);
        for (k, cat) in Category::ALL.iter().enumerate() {
            let s = spec(*cat, k as u64);
            let run = || apply_mixed(&img, &s, &MaskConfig::default(), &mut ChaCha8Rng::seed_from_u64(k as u64)).unwrap();
            let a = run();
            assert!(a.all_in_unit_range(), "{cat}");
            assert_eq!(a.data, run().data);
        }
    }
}
