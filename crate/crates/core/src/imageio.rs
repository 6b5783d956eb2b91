//! Planar RGB images in `[0, 1]` and 8-bit PNG conversion.

use std::path::Path;

use crate::engine::{kernels, Tensor};
use crate::error::{Error, Result};

/// Three-channel planar (`[3, H, W]`) float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{}x{} RGB image needs {} values, got {}",
                height,
                width,
                3 * height * width,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image { height, width, data }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn clipped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Per-pixel channel mean.
    pub fn gray(&self) -> Vec<f64> {
        let n = self.plane_len();
        (0..n)
            .map(|i| (0..3).map(|c| self.data[c * n + i] as f64).sum::<f64>() / 3.0)
            .collect()
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(h, w, |c, y, x| self.get(c, top + y, left + x)))
    }

    pub fn resize(&self, h: usize, w: usize) -> Image {
        let data = kernels::bilinear_resize(&self.data, 3, self.height, self.width, h, w);
        Image { height: h, width: w, data }
    }

    /// `[1, 3, H, W]`
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, 3, self.height, self.width], self.data.clone()).expect("consistent image")
    }

    /// Sample `i` of an `[N, 3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor<f32>, i: usize) -> Result<Image> {
        let (_, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        Image::new(h, w, t.sample(i)?.into_data())
    }

    pub fn all_in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.as_raw();
        Ok(Image::from_fn(h, w, |c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0))
    }

    /// Interleaved 8-bit samples, rounded after clipping to `[0, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.plane_len();
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push(quantize(self.data[c * n + i]));
            }
        }
        out
    }

    /// Encoded 8-bit PNG bytes.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: Default::default(),
            source,
        })?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// The image after an 8-bit round trip.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, |c, y, x| ((c * 35 + y * 7 + x) % 256) as f32 / 255.0);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.height, 5);
        assert_eq!(back.width, 7);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_picks_the_window() {
        let img = Image::from_fn(4, 4, |c, y, x| (c * 16 + y * 4 + x) as f32);
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.plane(0), &[6.0, 7.0, 10.0, 11.0]);
        assert!(img.crop(3, 3, 2, 2).is_err());
    }

    #[test]
    fn tensor_conversion_round_trips() {
        let img = Image::from_fn(2, 3, |c, y, x| (c + y + x) as f32 * 0.1);
        assert_eq!(Image::from_tensor(&img.to_tensor(), 0).unwrap(), img);
    }
}
