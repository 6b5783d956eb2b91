//! Procedural clean scenes for when no photo collection is at hand.
//!
//! Each scene is a smooth two-color gradient with a few flat or shaded
//! shapes and an optional periodic texture, kept inside `[0.05, 0.95]` so
//! that additive degradations stay visible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::imageio::Image;

fn color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

enum Shape {
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Disk { cy: f32, cx: f32, r: f32 },
    Band { nx: f32, ny: f32, off: f32, half: f32 },
}

impl Shape {
    fn random<R: Rng>(rng: &mut R, h: f32, w: f32) -> Shape {
        match rng.random_range(0..3) {
            0 => {
                let (a, b) = (rng.random_range(0.0..h), rng.random_range(0.0..h));
                let (c, d) = (rng.random_range(0.0..w), rng.random_range(0.0..w));
                Shape::Rect {
                    y0: a.min(b),
                    y1: a.max(b).max(a.min(b) + 3.0),
                    x0: c.min(d),
                    x1: c.max(d).max(c.min(d) + 3.0),
                }
            }
            1 => Shape::Disk {
                cy: rng.random_range(0.0..h),
                cx: rng.random_range(0.0..w),
                r: rng.random_range(3.0..0.35 * h.min(w).max(9.0)),
            },
            _ => {
                let t: f32 = rng.random_range(0.0..std::f32::consts::PI);
                Shape::Band {
                    nx: t.cos(),
                    ny: t.sin(),
                    off: rng.random_range(0.0..(h + w) * 0.5),
                    half: rng.random_range(1.5..6.0),
                }
            }
        }
    }

    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Band { nx, ny, off, half } => (x * nx + y * ny - off).abs() <= half,
        }
    }
}

/// Deterministic scene for `(seed, index)`.
pub fn clean_scene(h: usize, w: usize, seed: u64, index: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    let shapes: Vec<(Shape, [f32; 3], f32)> = (0..rng.random_range(3..9))
        .map(|_| {
            let s = Shape::random(&mut rng, h as f32, w as f32);
            let shade = rng.random_range(-0.15..0.15);
            (s, color(&mut rng), shade)
        })
        .collect();
    let texture = rng.random_bool(0.5).then(|| {
        let period: f32 = rng.random_range(3.0..10.0);
        let t: f32 = rng.random_range(0.0..std::f32::consts::PI);
        (t.cos() / period, t.sin() / period, rng.random_range(0.03..0.1))
    });
    let diag = ((h * h + w * w) as f32).sqrt().max(1.0);
    Image::from_fn(h, w, |c, y, x| {
        let (yf, xf) = (y as f32 + 0.5, x as f32 + 0.5);
        let t = (((xf - w as f32 / 2.0) * gx + (yf - h as f32 / 2.0) * gy) / diag + 0.5).clamp(0.0, 1.0);
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for (shape, col, shade) in &shapes {
            if shape.contains(yf, xf) {
                v = col[c] + shade * (yf / h as f32 - 0.5);
            }
        }
        if let Some((fx, fy, amp)) = texture {
            v += amp * (std::f32::consts::TAU * (xf * fx + yf * fy)).sin();
        }
        v.clamp(0.05, 0.95)
    })
}
