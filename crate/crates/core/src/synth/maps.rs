//! Procedural rain and snow masks and depth maps.

use rand::Rng;

use crate::engine::kernels;

pub const STREAK_MIN_LEN: f64 = 8.0;
pub const STREAK_MAX_LEN: f64 = 24.0;
pub const STREAK_MIN_ANGLE: f64 = 70.0;
pub const STREAK_MAX_ANGLE: f64 = 110.0;
pub const FLAKE_MIN_RADIUS: f64 = 1.0;
pub const FLAKE_MAX_RADIUS: f64 = 4.0;

/// Distance from `(px, py)` to the segment `a-b`.
fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Binary streak field. Streaks (1 px wide, anti-aliased, then binarized at
/// 0.5) are added until `coverage` of the pixels is set. All streaks share a
/// base angle drawn from `[70, 110]` degrees, with a small per-streak jitter.
pub fn rain_mask<R: Rng>(h: usize, w: usize, coverage: f64, rng: &mut R) -> Vec<f32> {
    let mut m = vec![0.0f32; h * w];
    let target = (coverage.clamp(0.0, 1.0) * (h * w) as f64).round() as usize;
    let base: f64 = rng.random_range(STREAK_MIN_ANGLE..=STREAK_MAX_ANGLE);
    let mut covered = 0usize;
    let mut attempts = 0usize;
    while covered < target && attempts < 100 * target.max(1) {
        attempts += 1;
        let angle = (base + rng.random_range(-3.0..=3.0)).clamp(STREAK_MIN_ANGLE, STREAK_MAX_ANGLE);
        let len: f64 = rng.random_range(STREAK_MIN_LEN..=STREAK_MAX_LEN);
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let (s, c) = angle.to_radians().sin_cos();
        let (hx, hy) = (0.5 * len * c, 0.5 * len * s);
        let (ax, ay, bx, by) = (cx - hx, cy - hy, cx + hx, cy + hy);
        let x0 = (ax.min(bx).floor() as isize - 1).max(0) as usize;
        let x1 = ((ax.max(bx).ceil() as isize + 1).max(0) as usize).min(w.saturating_sub(1));
        let y0 = (ay.min(by).floor() as isize - 1).max(0) as usize;
        let y1 = ((ay.max(by).ceil() as isize + 1).max(0) as usize).min(h.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, ax, ay, bx, by);
                let v = (1.0 - d).max(0.0);
                if v >= 0.5 && m[y * w + x] == 0.0 {
                    m[y * w + x] = 1.0;
                    covered += 1;
                }
            }
        }
    }
    m
}

/// Non-overlapping anti-aliased flakes. Returns the mask and the number of
/// flakes placed (each flake is one connected component of `mask > 0`).
pub fn snow_mask<R: Rng>(h: usize, w: usize, density: f64, rng: &mut R) -> (Vec<f32>, usize) {
    let want = (density.max(0.0) * (h * w) as f64).round() as usize;
    let mut flakes: Vec<(f64, f64, f64)> = Vec::with_capacity(want);
    let mut attempts = 0;
    while flakes.len() < want && attempts < 200 * want.max(1) {
        attempts += 1;
        let r: f64 = rng.random_range(FLAKE_MIN_RADIUS..=FLAKE_MAX_RADIUS);
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        // flakes must keep at least two pixels of clearance
        let clear = flakes
            .iter()
            .all(|&(x, y, r2)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() >= r + r2 + 2.0);
        if clear {
            flakes.push((cx, cy, r));
        }
    }
    let mut m = vec![0.0f32; h * w];
    for &(cx, cy, r) in &flakes {
        let (x0, x1) = ((cx - r - 1.0).floor().max(0.0) as usize, ((cx + r + 1.0).ceil() as usize).min(w));
        let (y0, y1) = ((cy - r - 1.0).floor().max(0.0) as usize, ((cy + r + 1.0).ceil() as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                let v = (r + 0.5 - d).clamp(0.0, 1.0) as f32;
                let p = &mut m[y * w + x];
                *p = p.max(v);
            }
        }
    }
    let n = flakes.len();
    (m, n)
}

/// Depth in `[0, 1]`: far at the top, near at the bottom, perturbed by
/// bilinearly upsampled low-resolution noise and min-max normalized.
pub fn depth_map<R: Rng>(h: usize, w: usize, rng: &mut R) -> Vec<f32> {
    const GRID: usize = 4;
    let coarse: Vec<f32> = (0..GRID * GRID).map(|_| rng.random_range(-0.3..0.3)).collect();
    let noise = kernels::bilinear_resize(&coarse, 1, GRID, GRID, h, w);
    let mut d: Vec<f32> = (0..h * w)
        .map(|i| {
            let y = i / w;
            let grad = if h > 1 { 1.0 - y as f32 / (h - 1) as f32 } else { 0.5 };
            grad + noise[i]
        })
        .collect();
    let lo = d.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo > 0.0 {
        d.iter_mut().for_each(|v| *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0));
    } else {
        d.iter_mut().for_each(|v| *v = 0.0);
    }
    d
}
