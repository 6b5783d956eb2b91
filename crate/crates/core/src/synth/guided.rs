//! Box and guided filtering on single-channel `f64` planes.

use crate::imageio::Image;

pub const ILLUMINATION_RADIUS: usize = 8;
pub const ILLUMINATION_EPS: f64 = 1e-3;
pub const ILLUMINATION_FLOOR: f64 = 0.05;

/// Mean over the `(2r+1)^2` window around each pixel, clipped at the borders
/// (the divisor is the number of in-bounds pixels).
pub fn box_mean(x: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    // integral image with a zero first row and column
    let stride = w + 1;
    let mut sat = vec![0.0; (h + 1) * stride];
    for y in 0..h {
        let mut row = 0.0;
        for xx in 0..w {
            row += x[y * w + xx];
            sat[(y + 1) * stride + xx + 1] = sat[y * stride + xx + 1] + row;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for xx in 0..w {
            let (x0, x1) = (xx.saturating_sub(r), (xx + r + 1).min(w));
            let s = sat[y1 * stride + x1] - sat[y0 * stride + x1] - sat[y1 * stride + x0] + sat[y0 * stride + x0];
            out[y * w + xx] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Edge-preserving guided filter of `src` steered by `guide`.
pub fn guided_filter(guide: &[f64], src: &[f64], h: usize, w: usize, r: usize, eps: f64) -> Vec<f64> {
    let mul = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mean_i = box_mean(guide, h, w, r);
    let mean_p = box_mean(src, h, w, r);
    let corr_ip = box_mean(&mul(guide, src), h, w, r);
    let corr_ii = box_mean(&mul(guide, guide), h, w, r);
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    for i in 0..h * w {
        let var = corr_ii[i] - mean_i[i] * mean_i[i];
        let cov = corr_ip[i] - mean_i[i] * mean_p[i];
        a[i] = cov / (var + eps);
        b[i] = mean_p[i] - a[i] * mean_i[i];
    }
    let mean_a = box_mean(&a, h, w, r);
    let mean_b = box_mean(&b, h, w, r);
    (0..h * w).map(|i| mean_a[i] * guide[i] + mean_b[i]).collect()
}

/// Smoothed illumination estimate: the per-pixel RGB maximum filtered with
/// the luminance as guide, clamped to `[0.05, 1]`.
pub fn illumination_map(img: &Image) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let n = h * w;
    let lum: Vec<f64> = (0..n)
        .map(|i| {
            0.299 * img.data[i] as f64 + 0.587 * img.data[n + i] as f64 + 0.114 * img.data[2 * n + i] as f64
        })
        .collect();
    let max_rgb: Vec<f64> = (0..n)
        .map(|i| (0..3).map(|c| img.data[c * n + i] as f64).fold(f64::MIN, f64::max))
        .collect();
    guided_filter(&lum, &max_rgb, h, w, ILLUMINATION_RADIUS, ILLUMINATION_EPS)
        .into_iter()
        .map(|v| v.clamp(ILLUMINATION_FLOOR, 1.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window(y: usize, x: usize, h: usize, w: usize, r: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
            for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                v.push((yy, xx));
            }
        }
        v
    }

    /// Per-window least squares fit `p ~ a I + b`, then average of every
    /// window's prediction at each pixel.
    fn brute_force(guide: &[f64], src: &[f64], h: usize, w: usize, r: usize, eps: f64) -> Vec<f64> {
        let mut coef = vec![(0.0, 0.0); h * w];
        for y in 0..h {
            for x in 0..w {
                let win = window(y, x, h, w, r);
                let n = win.len() as f64;
                let (mut si, mut sp, mut sii, mut sip) = (0.0, 0.0, 0.0, 0.0);
                for &(yy, xx) in &win {
                    let (i, p) = (guide[yy * w + xx], src[yy * w + xx]);
                    si += i;
                    sp += p;
                    sii += i * i;
                    sip += i * p;
                }
                let (mi, mp) = (si / n, sp / n);
                let a = (sip / n - mi * mp) / (sii / n - mi * mi + eps);
                coef[y * w + x] = (a, mp - a * mi);
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let win = window(y, x, h, w, r);
                let s: f64 = win
                    .iter()
                    .map(|&(yy, xx)| {
                        let (a, b) = coef[yy * w + xx];
                        a * guide[y * w + x] + b
                    })
                    .sum();
                out[y * w + x] = s / win.len() as f64;
            }
        }
        out
    }

    #[test]
    fn matches_windowed_regression_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w) = (13, 11);
        let guide: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let src: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        for (r, eps) in [(1, 1e-3), (3, 1e-2), (8, 1e-3)] {
            let fast = guided_filter(&guide, &src, h, w, r, eps);
            let slow = brute_force(&guide, &src, h, w, r, eps);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-4, "r={r}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn box_mean_of_constant_is_constant() {
        let x = vec![0.7; 30];
        assert!(box_mean(&x, 5, 6, 2).iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn illumination_of_gray_and_black() {
        let gray = Image::filled(20, 20, 0.5);
        assert!(illumination_map(&gray).iter().all(|v| (v - 0.5).abs() < 1e-6));
        let black = Image::filled(20, 20, 0.0);
        assert!(illumination_map(&black).iter().all(|&v| v == ILLUMINATION_FLOOR));
    }
}
