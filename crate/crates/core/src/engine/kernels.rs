//! Graph-free numeric kernels. Buffers are row-major; a "plane" is one
//! `H x W` channel of one sample.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Real;

/// Output extent of a strided, zero-padded window sweep.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Geometry of a 2-d window sweep over one `C x H x W` sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        conv_out_len(self.height, self.k, self.stride, self.pad)
    }

    pub fn out_w(&self) -> usize {
        conv_out_len(self.width, self.k, self.stride, self.pad)
    }

    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Rearranges the `k x k` neighborhoods of one sample into a
/// `[C * k * k, out_h * out_w]` matrix (zero padding).
pub fn im2col<T: Real>(x: &[T], g: Window, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = oh * ow;
    debug_assert_eq!(cols.len(), g.rows() * ncol);
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        // valid ox range: 0 <= ox + kx - pad < width
                        let off = kx as isize - pad;
                        let lo = ((-off).max(0) as usize).min(ow);
                        let hi = ((g.width as isize - off).min(ow as isize)).max(lo as isize) as usize;
                        drow[..lo].iter_mut().for_each(|v| *v = T::zero());
                        drow[hi..].iter_mut().for_each(|v| *v = T::zero());
                        if hi > lo {
                            let s0 = (lo as isize + off) as usize;
                            drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            *d = if ix < 0 || ix >= g.width as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (adds) columns back onto a sample.
pub fn col2im<T: Real>(cols: &[T], g: Window, x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = oh * ow;
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let off = kx as isize - pad;
                        let lo = ((-off).max(0) as usize).min(ow);
                        let hi = ((g.width as isize - off).min(ow as isize)).max(lo as isize) as usize;
                        if hi > lo {
                            let d0 = (lo as isize + off) as usize;
                            for (d, &v) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                                *d = *d + v;
                            }
                        }
                        continue;
                    }
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of an `[N, C_in, H, W]` batch with `[C_out, C_in, k, k]`
/// weights. Returns the `[N, C_out, H', W']` buffer.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    n: usize,
    g: Window,
    weight: &[T],
    c_out: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, ncol) = (g.rows(), g.cols());
    let in_per = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); n * c_out * ncol];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * ncol]
    };
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let b: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let os = &mut out[s * c_out * ncol..(s + 1) * c_out * ncol];
        if let Some(bias) = bias {
            for (co, chunk) in os.chunks_mut(ncol).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            c_out, rows, ncol, T::one(), weight, rows as isize, 1, b, ncol as isize, 1, beta, os,
            ncol as isize, 1,
        );
    }
    out
}

/// Gradients of [`conv2d_forward`]. Any of the outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    g: Window,
    weight: &[T],
    c_out: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (rows, ncol) = (g.rows(), g.cols());
    let in_per = g.channels * g.height * g.width;
    let pointwise = g.is_pointwise();
    // Stride-1 "same" convolutions: dx is the correlation of dout with the
    // flipped, transposed kernel, which keeps the GEMM well shaped.
    let same = !pointwise && g.stride == 1 && 2 * g.pad + 1 == g.k;
    if same {
        if let Some(dx) = dx.take() {
            let k2 = g.k * g.k;
            let mut flipped = vec![T::zero(); weight.len()];
            for co in 0..c_out {
                for ci in 0..g.channels {
                    for t in 0..k2 {
                        flipped[(ci * c_out + co) * k2 + (k2 - 1 - t)] = weight[(co * g.channels + ci) * k2 + t];
                    }
                }
            }
            let gt = Window {
                channels: c_out,
                ..g
            };
            let d = conv2d_forward(dout, n, gt, &flipped, g.channels, None);
            dx.iter_mut().zip(&d).for_each(|(a, &b)| *a = *a + b);
        }
    }
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * ncol }];
    let mut dcols = vec![T::zero(); if dx.is_some() && !pointwise { rows * ncol } else { 0 }];
    for s in 0..n {
        let ds = &dout[s * c_out * ncol..(s + 1) * c_out * ncol];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in ds.chunks(ncol).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xs = &x[s * in_per..(s + 1) * in_per];
            let b: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dW[co, r] += sum_p dout[co, p] * cols[r, p]
            T::gemm(
                c_out, ncol, rows, T::one(), ds, ncol as isize, 1, b, 1, ncol as isize, T::one(),
                dw, rows as isize, 1,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            if pointwise {
                T::gemm(
                    rows, c_out, ncol, T::one(), weight, 1, rows as isize, ds, ncol as isize, 1,
                    T::one(), dxs, ncol as isize, 1,
                );
            } else {
                T::gemm(
                    rows, c_out, ncol, T::one(), weight, 1, rows as isize, ds, ncol as isize, 1,
                    T::zero(), &mut dcols, ncol as isize, 1,
                );
                col2im(&dcols, g, dxs);
            }
        }
    }
}

/// Transposed convolution of an `[N, C_in, H, W]` batch with
/// `[C_in, C_out, k, k]` weights. `g` describes the *output* geometry
/// (`channels = C_out`), whose window sweep lands on the `H x W` input grid.
pub fn conv_transpose2d_forward<T: Real>(
    x: &[T],
    n: usize,
    c_in: usize,
    g: Window,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, ncol) = (g.rows(), g.cols());
    let out_per = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); n * out_per];
    let mut cols = vec![T::zero(); rows * ncol];
    for s in 0..n {
        let xs = &x[s * c_in * ncol..(s + 1) * c_in * ncol];
        // cols[r, p] = sum_ci W[ci, r] * x[ci, p]
        T::gemm(
            rows, c_in, ncol, T::one(), weight, 1, rows as isize, xs, ncol as isize, 1, T::zero(),
            &mut cols, ncol as isize, 1,
        );
        let os = &mut out[s * out_per..(s + 1) * out_per];
        col2im(&cols, g, os);
        if let Some(bias) = bias {
            let plane = g.height * g.width;
            for (co, chunk) in os.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = *v + bias[co]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    n: usize,
    c_in: usize,
    g: Window,
    weight: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (rows, ncol) = (g.rows(), g.cols());
    let out_per = g.channels * g.height * g.width;
    let plane = g.height * g.width;
    let mut cols = vec![T::zero(); rows * ncol];
    for s in 0..n {
        let ds = &dout[s * out_per..(s + 1) * out_per];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in ds.chunks(plane).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(ds, g, &mut cols);
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * c_in * ncol..(s + 1) * c_in * ncol];
            T::gemm(
                c_in, rows, ncol, T::one(), weight, rows as isize, 1, &cols, ncol as isize, 1,
                T::one(), dxs, ncol as isize, 1,
            );
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xs = &x[s * c_in * ncol..(s + 1) * c_in * ncol];
            T::gemm(
                c_in, ncol, rows, T::one(), xs, ncol as isize, 1, &cols, 1, ncol as isize,
                T::one(), dw, rows as isize, 1,
            );
        }
    }
}

/// Source sample positions and weights for one output coordinate of a
/// half-pixel-center bilinear resize.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w1: f64,
}

pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, w1 }
        })
        .collect()
}

/// Bilinear resize of `planes` planes of size `h x w` to `oh x ow`.
pub fn bilinear_resize<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let wy1 = T::of_f64(a.w1);
            let wy0 = T::one() - wy1;
            for (ox, b) in tx.iter().enumerate() {
                let wx1 = T::of_f64(b.w1);
                let wx0 = T::one() - wx1;
                let top = src[a.i0 * w + b.i0] * wx0 + src[a.i0 * w + b.i1] * wx1;
                let bot = src[a.i1 * w + b.i0] * wx0 + src[a.i1 * w + b.i1] * wx1;
                dst[oy * ow + ox] = top * wy0 + bot * wy1;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward<T: Real>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let wy1 = T::of_f64(a.w1);
            let wy0 = T::one() - wy1;
            for (ox, b) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                let wx1 = T::of_f64(b.w1);
                let wx0 = T::one() - wx1;
                dst[a.i0 * w + b.i0] = dst[a.i0 * w + b.i0] + g * wy0 * wx0;
                dst[a.i0 * w + b.i1] = dst[a.i0 * w + b.i1] + g * wy0 * wx1;
                dst[a.i1 * w + b.i0] = dst[a.i1 * w + b.i0] + g * wy1 * wx0;
                dst[a.i1 * w + b.i1] = dst[a.i1 * w + b.i1] + g * wy1 * wx1;
            }
        }
    }
}

/// Unnormalized 2-d DFT of each `h x w` plane. With `inverse`, the sign of
/// the exponent flips (still unnormalized).
pub fn fft2_planes<T: Real>(
    x: &mut [Complex<T>],
    planes: usize,
    h: usize,
    w: usize,
    inverse: bool,
) {
    let mut planner = FftPlanner::<T>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for p in 0..planes {
        let plane = &mut x[p * h * w..(p + 1) * h * w];
        row_fft.process(plane);
        for c in 0..w {
            for r in 0..h {
                column[r] = plane[r * w + c];
            }
            col_fft.process(&mut column);
            for r in 0..h {
                plane[r * w + c] = column[r];
            }
        }
    }
}

/// Real-input convenience wrapper over [`fft2_planes`].
pub fn fft2_real<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<Complex<T>> {
    let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft2_planes(&mut buf, planes, h, w, false);
    buf
}
