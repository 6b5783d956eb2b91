use rustfft::num_complex::Complex;

use super::kernels::{self, Window};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: Window,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: Window,
        c_in: usize,
    },
    Unfold {
        x: Var,
        g: Window,
    },
    ColumnWeightedSum {
        cols: Var,
        w: Var,
        c: usize,
        k: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Abs {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Resize {
        x: Var,
        h: usize,
        w: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    AddScalar {
        x: Var,
    },
    MulScalar {
        x: Var,
        s: T,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Narrow {
        x: Var,
        start: usize,
        len: usize,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    FreqL1 {
        a: Var,
        b: Var,
        planes: usize,
        h: usize,
        w: usize,
        sign_re: Vec<T>,
        sign_im: Vec<T>,
    },
    BceLogits {
        z: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient buffer of `v` (allocated on first use), or `None` when `v` does
/// not require gradients. Takes the fields separately so node values can be
/// read while a gradient is written.
fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

/// Records a computation and replays it backwards.
///
/// A tape is built and consumed by one thread. Values are immutable once
/// recorded; `backward` may be called once per tape.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return shape_err(format!("{what}: shapes {a:?} and {b:?} differ"));
    }
    Ok(())
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input. It participates in differentiation iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t.with_requires_grad(false), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc, k, k2) = self.value(w).dims4()?;
        if wc != c_in || k != k2 {
            return shape_err(format!(
                "conv2d: weight {:?} incompatible with input {:?}",
                self.shape(w),
                self.shape(x)
            ));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return shape_err(format!("conv2d: kernel {k} does not fit input {h}x{wd}"));
        }
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return shape_err("conv2d: bias length must equal output channels");
            }
        }
        let g = Window {
            channels: c_in,
            height: h,
            width: wd,
            k,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            g,
            self.value(w).data(),
            c_out,
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, c_out, g.out_h(), g.out_w()], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, g }, rg))
    }

    /// Transposed convolution; weight layout `[C_in, C_out, k, k]`.
    /// Output extent is `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (wc, c_out, k, k2) = self.value(w).dims4()?;
        if wc != c_in || k != k2 || stride == 0 {
            return shape_err(format!(
                "conv_transpose2d: weight {:?} incompatible with input {:?}",
                self.shape(w),
                self.shape(x)
            ));
        }
        let oh = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::Shape("conv_transpose2d: padding too large".into()))?;
        let ow = ((wd - 1) * stride + k) - 2 * pad;
        let g = Window {
            channels: c_out,
            height: oh,
            width: ow,
            k,
            stride,
            pad,
        };
        if g.out_h() != h || g.out_w() != wd {
            return shape_err("conv_transpose2d: geometry is not invertible");
        }
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            n,
            c_in,
            g,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, c_out, oh, ow], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, g, c_in }, rg))
    }

    /// `[N, C, H, W] -> [N, C, k*k, H*W]`, zero padding `(k - 1) / 2`.
    pub fn unfold(&mut self, x: Var, k: usize) -> Result<Var> {
        if k.is_multiple_of(2) {
            return Err(Error::Param(format!("unfold: kernel size {k} must be odd")));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        let g = Window {
            channels: c,
            height: h,
            width: w,
            k,
            stride: 1,
            pad: (k - 1) / 2,
        };
        let per_in = c * h * w;
        let per_out = g.rows() * g.cols();
        let mut out = vec![T::zero(); n * per_out];
        let xd = self.value(x).data();
        for s in 0..n {
            kernels::im2col(
                &xd[s * per_in..(s + 1) * per_in],
                g,
                &mut out[s * per_out..(s + 1) * per_out],
            );
        }
        let value = Tensor::new(&[n, c, k * k, h * w], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Unfold { x, g }, rg))
    }

    /// Per-channel weighted sum over the window axis of an unfolded tensor:
    /// `out[n, c, p] = sum_i w[n, c, i] * cols[n, c, i, p]`.
    pub fn column_weighted_sum(&mut self, cols: Var, w: Var) -> Result<Var> {
        let (n, c, k, p) = self.value(cols).dims4()?;
        if self.value(w).len() != n * c * k {
            return shape_err(format!(
                "column_weighted_sum: weights {:?} do not match columns {:?}",
                self.shape(w),
                self.shape(cols)
            ));
        }
        let cd = self.value(cols).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); n * c * p];
        for nc in 0..n * c {
            let dst = &mut out[nc * p..(nc + 1) * p];
            for i in 0..k {
                let wi = wd[nc * k + i];
                let src = &cd[(nc * k + i) * p..(nc * k + i + 1) * p];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + wi * s);
            }
        }
        let value = Tensor::new(&[n, c, p], out)?;
        let rg = self.rg(cols) || self.rg(w);
        Ok(self.push(value, Op::ColumnWeightedSum { cols, w, c, k }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return shape_err("global_avg_pool: empty spatial extent");
        }
        let hw = h * w;
        let inv = T::one() / T::of_f64(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c, 1, 1], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs { x })
    }

    /// Batch normalization with statistics over `(N, H, W)` per channel.
    /// Returns the output together with the batch mean and unbiased batch
    /// variance (for running-statistics updates).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.check_affine(c, gamma, beta)?;
        let hw = h * w;
        let m = n * hw;
        if m < 2 {
            return Err(Error::Usage(
                "batch_norm_train needs at least two values per channel".into(),
            ));
        }
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for s_ in 0..n {
                s = s + xd[(s_ * c + ci) * hw..(s_ * c + ci + 1) * hw].iter().copied().sum::<T>();
            }
            let mu = s / T::of_f64(m as f64);
            let mut q = T::zero();
            for s_ in 0..n {
                for &v in &xd[(s_ * c + ci) * hw..(s_ * c + ci + 1) * hw] {
                    q = q + (v - mu) * (v - mu);
                }
            }
            mean[ci] = mu;
            var[ci] = q / T::of_f64(m as f64);
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::of_f64(eps)).sqrt())
            .collect();
        let unbiased: Vec<T> = var
            .iter()
            .map(|&v| v * T::of_f64(m as f64 / (m as f64 - 1.0)))
            .collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            rg,
        );
        Ok((v, mean, unbiased))
    }

    /// Batch normalization against fixed running statistics: a per-channel
    /// affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _, _) = self.value(x).dims4()?;
        self.check_affine(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batch_norm_eval: running statistics length mismatch");
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::of_f64(eps)).sqrt())
            .collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            rg,
        ))
    }

    fn check_affine(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err("batch_norm: affine parameters must have one entry per channel");
        }
        Ok(())
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> Result<(Tensor<T>, Vec<T>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ci in 0..c {
                let r = (s * c + ci) * hw..(s * c + ci + 1) * hw;
                for i in r {
                    let xh = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = gd[ci] * xh + bd[ci];
                }
            }
        }
        Ok((Tensor::new(&[n, c, h, w], out)?, xhat))
    }

    /// Half-pixel-center bilinear resize to `oh x ow`.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return shape_err("resize: extents must be positive");
        }
        let out = kernels::bilinear_resize(self.value(x).data(), n * c, h, w, oh, ow);
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Resize { x, h, w }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(self.shape(a), self.shape(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// `x[N, C, H, W] * s[N, C]` broadcast over the spatial axes.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(s).len() != n * c {
            return shape_err(format!(
                "scale_channels: scale {:?} does not match {:?}",
                self.shape(s),
                self.shape(x)
            ));
        }
        let hw = h * w;
        let sd = self.value(s).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(sd)
            .flat_map(|(ch, &k)| ch.iter().map(move |&v| v * k))
            .collect();
        let value = Tensor::new(&[n, c, h, w], data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleChannels { x, s }, rg))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar { x })
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::MulScalar { x, s })
    }

    /// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut parts = Vec::with_capacity(xs.len());
        for &v in xs {
            let (n2, c, h2, w2) = self.value(v).dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return shape_err(format!(
                    "concat: {:?} does not align with {:?}",
                    self.shape(v),
                    self.shape(first)
                ));
            }
            parts.push((v, c));
        }
        let ctot: usize = parts.iter().map(|p| p.1).sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * ctot * hw);
        for s in 0..n {
            for &(v, c) in &parts {
                data.extend_from_slice(&self.value(v).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let value = Tensor::new(&[n, ctot, h, w], data)?;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(value, Op::Concat { parts }, rg))
    }

    /// Channel slice `[start, start + len)` of an `[N, C, H, W]` tensor.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c {
            return shape_err(format!("narrow: [{start}, {}) exceeds {c} channels", start + len));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            data.extend_from_slice(&xd[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let value = Tensor::new(&[n, len, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, start, len }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::of_f64(t.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Mean over all DFT coefficients of `|Re(F(a) - F(b))| + |Im(F(a) - F(b))|`,
    /// with `F` the unnormalized per-plane 2-d DFT.
    pub fn freq_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "freq_l1")?;
        let (n, c, h, w) = self.value(a).dims4()?;
        let diff: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let spec = kernels::fft2_real(&diff, n * c, h, w);
        let count = T::of_f64(spec.len() as f64);
        let total: T = spec.iter().map(|z| z.re.abs() + z.im.abs()).sum();
        let sign_re = spec.iter().map(|z| sign(z.re)).collect();
        let sign_im = spec.iter().map(|z| sign(z.im)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(total / count),
            Op::FreqL1 {
                a,
                b,
                planes: n * c,
                h,
                w,
                sign_re,
                sign_im,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of logits `z` against `{0, 1}` targets,
    /// evaluated in logit space.
    pub fn bce_with_logits(&mut self, z: Var, target: &[T]) -> Result<Var> {
        if self.value(z).len() != target.len() {
            return shape_err("bce_with_logits: logits and targets differ in length");
        }
        let total: T = self
            .value(z)
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &y)| bce_term(z, y))
            .sum();
        let loss = total / T::of_f64(target.len() as f64);
        let rg = self.rg(z);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                z,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Signs of every argument at which a recorded op is not differentiable
    /// (relu and abs inputs, spectral components of the frequency L1). Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<i8> {
        let s = |v: T| sign(v).as_f64() as i8;
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } | Op::Abs { x } => out.extend(self.value(*x).data().iter().map(|&v| s(v))),
                Op::FreqL1 { sign_re, sign_im, .. } => {
                    out.extend(sign_re.iter().map(|&v| s(v)));
                    out.extend(sign_im.iter().map(|&v| s(v)));
                }
                _ => {}
            }
        }
        out
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar loss. Gradients of every recorded value
    /// that requires them become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }

    fn acc_owned(&mut self, v: Var, g: Option<Vec<T>>) {
        let Some(g) = g else { return };
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match self.grads[v.0].as_mut() {
            Some(d) => d.iter_mut().zip(&g).for_each(|(d, &v)| *d = *d + v),
            None => self.grads[v.0] = Some(g),
        }
    }

    /// Adds `g` to the gradient of `v`, copying on first use.
    fn acc_copy(&mut self, v: Var, g: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match self.grads[v.0].as_mut() {
            Some(d) => d.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v),
            None => self.grads[v.0] = Some(g.to_vec()),
        }
    }

    fn acc_elementwise(&mut self, v: Var, g: &[T], f: impl Fn(usize, T) -> T) {
        self.acc(v, |d| {
            for (i, (d, &gi)) in d.iter_mut().zip(g).enumerate() {
                *d = *d + f(i, gi);
            }
        });
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Ops own their saved state; temporarily move it out so inputs can be
        // read while gradients are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, g: win } => {
                let (x, w, b, win) = (*x, *w, *b, *win);
                let c_out = self.shape(w)[0];
                let (dx, dw, db) = {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let mut dx = self.rg(x).then(|| vec![T::zero(); xv.len()]);
                    let mut dw = self.rg(w).then(|| vec![T::zero(); wv.len()]);
                    let mut db = b.filter(|b| self.rg(*b)).map(|_| vec![T::zero(); c_out]);
                    kernels::conv2d_backward(
                        xv.data(),
                        xv.shape()[0],
                        win,
                        wv.data(),
                        c_out,
                        g,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    (dx, dw, db)
                };
                self.acc_owned(x, dx);
                self.acc_owned(w, dw);
                if let Some(b) = b {
                    self.acc_owned(b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, g: win, c_in } => {
                let (x, w, b, win, c_in) = (*x, *w, *b, *win, *c_in);
                let c_out = win.channels;
                let (dx, dw, db) = {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let mut dx = self.rg(x).then(|| vec![T::zero(); xv.len()]);
                    let mut dw = self.rg(w).then(|| vec![T::zero(); wv.len()]);
                    let mut db = b.filter(|b| self.rg(*b)).map(|_| vec![T::zero(); c_out]);
                    kernels::conv_transpose2d_backward(
                        xv.data(),
                        xv.shape()[0],
                        c_in,
                        win,
                        wv.data(),
                        g,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    (dx, dw, db)
                };
                self.acc_owned(x, dx);
                self.acc_owned(w, dw);
                if let Some(b) = b {
                    self.acc_owned(b, db);
                }
            }
            Op::Unfold { x, g: win } => {
                let (x, win) = (*x, *win);
                let n = self.shape(x)[0];
                let per_in = win.channels * win.height * win.width;
                let per_out = win.rows() * win.cols();
                self.acc(x, |d| {
                    for s in 0..n {
                        kernels::col2im(
                            &g[s * per_out..(s + 1) * per_out],
                            win,
                            &mut d[s * per_in..(s + 1) * per_in],
                        );
                    }
                });
            }
            Op::ColumnWeightedSum { cols, w, c, k } => {
                let (cols, w, _c, k) = (*cols, *w, *c, *k);
                let p = self.shape(cols)[3];
                if self.rg(cols) {
                    let wd = self.nodes[w.0].value.data();
                    let len = self.nodes[cols.0].value.len();
                    let d = self.grads[cols.0].get_or_insert_with(|| vec![T::zero(); len]);
                    for (nc, gp) in g.chunks(p).enumerate() {
                        for i in 0..k {
                            let wi = wd[nc * k + i];
                            let dst = &mut d[(nc * k + i) * p..(nc * k + i + 1) * p];
                            dst.iter_mut().zip(gp).for_each(|(d, &gv)| *d = *d + gv * wi);
                        }
                    }
                }
                if self.rg(w) {
                    let cd = self.nodes[cols.0].value.data();
                    let len = self.nodes[w.0].value.len();
                    let d = self.grads[w.0].get_or_insert_with(|| vec![T::zero(); len]);
                    for (nc, gp) in g.chunks(p).enumerate() {
                        for i in 0..k {
                            let src = &cd[(nc * k + i) * p..(nc * k + i + 1) * p];
                            let s: T = src.iter().zip(gp).map(|(&a, &b)| a * b).sum();
                            d[nc * k + i] = d[nc * k + i] + s;
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                let (_, _, h, w) = self.nodes[x.0].value.dims4().expect("4-d");
                let hw = h * w;
                let inv = T::one() / T::of_f64(hw as f64);
                self.acc(x, |d| {
                    for (ch, &gv) in d.chunks_mut(hw).zip(g) {
                        ch.iter_mut().for_each(|v| *v = *v + gv * inv);
                    }
                });
            }
            Op::Relu { x } => {
                let x = *x;
                let xd = self.nodes[x.0].value.data();
                if let Some(d) = slot(&mut self.grads, &self.nodes, x) {
                    for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        if xv > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                let x = *x;
                let yd = self.nodes[i].value.data();
                if let Some(d) = slot(&mut self.grads, &self.nodes, x) {
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(yd) {
                        *d = *d + gv * (T::one() - y * y);
                    }
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let yd = self.nodes[i].value.data();
                if let Some(d) = slot(&mut self.grads, &self.nodes, x) {
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(yd) {
                        *d = *d + gv * y * (T::one() - y);
                    }
                }
            }
            Op::Abs { x } => {
                let x = *x;
                let xd = self.nodes[x.0].value.data();
                if let Some(d) = slot(&mut self.grads, &self.nodes, x) {
                    for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *d = *d + gv * sign(xv);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("4-d");
                let hw = h * w;
                let gd = self.nodes[gamma.0].value.data().to_vec();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxhat = vec![T::zero(); c];
                let mut sum_dxhat_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ci in 0..c {
                        for j in (s * c + ci) * hw..(s * c + ci + 1) * hw {
                            dgamma[ci] = dgamma[ci] + g[j] * xhat[j];
                            dbeta[ci] = dbeta[ci] + g[j];
                            let dxh = g[j] * gd[ci];
                            sum_dxhat[ci] = sum_dxhat[ci] + dxh;
                            sum_dxhat_xhat[ci] = sum_dxhat_xhat[ci] + dxh * xhat[j];
                        }
                    }
                }
                let m = T::of_f64((n * hw) as f64);
                self.acc(x, |d| {
                    for s in 0..n {
                        for ci in 0..c {
                            for j in (s * c + ci) * hw..(s * c + ci + 1) * hw {
                                let dxh = g[j] * gd[ci];
                                d[j] = d[j]
                                    + if train {
                                        inv_std[ci] / m
                                            * (m * dxh - sum_dxhat[ci] - xhat[j] * sum_dxhat_xhat[ci])
                                    } else {
                                        dxh * inv_std[ci]
                                    };
                            }
                        }
                    }
                });
                self.acc_elementwise(gamma, &dgamma, |_, v| v);
                self.acc_elementwise(beta, &dbeta, |_, v| v);
            }
            Op::Resize { x, h, w } => {
                let (x, h, w) = (*x, *h, *w);
                let (n, c, oh, ow) = self.nodes[i].value.dims4().expect("4-d");
                self.acc(x, |d| kernels::bilinear_resize_backward(g, n * c, h, w, oh, ow, d));
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.acc_copy(a, g);
                self.acc_copy(b, g);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.acc_elementwise(a, g, |_, v| v);
                self.acc_elementwise(b, g, |_, v| -v);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let bd = self.nodes[b.0].value.data();
                if let Some(d) = slot(&mut self.grads, &self.nodes, a) {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(bd) {
                        *d = *d + gv * o;
                    }
                }
                let ad = self.nodes[a.0].value.data();
                if let Some(d) = slot(&mut self.grads, &self.nodes, b) {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(ad) {
                        *d = *d + gv * o;
                    }
                }
            }
            Op::ScaleChannels { x, s } => {
                let (x, s) = (*x, *s);
                let (_, _, h, w) = self.nodes[x.0].value.dims4().expect("4-d");
                let hw = h * w;
                let sd = self.nodes[s.0].value.data();
                if let Some(d) = slot(&mut self.grads, &self.nodes, x) {
                    for ((dc, gc), &sv) in d.chunks_mut(hw).zip(g.chunks(hw)).zip(sd) {
                        dc.iter_mut().zip(gc).for_each(|(d, &gv)| *d = *d + gv * sv);
                    }
                }
                let xd = self.nodes[x.0].value.data();
                if let Some(d) = slot(&mut self.grads, &self.nodes, s) {
                    for (k, (gc, xc)) in g.chunks(hw).zip(xd.chunks(hw)).enumerate() {
                        d[k] = d[k] + gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            Op::AddScalar { x } => {
                self.acc_copy(*x, g);
            }
            Op::MulScalar { x, s } => {
                let s = *s;
                self.acc_elementwise(*x, g, |_, v| v * s);
            }
            Op::Concat { parts } => {
                let (n, ctot, h, w) = self.nodes[i].value.dims4().expect("4-d");
                let hw = h * w;
                let mut off = 0;
                for &(v, c) in parts {
                    self.acc(v, |d| {
                        for s in 0..n {
                            let src = &g[(s * ctot + off) * hw..(s * ctot + off + c) * hw];
                            let dst = &mut d[s * c * hw..(s + 1) * c * hw];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                        }
                    });
                    off += c;
                }
            }
            Op::Narrow { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("4-d");
                let hw = h * w;
                self.acc(x, |d| {
                    for s in 0..n {
                        let dst = &mut d[(s * c + start) * hw..(s * c + start + len) * hw];
                        let src = &g[s * len * hw..(s + 1) * len * hw];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                    }
                });
            }
            Op::Reshape { x } => {
                self.acc_elementwise(*x, g, |_, v| v);
            }
            Op::Sum { x } => {
                let g0 = g[0];
                self.acc(*x, |d| d.iter_mut().for_each(|v| *v = *v + g0));
            }
            Op::Mean { x } => {
                let x = *x;
                let scale = g[0] / T::of_f64(self.nodes[x.0].value.len() as f64);
                self.acc(x, |d| d.iter_mut().for_each(|v| *v = *v + scale));
            }
            Op::FreqL1 {
                a,
                b,
                planes,
                h,
                w,
                sign_re,
                sign_im,
            } => {
                let (a, b) = (*a, *b);
                let mut buf: Vec<Complex<T>> = sign_re
                    .iter()
                    .zip(sign_im)
                    .map(|(&re, &im)| Complex::new(re, im))
                    .collect();
                kernels::fft2_planes(&mut buf, *planes, *h, *w, true);
                let scale = g[0] / T::of_f64(buf.len() as f64);
                let grad: Vec<T> = buf.iter().map(|z| z.re * scale).collect();
                self.acc_elementwise(a, &grad, |_, v| v);
                self.acc_elementwise(b, &grad, |_, v| -v);
            }
            Op::BceLogits { z, target } => {
                let z = *z;
                let zd = self.nodes[z.0].value.data().to_vec();
                let scale = g[0] / T::of_f64(target.len() as f64);
                self.acc(z, |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + (sigmoid(zd[j]) - target[j]) * scale;
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// One term of the logit-space binary cross-entropy.
pub(crate) fn bce_term<T: Real>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln()
}
