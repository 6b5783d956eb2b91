//! Local dynamic optimization: per-image depthwise kernels generated from
//! global context, applied through an unfold, and gated against the input.
//!
//! ```text
//! s       = GAP(x)                               [N, C, 1, 1]
//! s'      = relu(bn(conv1x1(s)))                 [N, C/r, 1, 1]
//! w       = conv1x1(s')                          [N, C*k*k, 1, 1]
//! W_dyn   = tanh(w)  reshaped to                 [N, C, k*k]
//! X       = unfold(x, k)                         [N, C, k*k, H*W]
//! O[c,p]  = sum_i W_dyn[c,i] * X[c,i,p]          [N, C, H, W]
//! [a, b]  = sigmoid(mlp(s))  split in halves     [N, C] each
//! F_out   = a * O + b * x
//! ```

use serde::{Deserialize, Serialize};

use crate::engine::{Real, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv};
use crate::params::{Graph, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdoConfig {
    pub channels: usize,
    pub kernel_size: usize,
    pub reduction: usize,
}

impl LdoConfig {
    pub fn new(channels: usize) -> Self {
        LdoConfig {
            channels,
            kernel_size: 3,
            reduction: 4,
        }
    }

    pub fn with_kernel(mut self, k: usize) -> Self {
        self.kernel_size = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if ![3, 5, 7].contains(&self.kernel_size) {
            return Err(Error::Param(format!(
                "LDO kernel size must be 3, 5 or 7, got {}",
                self.kernel_size
            )));
        }
        if self.reduction == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::Param(format!(
                "LDO channels {} not divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn taps(&self) -> usize {
        self.kernel_size * self.kernel_size
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LdoParams {
    pub cfg: LdoConfig,
    pub wg_conv1: Conv,
    pub wg_bn: BatchNorm,
    pub wg_conv2: Conv,
    pub mlp1: Conv,
    pub mlp2: Conv,
}

/// Every named quantity of one LDO evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LdoIntermediates {
    pub s: Var,
    pub s_prime: Var,
    pub w: Var,
    pub w_dyn: Var,
    pub x_unfold: Var,
    pub o: Var,
    pub alpha: Var,
    pub beta: Var,
    pub f_out: Var,
}

impl LdoParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: LdoConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, h) = (cfg.channels, cfg.hidden());
        Ok(LdoParams {
            cfg,
            wg_conv1: Conv::new(store, &format!("{name}.wg.conv1"), c, h, 1, 1),
            wg_bn: BatchNorm::new(store, &format!("{name}.wg.bn"), h),
            wg_conv2: Conv::new(store, &format!("{name}.wg.conv2"), h, c * cfg.taps(), 1, 1),
            mlp1: Conv::new(store, &format!("{name}.mlp.fc1"), c, h, 1, 1),
            mlp2: Conv::new(store, &format!("{name}.mlp.fc2"), h, 2 * c, 1, 1),
        })
    }

    /// Number of scalars owned by this module (BN running statistics excluded).
    pub fn param_count(&self) -> usize {
        let (c, h, t) = (self.cfg.channels, self.cfg.hidden(), self.cfg.taps());
        (c * h + h) + 2 * h + (h * c * t + c * t) + (c * h + h) + (h * 2 * c + 2 * c)
    }

    fn check_input<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Result<()> {
        let (_, c, _, _) = g.tape.value(x).dims4()?;
        if c != self.cfg.channels {
            return Err(Error::Shape(format!(
                "LDO configured for {} channels, input has {c}",
                self.cfg.channels
            )));
        }
        Ok(())
    }

    /// Global pooling followed by the weight-generation network. Returns
    /// `(s, s', w, W_dyn)` with `W_dyn` shaped `[N, C, k*k]`.
    pub fn generate_kernels<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var, Var, Var)> {
        self.check_input(g, x)?;
        let n = g.tape.shape(x)[0];
        let s = g.tape.global_avg_pool(x)?;
        let h = self.wg_conv1.forward(g, s)?;
        let h = self.wg_bn.forward(g, h)?;
        let s_prime = g.tape.relu(h);
        let w = self.wg_conv2.forward(g, s_prime)?;
        let w_dyn = g.tape.tanh(w);
        let w_dyn = g.tape.reshape(w_dyn, &[n, self.cfg.channels, self.cfg.taps()])?;
        Ok((s, s_prime, w, w_dyn))
    }

    /// Gates from the fusion perceptron on pooled features `s`.
    pub fn gates<T: Real>(&self, g: &mut Graph<'_, T>, s: Var) -> Result<(Var, Var)> {
        let c = self.cfg.channels;
        let h = self.mlp1.forward(g, s)?;
        let h = g.tape.relu(h);
        let logits = self.mlp2.forward(g, h)?;
        let gates = g.tape.sigmoid(logits);
        let alpha = g.tape.narrow_channels(gates, 0, c)?;
        let beta = g.tape.narrow_channels(gates, c, c)?;
        Ok((alpha, beta))
    }

    pub fn forward_traced<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<LdoIntermediates> {
        let (s, s_prime, w, w_dyn) = self.generate_kernels(g, x)?;
        let (x_unfold, o) = dynamic_filter_traced(g, x, w_dyn, self.cfg.kernel_size)?;
        let (alpha, beta) = self.gates(g, s)?;
        let f_out = fuse(g, x, o, alpha, beta)?;
        Ok(LdoIntermediates {
            s,
            s_prime,
            w,
            w_dyn,
            x_unfold,
            o,
            alpha,
            beta,
            f_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, x)?.f_out)
    }
}

/// Applies per-image, per-channel `k x k` kernels `w_dyn` (`[N, C, k*k]`) to
/// `x` through an unfold. Zero padding keeps the spatial size.
pub fn dynamic_filter<T: Real>(g: &mut Graph<'_, T>, x: Var, w_dyn: Var, k: usize) -> Result<Var> {
    Ok(dynamic_filter_traced(g, x, w_dyn, k)?.1)
}

fn dynamic_filter_traced<T: Real>(g: &mut Graph<'_, T>, x: Var, w_dyn: Var, k: usize) -> Result<(Var, Var)> {
    let (n, c, h, w) = g.tape.value(x).dims4()?;
    let cols = g.tape.unfold(x, k)?;
    let o = g.tape.column_weighted_sum(cols, w_dyn)?;
    let o = g.tape.reshape(o, &[n, c, h, w])?;
    Ok((cols, o))
}

/// `alpha * o + beta * x` with per-channel gates shaped `[N, C, 1, 1]`.
pub fn fuse<T: Real>(g: &mut Graph<'_, T>, x: Var, o: Var, alpha: Var, beta: Var) -> Result<Var> {
    let a = g.tape.scale_channels(o, alpha)?;
    let b = g.tape.scale_channels(x, beta)?;
    g.tape.add(a, b)
}
