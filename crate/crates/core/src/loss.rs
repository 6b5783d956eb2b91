//! Dual-domain L1 loss and its deep-supervision aggregate.

use serde::{Deserialize, Serialize};

use crate::engine::{Real, Var};
use crate::error::{Error, Result};
use crate::net::{SupervisedOutputs, STAGES};
use crate::params::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_freq: f64,
    /// Finest scale first.
    pub scales: [f64; STAGES],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_freq: 0.1,
            scales: [1.0; STAGES],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_freq) || !self.scales.iter().all(|&s| ok(s)) {
            return Err(Error::Param("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `mean|p - g| + lambda * mean(|Re dF| + |Im dF|)`
pub fn dual_domain_l1<T: Real>(g: &mut Graph<'_, T>, pred: Var, gt: Var, lambda_freq: f64) -> Result<Var> {
    let spatial = g.tape.l1(pred, gt)?;
    if lambda_freq == 0.0 {
        return Ok(spatial);
    }
    let freq = g.tape.freq_l1(pred, gt)?;
    let freq = g.tape.mul_scalar(freq, T::of_f64(lambda_freq));
    g.tape.add(spatial, freq)
}

/// Weighted sum of the per-scale losses. `gt` is full resolution; coarser
/// targets are bilinear downsamples of it.
pub fn total_loss<T: Real>(g: &mut Graph<'_, T>, outs: &SupervisedOutputs, gt: Var, w: &LossWeights) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (s, &pred) in outs.predictions.iter().enumerate() {
        let (_, _, h, wd) = g.tape.value(pred).dims4()?;
        let target = if s == 0 { gt } else { g.tape.resize(gt, h, wd)? };
        let l = dual_domain_l1(g, pred, target, w.lambda_freq)?;
        let l = g.tape.mul_scalar(l, T::of_f64(w.scales[s]));
        total = Some(match total {
            Some(t) => g.tape.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Usage("no predictions to supervise".into()))
}
