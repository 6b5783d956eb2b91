//! Parameterized layers shared by the classifier and the restoration network.

use crate::engine::{Real, Tensor, Var};
use crate::error::Result;
use crate::params::{BufferId, Graph, Init, Mode, ParamId, ParamStore, RunningUpdate};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// `k x k` convolution with "same" padding at stride 1.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Self::with_init(store, name, c_in, c_out, k, stride, Init::KaimingUniform { fan_in: c_in * k * k })
    }

    pub fn with_init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let weight = store.register(&format!("{name}.weight"), &[c_out, c_in, k, k], init);
        let bias = Some(store.register(&format!("{name}.bias"), &[c_out], Init::Zeros));
        Conv {
            weight,
            bias,
            stride,
            pad: (k - 1) / 2,
        }
    }

    /// Bias-free variant, linear in its input.
    pub fn linear<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let init = Init::KaimingUniform { fan_in: c_in * k * k };
        Conv {
            weight: store.register(&format!("{name}.weight"), &[c_out, c_in, k, k], init),
            bias: None,
            stride: 1,
            pad: (k - 1) / 2,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.p(self.weight);
        let b = self.bias.map(|b| g.p(b));
        g.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// 2x upsampling by a `2 x 2`, stride-2 transposed convolution.
#[derive(Debug, Clone, Copy)]
pub struct Upsample {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsample {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize) -> Self {
        Upsample {
            weight: store.register(
                &format!("{name}.weight"),
                &[c_in, c_out, 2, 2],
                Init::KaimingUniform { fan_in: c_in },
            ),
            bias: store.register(&format!("{name}.bias"), &[c_out], Init::Zeros),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.p(self.weight);
        let b = g.p(self.bias);
        g.tape.conv_transpose2d(x, w, Some(b), 2, 0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: store.register(&format!("{name}.weight"), &[c], Init::Ones),
            beta: store.register(&format!("{name}.bias"), &[c], Init::Zeros),
            running_mean: store.register_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c])),
            running_var: store.register_buffer(&format!("{name}.running_var"), Tensor::full(&[c], T::one())),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.p(self.gamma);
        let beta = g.p(self.beta);
        match g.mode {
            Mode::Train => {
                let (y, mean, var) = g.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                g.updates.push(RunningUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: mean,
                    batch_var: var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = g.store();
                let rm = store.buffer(self.running_mean).data();
                let rv = store.buffer(self.running_var).data();
                g.tape.batch_norm_eval(x, gamma, beta, rm, rv, BN_EPS)
            }
        }
    }
}
