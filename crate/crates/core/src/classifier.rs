//! Lightweight multi-label degradation classifier.
//!
//! Four conv+ReLU stages (widths 16/32/64/64, strides 2/2/2/1) feed a global
//! pool and a linear head with one independent sigmoid output per base
//! degradation. The last stage activation, at `1/8` of the input
//! resolution, is exposed as the conditioning feature map.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::{Graph, Init, ParamStore};

/// Base degradations in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Degradation {
    Rain,
    Snow,
    Haze,
    Noise,
}

impl Degradation {
    pub const ALL: [Degradation; 4] = [
        Degradation::Rain,
        Degradation::Snow,
        Degradation::Haze,
        Degradation::Noise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Degradation::Rain => "rain",
            Degradation::Snow => "snow",
            Degradation::Haze => "haze",
            Degradation::Noise => "noise",
        }
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Degradation::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown degradation {s:?}")))
    }
}

pub const NUM_LABELS: usize = 4;

/// Multi-hot vector over `[rain, snow, haze, noise]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(pub [u8; NUM_LABELS]);

impl LabelVector {
    pub fn from_set(set: &BTreeSet<Degradation>) -> Self {
        let mut v = [0u8; NUM_LABELS];
        for d in set {
            v[d.index()] = 1;
        }
        LabelVector(v)
    }

    pub fn to_set(self) -> BTreeSet<Degradation> {
        Degradation::ALL
            .into_iter()
            .filter(|d| self.0[d.index()] == 1)
            .collect()
    }

    pub fn is_empty(self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }

    pub fn as_floats<T: Real>(self) -> [T; NUM_LABELS] {
        self.0.map(|v| T::of_f64(v as f64))
    }
}

/// Multi-hot encoding of degradation names in the fixed class order.
pub fn encode_labels<S: AsRef<str>>(names: &[S]) -> Result<LabelVector> {
    let set = names
        .iter()
        .map(|n| n.as_ref().parse::<Degradation>())
        .collect::<Result<BTreeSet<_>>>()?;
    Ok(LabelVector::from_set(&set))
}

pub const WIDTHS: [usize; 4] = [16, 32, 64, 64];
pub const STRIDES: [usize; 4] = [1, 2, 2, 2];
pub const FEATURE_CHANNELS: usize = 64;

#[derive(Debug, Clone)]
pub struct Classifier {
    pub stages: Vec<Conv>,
    pub head: Conv,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierOutput {
    /// `[N, 4]`
    pub logits: Var,
    /// `[N, 64, H/8, W/8]`
    pub features: Var,
}

impl Classifier {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str) -> Self {
        let mut c_in = 3;
        let stages = WIDTHS
            .iter()
            .zip(STRIDES)
            .enumerate()
            .map(|(i, (&w, s))| {
                let init = Init::HeUniform { fan_in: 9 * c_in };
                let conv = Conv::with_init(store, &format!("{prefix}.stage{i}"), c_in, w, 3, s, init);
                c_in = w;
                conv
            })
            .collect();
        let head = Conv::new(store, &format!("{prefix}.head"), FEATURE_CHANNELS, NUM_LABELS, 1, 1);
        Classifier { stages, head }
    }

    pub fn classify<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<ClassifierOutput> {
        let (n, c, _, _) = g.tape.value(image).dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("classifier expects RGB input, got {c} channels")));
        }
        // map [0, 1] inputs to [-1, 1]
        let x = g.tape.add_scalar(image, T::of_f64(-0.5));
        let mut x = g.tape.mul_scalar(x, T::of_f64(2.0));
        for st in &self.stages {
            x = st.forward(g, x)?;
            x = g.tape.relu(x);
        }
        let features = x;
        let pooled = g.tape.global_avg_pool(features)?;
        let logits = self.head.forward(g, pooled)?;
        let logits = g.tape.reshape(logits, &[n, NUM_LABELS])?;
        Ok(ClassifierOutput { logits, features })
    }
}

/// Mean logit-space binary cross-entropy over every label of every sample.
pub fn bce_multilabel<T: Real>(g: &mut Graph<'_, T>, logits: Var, targets: &[LabelVector]) -> Result<Var> {
    let flat: Vec<T> = targets.iter().flat_map(|t| t.as_floats::<T>()).collect();
    g.tape.bce_with_logits(logits, &flat)
}

/// Scalar BCE for one logit vector, outside of any graph.
pub fn bce_value(logits: &[f64], target: LabelVector) -> f64 {
    logits
        .iter()
        .zip(target.0)
        .map(|(&z, y)| crate::engine::bce_term(z, y as f64))
        .sum::<f64>()
        / logits.len() as f64
}

/// Predicted label set at the 0.5 probability threshold.
pub fn threshold(logits: &Tensor<f32>, sample: usize) -> LabelVector {
    let z = &logits.data()[sample * NUM_LABELS..(sample + 1) * NUM_LABELS];
    let mut v = [0u8; NUM_LABELS];
    for (o, &l) in v.iter_mut().zip(z) {
        *o = u8::from(l > 0.0);
    }
    LabelVector(v)
}
