//! The restoration network: stem, three encoder stages, three decoder stages
//! with condition injection, and one prediction head per decoder scale.

use serde::{Deserialize, Serialize};

use crate::cfe::{inject, CfeStage};
use crate::classifier::{Classifier, FEATURE_CHANNELS};
use crate::engine::{Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv, Upsample};
use crate::ldo::{LdoConfig, LdoParams};
use crate::params::{Graph, Init, Mode, ParamStore};

pub const STAGES: usize = 3;
pub const CLASSIFIER_PREFIX: &str = "classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub base_channels: usize,
    pub res_blocks: usize,
    pub ldo_kernel_size: usize,
    pub ldo_reduction: usize,
    pub use_ldo: bool,
    pub use_cfe: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 16,
            res_blocks: 3,
            ldo_kernel_size: 3,
            ldo_reduction: 4,
            use_ldo: true,
            use_cfe: true,
        }
    }
}

impl NetConfig {
    /// Full-size configuration: 32 base channels, seven residual blocks.
    pub fn full() -> Self {
        NetConfig {
            base_channels: 32,
            res_blocks: 7,
            ..Default::default()
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    fn ldo(&self, stage: usize) -> LdoConfig {
        LdoConfig {
            channels: self.stage_channels(stage),
            kernel_size: self.ldo_kernel_size,
            reduction: self.ldo_reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Param("base_channels must be positive".into()));
        }
        for s in 0..STAGES {
            self.ldo(s).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        ResBlock {
            conv1: Conv::new(store, &format!("{name}.conv1"), c, c, 3, 1),
            conv2: Conv::new(store, &format!("{name}.conv2"), c, c, 3, 1),
        }
    }

    /// `x + conv(relu(conv(x)))`
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.tape.relu(h);
        let h = self.conv2.forward(g, h)?;
        g.tape.add(x, h)
    }
}

/// `x + LDO(conv(x))`; with the LDO ablated, `x + conv(x)`.
#[derive(Debug, Clone, Copy)]
pub struct LdoUnit {
    pub conv: Conv,
    pub ldo: Option<LdoParams>,
}

impl LdoUnit {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let h = match &self.ldo {
            Some(ldo) => ldo.forward(g, h)?,
            None => h,
        };
        g.tape.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub res: Vec<ResBlock>,
    pub unit: LdoUnit,
}

impl Block {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &NetConfig, stage: usize) -> Result<Self> {
        let c = cfg.stage_channels(stage);
        let res = (0..cfg.res_blocks)
            .map(|j| ResBlock::new(store, &format!("{name}.res{j}"), c))
            .collect();
        let conv = Conv::new(store, &format!("{name}.unit.conv"), c, c, 3, 1);
        let ldo = if cfg.use_ldo {
            Some(LdoParams::new(store, &format!("{name}.unit.ldo"), cfg.ldo(stage))?)
        } else {
            None
        };
        Ok(Block {
            res,
            unit: LdoUnit { conv, ldo },
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        for r in &self.res {
            x = r.forward(g, x)?;
        }
        self.unit.forward(g, x)
    }
}

/// Stem output and the three encoder features, finest first.
#[derive(Debug, Clone, Copy)]
pub struct EncodedPyramid {
    pub stem: Var,
    pub levels: [Var; STAGES],
}

/// Predictions at full, half and quarter resolution (finest first).
#[derive(Debug, Clone, Copy)]
pub struct SupervisedOutputs {
    pub predictions: [Var; STAGES],
}

#[derive(Debug, Clone)]
pub struct Net {
    pub cfg: NetConfig,
    pub stem: Conv,
    pub encoder: Vec<Block>,
    pub down: Vec<Conv>,
    pub merge: Vec<Conv>,
    pub decoder: Vec<Block>,
    pub up: Vec<Upsample>,
    pub heads: Vec<Conv>,
    pub cfe: Option<Vec<CfeStage>>,
    pub classifier: Option<Classifier>,
}

impl Net {
    /// Registers all parameters in `store`. When condition embedding is on,
    /// the classifier is registered under `classifier.` and frozen.
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = |s| cfg.stage_channels(s);
        let stem = Conv::new(store, "stem", 3, ch(0), 3, 1);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for s in 0..STAGES {
            encoder.push(Block::new(store, &format!("enc{s}"), &cfg, s)?);
            if s + 1 < STAGES {
                down.push(Conv::new(store, &format!("down{s}"), ch(s), ch(s + 1), 3, 2));
            }
        }
        let mut merge = Vec::new();
        let mut decoder = Vec::new();
        let mut up = Vec::new();
        let mut heads = Vec::new();
        for s in 0..STAGES {
            let merge_in = if s + 1 == STAGES { ch(s) } else { 2 * ch(s) };
            merge.push(Conv::new(store, &format!("dec{s}.merge"), merge_in, ch(s), 1, 1));
            decoder.push(Block::new(store, &format!("dec{s}"), &cfg, s)?);
            heads.push(Conv::with_init(store, &format!("head{s}"), ch(s), 3, 3, 1, Init::Zeros));
            if s > 0 {
                up.push(Upsample::new(store, &format!("up{s}"), ch(s), ch(s - 1)));
            }
        }
        let (cfe, classifier) = if cfg.use_cfe {
            let stages = (0..STAGES)
                .map(|s| CfeStage::new(store, &format!("cfe{s}"), s, FEATURE_CHANNELS, ch(s)))
                .collect();
            let cls = Classifier::new(store, CLASSIFIER_PREFIX);
            store.set_trainable(&format!("{CLASSIFIER_PREFIX}."), false);
            (Some(stages), Some(cls))
        } else {
            (None, None)
        };
        Ok(Net {
            cfg,
            stem,
            encoder,
            down,
            merge,
            decoder,
            up,
            heads,
            cfe,
            classifier,
        })
    }

    fn check_input<T: Real>(&self, g: &Graph<'_, T>, image: Var) -> Result<(usize, usize)> {
        let (_, c, h, w) = g.tape.value(image).dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected an RGB input, got {c} channels")));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Validation(format!(
                "input {h}x{w} must have both sides divisible by 4"
            )));
        }
        Ok((h, w))
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<EncodedPyramid> {
        self.check_input(g, image)?;
        let stem = self.stem.forward(g, image)?;
        let mut x = stem;
        let mut levels = [stem; STAGES];
        for s in 0..STAGES {
            x = self.encoder[s].forward(g, x)?;
            levels[s] = x;
            if s + 1 < STAGES {
                x = self.down[s].forward(g, x)?;
            }
        }
        Ok(EncodedPyramid { stem, levels })
    }

    /// Condition embeddings for each stage (finest first) from classifier
    /// features.
    pub fn embeddings<T: Real>(&self, g: &mut Graph<'_, T>, features: Var, pyr: &EncodedPyramid) -> Result<[Var; STAGES]> {
        let stages = self
            .cfe
            .as_ref()
            .ok_or_else(|| Error::Usage("condition embedding is disabled in this network".into()))?;
        let mut out = [features; STAGES];
        for (s, st) in stages.iter().enumerate() {
            let (_, _, h, w) = g.tape.value(pyr.levels[s]).dims4()?;
            out[s] = st.embed(g, features, h, w)?;
        }
        Ok(out)
    }

    /// Deepest-to-finest decoding. Each head predicts a correction that is
    /// added to the degraded input resized to that head's scale.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        pyr: &EncodedPyramid,
        embeddings: Option<[Var; STAGES]>,
        image: Var,
    ) -> Result<SupervisedOutputs> {
        let mut predictions = [image; STAGES];
        let mut prev: Option<Var> = None;
        for s in (0..STAGES).rev() {
            let emb = embeddings.map(|e| e[s]);
            let x = inject(g, pyr.levels[s], prev, emb, &self.merge[s])?;
            let d = self.decoder[s].forward(g, x)?;
            let correction = self.heads[s].forward(g, d)?;
            let (_, _, h, w) = g.tape.value(correction).dims4()?;
            let base = if s == 0 { image } else { g.tape.resize(image, h, w)? };
            predictions[s] = g.tape.add(correction, base)?;
            if s > 0 {
                prev = Some(self.up[s - 1].forward(g, d)?);
            }
        }
        Ok(SupervisedOutputs { predictions })
    }

    /// Full pipeline: classify (when conditioned), embed, encode, decode.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<SupervisedOutputs> {
        let pyr = self.encode(g, image)?;
        let emb = match &self.classifier {
            Some(cls) => {
                let out = cls.classify(g, image)?;
                Some(self.embeddings(g, out.features, &pyr)?)
            }
            None => None,
        };
        self.decode(g, &pyr, emb, image)
    }

    /// Inference on one or more images in evaluation mode; returns the
    /// finest prediction (unclipped).
    pub fn restore<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(store, Mode::Eval);
        let x = g.tape.constant(image.clone());
        let out = self.forward(&mut g, x)?;
        Ok(g.tape.value(out.predictions[0]).clone())
    }
}
