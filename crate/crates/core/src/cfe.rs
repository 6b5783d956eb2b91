//! Conditional feature embedding: classifier features projected to a decoder
//! stage's width, resized to its grid, and added after the skip merge.

use crate::engine::{Real, Var};
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::{Graph, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct CfeStage {
    pub proj: Conv,
    pub stage: usize,
}

impl CfeStage {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, stage: usize, feature_channels: usize, stage_channels: usize) -> Self {
        CfeStage {
            // no bias: zero features must embed to exactly zero
            proj: Conv::linear(store, &format!("{name}.proj"), feature_channels, stage_channels, 1),
            stage,
        }
    }

    /// `resize(conv1x1(features))` onto an `h x w` grid.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, features: Var, h: usize, w: usize) -> Result<Var> {
        let f = self.proj.forward(g, features)?;
        g.tape.resize(f, h, w)
    }
}

/// Merges encoder skip features with the previous decoder output (when there
/// is one) through a `1 x 1` projection, then adds the condition embedding.
pub fn inject<T: Real>(
    g: &mut Graph<'_, T>,
    enc: Var,
    prev_dec: Option<Var>,
    embedding: Option<Var>,
    merge: &Conv,
) -> Result<Var> {
    let merged_in = match prev_dec {
        Some(d) => {
            let (_, _, he, we) = g.tape.value(enc).dims4()?;
            let (_, _, hd, wd) = g.tape.value(d).dims4()?;
            if (he, we) != (hd, wd) {
                return Err(Error::Shape(format!(
                    "skip features {he}x{we} and decoder features {hd}x{wd} are not aligned"
                )));
            }
            g.tape.concat_channels(&[enc, d])?
        }
        None => enc,
    };
    let f_prime = merge.forward(g, merged_in)?;
    match embedding {
        Some(e) => g.tape.add(f_prime, e),
        None => Ok(f_prime),
    }
}
