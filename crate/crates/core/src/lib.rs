//! Multiple-in-one image restoration.
//!
//! A small reverse-mode autodiff engine, a restoration network built around
//! input-adaptive depthwise filtering and classifier-conditioned decoding, a
//! synthetic single/mixed degradation pipeline, and the training and
//! evaluation harness that ties them together.

pub mod category;
pub mod cfe;
pub mod classifier;
pub mod config;
pub mod engine;
pub mod gradcheck;
pub mod error;
pub mod imageio;
pub mod layers;
pub mod ldo;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod params;
pub mod synth;
pub mod train;

pub use category::Category;
pub use classifier::{Degradation, LabelVector};
pub use engine::{Real, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use imageio::Image;
pub use net::{Net, NetConfig};
pub use params::{Graph, Mode, ParamStore};
