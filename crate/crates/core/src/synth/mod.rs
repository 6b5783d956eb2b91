//! Synthetic single and mixed degradations.

pub mod dataset;
pub mod degrade;
pub mod guided;
pub mod maps;
pub mod scenes;

pub use dataset::{synth_dataset, Manifest, ManifestEntry, Split, SynthConfig};
pub use degrade::{apply_mixed, DegradationSpec, MaskConfig, SceneMaps};
