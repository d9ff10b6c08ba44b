//! File formats and the synthetic data generator.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod pnm;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use dataset::{Dataset, DatasetManifest, SampleRecord, VOID_LABEL};
pub use synth::{generate_synthetic, write_synthetic, SynthConfig};
