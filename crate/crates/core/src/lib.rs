//! Wavelet-preprocessed multi-label classification of grayscale scans.
//!
//! The crate covers the full workflow: orthonormal wavelet decomposition,
//! image preprocessing, manifest handling and splitting, a small
//! convolutional network trained with momentum SGD, and per-class ROC
//! evaluation with a raw-versus-wavelet comparison.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod raster;
pub mod synth;
pub mod wavelet;

pub use dataset::{Labels, ManifestEntry, SplitManifest, CLASS_NAMES, NUM_CLASSES};
pub use metrics::{ComparisonReport, EvalRun, RocCurve, RocPoint};
pub use model::{Hyperparams, Model, Shape};
pub use pipeline::{InputMode, PipelineConfig};
pub use raster::Image;
pub use wavelet::{Pyramid, SubbandSet, WaveletFilter};

/// Mixes `base`, a stream tag and an index into an independent 64-bit seed
/// (splitmix64 finalizer applied twice).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(base ^ stream.rotate_left(32)) ^ index)
}
