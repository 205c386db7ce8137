//! Synthetic stand-in corpus: 14 pseudo-findings over Gaussian noise.
//!
//! Two classes carry an oriented sinusoidal grating (Infiltration vertical
//! stripes, Effusion horizontal stripes). The rest only shift the mean
//! intensity by a small per-class offset.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dataset::{decode_labels, Labels, IMAGE_COLUMN, LABEL_COLUMN, NUM_CLASSES, PATIENT_COLUMN};
use crate::derive_seed;
use crate::pipeline::{save_png8, PipelineError};
use crate::raster::Image;

/// Class carrying stripes that vary along the columns.
pub const VERTICAL_GRATING_CLASS: usize = 0;
/// Class carrying stripes that vary along the rows.
pub const HORIZONTAL_GRATING_CLASS: usize = 1;
pub const GRATING_CLASSES: [usize; 2] = [VERTICAL_GRATING_CLASS, HORIZONTAL_GRATING_CLASS];

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MIN_IMAGES: usize = 30;

const SYNTH_STREAM: u64 = 7;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least {MIN_IMAGES} images, got {0}")]
    TooFew(usize),
    #[error("invalid synthetic setting: {0}")]
    InvalidSetting(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub side: usize,
    /// Grating amplitude in units of the noise standard deviation.
    pub amplitude: f64,
    /// Grating period in pixels.
    pub period: f64,
    /// Probability that an image carries a second finding.
    pub co_occurrence: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            seed: 0,
            side: 64,
            amplitude: 0.3,
            period: 4.0,
            co_occurrence: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_IMAGES {
            return Err(SynthError::TooFew(self.n));
        }
        if self.side < 2 || self.side % 2 != 0 {
            return Err(SynthError::InvalidSetting(format!("side {} must be even and >= 2", self.side)));
        }
        if !(self.period >= 2.0 && self.period.is_finite()) {
            return Err(SynthError::InvalidSetting(format!("period {} must be >= 2", self.period)));
        }
        if !(0.0..=1.0).contains(&self.co_occurrence) {
            return Err(SynthError::InvalidSetting("co_occurrence outside [0, 1]".into()));
        }
        if !self.amplitude.is_finite() {
            return Err(SynthError::InvalidSetting("amplitude must be finite".into()));
        }
        Ok(())
    }
}

/// Mean shift (in noise units) for the non-grating classes, spread evenly
/// over `[-0.15, 0.15]`.
pub fn class_offset(class: usize) -> f64 {
    if GRATING_CLASSES.contains(&class) {
        return 0.0;
    }
    let rank = (class - GRATING_CLASSES.len()) as f64;
    let last = (NUM_CLASSES - GRATING_CLASSES.len() - 1) as f64;
    0.15 * (2.0 * rank / last - 1.0)
}

/// One generated scan.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image_id: String,
    pub patient_id: String,
    pub labels: Labels,
    /// Pixel intensities in `[0, 1]`, already quantized to 8 bits.
    pub image: Image,
}

/// Generates sample `index`; each sample has its own derived seed, so a
/// prefix of a larger corpus matches a smaller one.
pub fn generate_one(config: &SynthConfig, index: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SYNTH_STREAM, index as u64));
    let primary = rng.random_range(0..NUM_CLASSES);
    let mut labels = Labels::from_indices([primary]);
    if rng.random_bool(config.co_occurrence) {
        let other = (primary + rng.random_range(1..NUM_CLASSES)) % NUM_CLASSES;
        labels.insert(other);
    }
    let phase_v = rng.random_range(0.0..std::f64::consts::TAU);
    let phase_h = rng.random_range(0.0..std::f64::consts::TAU);
    let offset: f64 = labels.indices().map(class_offset).sum();
    let k = std::f64::consts::TAU / config.period;
    let vertical = labels.contains(VERTICAL_GRATING_CLASS);
    let horizontal = labels.contains(HORIZONTAL_GRATING_CLASS);

    let side = config.side;
    let mut data = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let noise: f64 = rng.sample(StandardNormal);
            let mut signal = noise + offset;
            if vertical {
                signal += config.amplitude * (k * c as f64 + phase_v).sin();
            }
            if horizontal {
                signal += config.amplitude * (k * r as f64 + phase_h).sin();
            }
            let pixel = (128.0 + 32.0 * signal).round().clamp(0.0, 255.0);
            data.push(pixel / 255.0);
        }
    }
    SynthSample {
        image_id: format!("synth_{index:05}.png"),
        patient_id: format!("P{:05}", index / 2),
        labels,
        image: Image::new(side, side, data),
    }
}

/// Writes `n` PNG scans and `manifest.csv` into `out_dir`. Returns every path
/// written, manifest last.
pub fn generate_corpus(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|source| SynthError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut manifest = format!("{IMAGE_COLUMN},{LABEL_COLUMN},{PATIENT_COLUMN}\n");
    let mut written = Vec::with_capacity(config.n + 1);
    for i in 0..config.n {
        let sample = generate_one(config, i);
        let path = out_dir.join(&sample.image_id);
        save_png8(&sample.image, &path)?;
        written.push(path);
        let _ = writeln!(
            manifest,
            "{},{},{}",
            sample.image_id,
            decode_labels(sample.labels),
            sample.patient_id
        );
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    written.push(path);
    Ok(written)
}
