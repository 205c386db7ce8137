//! Flat key-value run configuration (TOML).
//!
//! Every key is optional; a missing key takes its default. Relative paths are
//! resolved against the directory of the config file, or the working
//! directory when no file is given.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SplitMode;
use crate::model::{Hyperparams, LrDecay};
use crate::pipeline::{AugmentParams, InputMode, PipelineConfig};
use crate::synth::SynthConfig;
use crate::wavelet::{WaveletError, WaveletFilter};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config value: {0}")]
    Invalid(String),
    #[error(transparent)]
    Filter(#[from] WaveletError),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: InputMode,
    pub filter: String,
    pub depth: usize,
    pub target_width: usize,
    pub target_height: usize,

    pub augment: bool,
    pub rotation_deg: f64,
    pub translate_frac: f64,
    pub scale_frac: f64,

    pub ratio_train: f64,
    pub ratio_validation: f64,
    pub ratio_test: f64,
    pub split_mode: SplitMode,
    /// Master seed for the split, initialization, shuffling, augmentation and
    /// the synthetic corpus.
    pub seed: u64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Step decay period in epochs; 0 keeps the rate constant.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub freeze_layers: usize,

    /// Labels CSV.
    pub manifest: PathBuf,
    /// Root that manifest image ids are relative to.
    pub image_dir: PathBuf,
    pub split_dir: PathBuf,
    /// Output directory for checkpoints and evaluations; empty means
    /// `run/<mode>`.
    pub out_dir: PathBuf,

    pub synth_n: usize,
    pub synth_period: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let augment = AugmentParams::default();
        let hyper = Hyperparams::default();
        let synth = SynthConfig::default();
        Self {
            mode: InputMode::Wavelet,
            filter: "haar".into(),
            depth: 1,
            target_width: 64,
            target_height: 64,
            augment: true,
            rotation_deg: augment.rotation_deg,
            translate_frac: augment.translate_frac,
            scale_frac: augment.scale_frac,
            ratio_train: 0.70,
            ratio_validation: 0.15,
            ratio_test: 0.15,
            split_mode: SplitMode::Image,
            seed: 0,
            epochs: hyper.epochs,
            batch_size: hyper.batch_size,
            learning_rate: hyper.learning_rate,
            momentum: hyper.momentum,
            lr_decay_every: 0,
            lr_decay_factor: 1.0,
            freeze_layers: 0,
            manifest: PathBuf::from("data/manifest.csv"),
            image_dir: PathBuf::from("data"),
            split_dir: PathBuf::from("data/splits"),
            out_dir: PathBuf::new(),
            synth_n: synth.n,
            synth_period: synth.period,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.display().to_string(),
            source,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config = Self::from_toml_str(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        Ok(config.resolved(base))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml_string()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Joins relative paths onto `base` and fills in the default output
    /// directory.
    pub fn resolved(mut self, base: &Path) -> Self {
        if self.out_dir.as_os_str().is_empty() {
            self.out_dir = Path::new("run").join(self.mode.as_str());
        }
        for p in [&mut self.manifest, &mut self.image_dir, &mut self.split_dir, &mut self.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    pub fn wavelet_filter(&self) -> Result<WaveletFilter> {
        Ok(WaveletFilter::by_name(&self.filter)?)
    }

    pub fn augment_params(&self) -> Option<AugmentParams> {
        self.augment.then(|| AugmentParams {
            rotation_deg: self.rotation_deg,
            translate_frac: self.translate_frac,
            scale_frac: self.scale_frac,
            seed: self.seed,
        })
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        if self.depth == 0 {
            return Err(ConfigError::Invalid("depth must be at least 1".into()));
        }
        if self.target_width == 0 || self.target_height == 0 {
            return Err(ConfigError::Invalid("resize target must be nonzero".into()));
        }
        let augment = self.augment_params();
        if let Some(a) = &augment {
            a.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(PipelineConfig {
            mode: self.mode,
            filter: self.wavelet_filter()?,
            depth: self.depth,
            target: (self.target_width, self.target_height),
            augment,
        })
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed: self.seed,
            lr_decay: (self.lr_decay_every > 0).then_some(LrDecay {
                every: self.lr_decay_every,
                factor: self.lr_decay_factor,
            }),
        }
    }

    pub fn ratios(&self) -> [f64; 3] {
        [self.ratio_train, self.ratio_validation, self.ratio_test]
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n: self.synth_n,
            seed: self.seed,
            period: self.synth_period,
            ..SynthConfig::default()
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join(CHECKPOINT_FILE)
    }

    pub fn history_path(&self) -> PathBuf {
        self.out_dir.join(HISTORY_FILE)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
