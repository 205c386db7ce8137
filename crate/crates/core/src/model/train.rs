use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sgdm_step, Model, ModelError, OptimizerState, Result};
use crate::dataset::{Labels, ManifestEntry, SplitManifest};
use crate::derive_seed;
use crate::pipeline::{load_image, PipelineConfig};
use crate::raster::Image;

/// Step decay: the rate is multiplied by `factor` every `every` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Drives batch shuffling and augmentation draws.
    pub seed: u64,
    pub lr_decay: Option<LrDecay>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 20,
            learning_rate: 3e-4,
            momentum: 0.9,
            seed: 0,
            lr_decay: None,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidHyperparams(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        // a zero rate is accepted so a run can be replayed without updates
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if let Some(decay) = self.lr_decay {
            if decay.every == 0 || !(decay.factor > 0.0 && decay.factor <= 1.0) {
                return bad("lr decay needs every >= 1 and factor in (0, 1]".into());
            }
        }
        Ok(())
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.factor.powi((epoch / d.every) as i32),
            None => self.learning_rate,
        }
    }
}

/// A decoded scan with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub image: Image,
    pub labels: Labels,
}

/// Loads every entry's image from `image_root`.
pub fn load_samples(entries: &[ManifestEntry], image_root: &Path) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| {
            Ok(Sample {
                image_id: e.image_id.clone(),
                image: load_image(image_root.join(&e.path))?,
                labels: e.labels,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// Loads the train and validation images of `split` and runs [`train_samples`].
pub fn train(
    model: Model,
    split: &SplitManifest,
    pipeline: &PipelineConfig,
    hyper: &Hyperparams,
    image_root: &Path,
) -> Result<TrainOutcome> {
    if split.train.is_empty() {
        return Err(ModelError::EmptySplit("train"));
    }
    if split.validation.is_empty() {
        return Err(ModelError::EmptySplit("validation"));
    }
    let train_set = load_samples(&split.train, image_root)?;
    let val_set = load_samples(&split.validation, image_root)?;
    train_samples(model, &train_set, &val_set, pipeline, hyper)
}

pub fn train_samples(
    model: Model,
    train_set: &[Sample],
    val_set: &[Sample],
    pipeline: &PipelineConfig,
    hyper: &Hyperparams,
) -> Result<TrainOutcome> {
    train_samples_with(model, train_set, val_set, pipeline, hyper, |_| {})
}

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

fn mean_loss(model: &Model, inputs: &[Vec<f64>], targets: &[Vec<f64>], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in inputs.chunks(chunk).zip(targets.chunks(chunk)) {
        let probs: Vec<Vec<f64>> = x.iter().map(|v| model.predict_flat(v)).collect::<Result<_>>()?;
        total += super::loss(&probs, y)? * x.len() as f64;
    }
    Ok(total / inputs.len() as f64)
}

/// Mini-batch SGDM over `epochs x ceil(N / batch)` steps.
///
/// Each epoch reshuffles the training set with a seed derived from
/// `hyper.seed` and the epoch; each training image gets its own augmentation
/// seed derived from `hyper.seed`, the epoch and its position. Validation loss
/// is measured once per epoch on un-augmented inputs. `on_epoch` sees every
/// record as it is produced.
pub fn train_samples_with(
    mut model: Model,
    train_set: &[Sample],
    val_set: &[Sample],
    pipeline: &PipelineConfig,
    hyper: &Hyperparams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(ModelError::EmptySplit("validation"));
    }
    let expected = model.input_shape();
    if super::Shape::from(pipeline.input_shape()) != expected {
        return Err(ModelError::InputShapeMismatch {
            expected,
            got: pipeline.input_shape().into(),
        });
    }

    let val_inputs: Vec<Vec<f64>> = val_set
        .iter()
        .map(|s| Ok(pipeline.prepare(&s.image)?.flatten()))
        .collect::<Result<_>>()?;
    let val_targets: Vec<Vec<f64>> = val_set.iter().map(|s| s.labels.to_targets().to_vec()).collect();
    // without augmentation the training inputs never change
    let cached_train: Option<Vec<Vec<f64>>> = match pipeline.augment {
        None => Some(
            train_set
                .iter()
                .map(|s| Ok(pipeline.prepare(&s.image)?.flatten()))
                .collect::<Result<_>>()?,
        ),
        Some(_) => None,
    };

    let mut state = OptimizerState::new(&model);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, SHUFFLE_STREAM, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let rate = hyper.rate_at(epoch);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(hyper.batch_size).enumerate() {
            let inputs: Vec<Vec<f64>> = batch
                .iter()
                .enumerate()
                .map(|(pos, &i)| match &cached_train {
                    Some(cache) => Ok(cache[i].clone()),
                    None => {
                        let step = (batch_idx * hyper.batch_size + pos) as u64;
                        let seed = derive_seed(
                            hyper.seed,
                            AUGMENT_STREAM,
                            ((epoch as u64) << 32) | step,
                        );
                        Ok(pipeline.prepare_augmented(&train_set[i].image, seed)?.flatten())
                    }
                })
                .collect::<Result<_>>()?;
            let targets: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| train_set[i].labels.to_targets().to_vec())
                .collect();
            let grads = model.backward_flat(&inputs, &targets)?;
            epoch_loss += grads.loss * batch.len() as f64;
            sgdm_step(&mut model, &mut state, &grads, rate, hyper.momentum)?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss: mean_loss(&model, &val_inputs, &val_targets, 64)?,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}

/// Writes `epoch,train_loss,val_loss` rows.
pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        text.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    fs::write(path, text).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |line: usize| ModelError::ShapeMismatch(format!("{}: bad history line {line}", path.display()));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(i + 1));
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(i + 1))?,
                train_loss: f[1].parse().map_err(|_| bad(i + 1))?,
                val_loss: f[2].parse().map_err(|_| bad(i + 1))?,
            })
        })
        .collect()
}
