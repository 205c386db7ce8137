//! End-to-end commands behind the command-line tool.
//!
//! Each command writes its outputs, reads them back to check them, and on any
//! failure removes whatever it had started writing.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{
    parse_manifest, read_split, split, split_file_name, split_grouped, write_split, DatasetError,
    SplitManifest, SplitMode, CLASS_NAMES, SPLIT_METADATA_FILE,
};
use crate::metrics::{
    compare, evaluate, read_eval_dir, report_csv, write_eval_dir, ComparisonReport, EvalRun, MetricsError,
    AUC_FILE, REPORT_FILE, ROC_FILE, TEST_IDS_FILE,
};
use crate::model::{
    default_architecture, freeze_first, init_model, load_checkpoint, load_samples, read_history,
    save_checkpoint, train_samples_with, write_history, EpochRecord, Model, ModelError, Shape,
};
use crate::pipeline::{load_image, save_png8, PipelineError};
use crate::plot::{overlay_file_name, roc_overlay_svg};
use crate::synth::{generate_corpus, SynthConfig, SynthError, MANIFEST_FILE};
use crate::wavelet::{decompose, detail_images_at, flat_tolerance, WaveletError, WaveletFilter};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("output check failed for {0}")]
    Verification(String),
}

pub type Result<T> = std::result::Result<T, CommandError>;

/// Progress sink; the CLI prints, tests usually discard.
pub type Reporter<'a> = &'a dyn Fn(&str);

/// Removes registered paths when dropped without [`OutputGuard::commit`].
#[derive(Debug, Default)]
pub struct OutputGuard {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    pub fn new(paths: impl IntoIterator<Item = PathBuf>) -> Self {
        Self {
            paths: paths.into_iter().collect(),
            committed: false,
        }
    }

    pub fn track(&mut self, path: PathBuf) {
        self.paths.push(path);
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.paths)
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CommandError::Io {
        path: dir.display().to_string(),
        source,
    })
}

fn verify(ok: bool, what: &Path) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CommandError::Verification(what.display().to_string()))
    }
}

/// Writes `vertical.png` and `horizontal.png` (the rescaled detail images at
/// `depth`) and, with `all_subbands`, every raw subband of every level as
/// `level{k}_{ll,lh,hl,hh}.png`, each min-max rescaled.
pub fn cmd_dwt(
    input: &Path,
    filter: &WaveletFilter,
    depth: usize,
    out_dir: &Path,
    all_subbands: bool,
) -> Result<Vec<PathBuf>> {
    let image = load_image(input)?;
    let (vertical, horizontal) = detail_images_at(&image, filter, depth)?;
    let mut outputs = vec![
        (out_dir.join("vertical.png"), vertical),
        (out_dir.join("horizontal.png"), horizontal),
    ];
    if all_subbands {
        let tol = flat_tolerance(&image);
        let pyramid = decompose(&image, filter, depth)?;
        for (k, level) in pyramid.levels.iter().enumerate() {
            for (name, band) in [("ll", &level.ll), ("lh", &level.lh), ("hl", &level.hl), ("hh", &level.hh)] {
                outputs.push((out_dir.join(format!("level{}_{name}.png", k + 1)), band.rescale_unit(tol)));
            }
        }
    }
    create_dir(out_dir)?;
    let guard = OutputGuard::new(outputs.iter().map(|(p, _)| p.clone()));
    for (path, band) in &outputs {
        save_png8(band, path)?;
        let back = load_image(path)?;
        verify(back.dims() == band.dims(), path)?;
    }
    Ok(guard.commit())
}

/// Splits a labels CSV into `train/validation/test.csv` plus metadata.
pub fn cmd_split(
    manifest: &Path,
    ratios: [f64; 3],
    seed: u64,
    mode: SplitMode,
    out_dir: &Path,
) -> Result<(SplitManifest, Vec<PathBuf>)> {
    let entries = parse_manifest(manifest)?;
    let parts = match mode {
        SplitMode::Image => split(&entries, ratios, seed)?,
        SplitMode::Patient => split_grouped(&entries, ratios, seed)?,
    };
    let planned = ["train", "validation", "test"]
        .iter()
        .map(|p| out_dir.join(split_file_name(p)))
        .chain([out_dir.join(SPLIT_METADATA_FILE)]);
    let guard = OutputGuard::new(planned);
    write_split(out_dir, &parts)?;
    verify(read_split(out_dir)? == parts, out_dir)?;
    Ok((parts, guard.commit()))
}

/// Input shape implied by the config's pipeline.
pub fn model_input_shape(config: &RunConfig) -> Result<Shape> {
    Ok(config.pipeline()?.input_shape().into())
}

/// The untrained model a run starts from.
pub fn initial_model(config: &RunConfig) -> Result<Model> {
    let input = model_input_shape(config)?;
    let model = init_model(input, &default_architecture(input), config.seed)?;
    Ok(freeze_first(model, config.freeze_layers)?)
}

/// Trains from the split in `config.split_dir` and writes the checkpoint and
/// history into `config.out_dir`.
pub fn cmd_train(config: &RunConfig, report: Reporter) -> Result<(Model, Vec<EpochRecord>, Vec<PathBuf>)> {
    let pipeline = config.pipeline()?;
    let hyper = config.hyperparams();
    hyper.validate()?;
    let parts = read_split(&config.split_dir)?;
    if parts.train.is_empty() {
        return Err(ModelError::EmptySplit("train").into());
    }
    if parts.validation.is_empty() {
        return Err(ModelError::EmptySplit("validation").into());
    }
    let model = initial_model(config)?;
    let train_set = load_samples(&parts.train, &config.image_dir)?;
    let val_set = load_samples(&parts.validation, &config.image_dir)?;
    report(&format!(
        "training {} mode on {} images ({} validation), {} parameters",
        config.mode.as_str(),
        train_set.len(),
        val_set.len(),
        model.parameter_count()
    ));
    let outcome = train_samples_with(model, &train_set, &val_set, &pipeline, &hyper, |r| {
        report(&format!(
            "epoch {:>3}  train_loss {:.6}  val_loss {:.6}",
            r.epoch, r.train_loss, r.val_loss
        ))
    })?;

    create_dir(&config.out_dir)?;
    let (ckpt, hist) = (config.checkpoint_path(), config.history_path());
    let guard = OutputGuard::new([ckpt.clone(), hist.clone()]);
    save_checkpoint(&outcome.model, &ckpt)?;
    write_history(&hist, &outcome.history)?;
    verify(load_checkpoint(&ckpt)? == outcome.model, &ckpt)?;
    verify(read_history(&hist)?.len() == outcome.history.len(), &hist)?;
    Ok((outcome.model, outcome.history, guard.commit()))
}

/// Scores the test split with a checkpoint and writes `roc.csv`, `auc.csv`
/// and `test_ids.txt` into `out_dir`.
pub fn cmd_eval(
    checkpoint: &Path,
    split_dir: &Path,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<(EvalRun, Vec<PathBuf>)> {
    let model = load_checkpoint(checkpoint)?;
    let pipeline = config.pipeline()?;
    let expected: Shape = pipeline.input_shape().into();
    if model.input_shape() != expected {
        return Err(ModelError::InputShapeMismatch {
            expected: model.input_shape(),
            got: expected,
        }
        .into());
    }
    let parts = read_split(split_dir)?;
    let test = load_samples(&parts.test, &config.image_dir)?;
    let run = evaluate(&model, &test, &pipeline)?;
    let guard = OutputGuard::new([ROC_FILE, AUC_FILE, TEST_IDS_FILE].map(|f| out_dir.join(f)));
    write_eval_dir(out_dir, &run)?;
    verify(read_eval_dir(out_dir)? == run, out_dir)?;
    Ok((run, guard.commit()))
}

/// Compares two evaluation directories; writes `report.csv` and one overlay
/// SVG per class in `classes` (all classes when empty).
pub fn cmd_compare(
    raw_dir: &Path,
    wavelet_dir: &Path,
    out_dir: &Path,
    classes: &[usize],
) -> Result<(ComparisonReport, Vec<PathBuf>)> {
    let raw = read_eval_dir(raw_dir)?;
    let wavelet = read_eval_dir(wavelet_dir)?;
    let report = compare(&raw, &wavelet)?;
    let classes: Vec<usize> = if classes.is_empty() {
        (0..CLASS_NAMES.len()).collect()
    } else {
        classes.to_vec()
    };
    create_dir(out_dir)?;
    let mut guard = OutputGuard::default();
    let report_path = out_dir.join(REPORT_FILE);
    guard.track(report_path.clone());
    let text = report_csv(&report);
    write_text(&report_path, &text)?;
    for &class in &classes {
        let find = |run: &EvalRun| {
            run.classes
                .iter()
                .find(|c| c.class == class)
                .and_then(|c| c.curve.clone())
        };
        let name = CLASS_NAMES[class];
        let svg = roc_overlay_svg(name, find(&raw).as_ref(), find(&wavelet).as_ref());
        let path = out_dir.join(overlay_file_name(name));
        guard.track(path.clone());
        write_text(&path, &svg)?;
    }
    let back = fs::read_to_string(&report_path).map_err(|source| CommandError::Io {
        path: report_path.display().to_string(),
        source,
    })?;
    verify(back == text, &report_path)?;
    Ok((report, guard.commit()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CommandError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Generates the synthetic corpus and its `manifest.csv` in `out_dir`.
pub fn cmd_synth(config: &SynthConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let planned = (0..config.n)
        .map(|i| out_dir.join(format!("synth_{i:05}.png")))
        .chain([out_dir.join(MANIFEST_FILE)]);
    let guard = OutputGuard::new(planned);
    let written = generate_corpus(config, out_dir)?;
    let manifest = written.last().expect("manifest is written last");
    verify(parse_manifest(manifest)?.len() == config.n, manifest)?;
    Ok(guard.commit())
}

/// Paths produced by [`run_demo`].
#[derive(Debug, Clone)]
pub struct DemoOutputs {
    pub raw: RunConfig,
    pub wavelet: RunConfig,
    pub compare_dir: PathBuf,
    pub report: ComparisonReport,
}

/// Synthetic corpus, split, both training arms, evaluation and comparison,
/// all under `root` and all driven by `base` (its `mode` and paths are
/// overridden).
pub fn run_demo(base: &RunConfig, root: &Path, report: Reporter) -> Result<DemoOutputs> {
    let data = root.join("data");
    let mut cfg = base.clone();
    cfg.manifest = data.join(MANIFEST_FILE);
    cfg.image_dir = data.clone();
    cfg.split_dir = data.join("splits");
    cmd_synth(&cfg.synth(), &data)?;
    report(&format!("wrote {} synthetic images to {}", cfg.synth_n, data.display()));
    cmd_split(&cfg.manifest, cfg.ratios(), cfg.seed, cfg.split_mode, &cfg.split_dir)?;

    let arm = |mode: crate::pipeline::InputMode| -> Result<RunConfig> {
        let mut c = cfg.clone();
        c.mode = mode;
        c.out_dir = root.join("run").join(mode.as_str());
        cmd_train(&c, report)?;
        cmd_eval(&c.checkpoint_path(), &c.split_dir, &c, &c.eval_dir())?;
        Ok(c)
    };
    let raw = arm(crate::pipeline::InputMode::Raw)?;
    let wavelet = arm(crate::pipeline::InputMode::Wavelet)?;
    let compare_dir = root.join("run").join("compare");
    let (rep, _) = cmd_compare(&raw.eval_dir(), &wavelet.eval_dir(), &compare_dir, &[])?;
    Ok(DemoOutputs {
        raw,
        wavelet,
        compare_dir,
        report: rep,
    })
}
