//! Per-class ROC curves, AUC and the raw-vs-wavelet comparison report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::{class_index, CLASS_NAMES, NUM_CLASSES};
use crate::model::{Model, ModelError, Sample};
use crate::pipeline::PipelineConfig;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("labels contain only one class")]
    DegenerateLabels,
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {0} is not a number")]
    NanScore(f64),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("split mismatch: runs were evaluated on different test sets")]
    SplitMismatch,
    #[error("malformed {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// One operating point: samples scoring `>= threshold` are called positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Thresholds strictly decreasing, from `+inf` at `(0, 0)` to the lowest
    /// score at `(1, 1)`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// Trapezoidal area under `points`.
    pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
        points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&nan) = scores.iter().find(|s| s.is_nan()) {
        return Err(MetricsError::NanScore(nan));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::DegenerateLabels);
    }
    Ok((positives, negatives))
}

/// ROC curve with one operating point per distinct score.
///
/// Tied scores move together, which yields the diagonal segment that gives
/// ties half credit. The AUC is accumulated from integer counts so it matches
/// the pairwise definition up to a single rounding.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area, in units of 1 / (P N)
    let mut doubled_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp_before, fp_before) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled_area += u128::from(fp - fp_before) * u128::from(tp + tp_before);
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
        });
    }
    let auc = doubled_area as f64 / (2.0 * p * n);
    Ok(RocCurve { points, auc })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, by direct `O(P N)` enumeration.
pub fn auc_pairwise_oracle(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    let mut doubled: u128 = 0;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            doubled += if sp > sn {
                2
            } else if sp == sn {
                1
            } else {
                0
            };
        }
    }
    Ok(doubled as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// ROC result for one class; `curve` is `None` when the test split has no
/// positives or no negatives for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRoc {
    pub class: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub curve: Option<RocCurve>,
}

impl ClassRoc {
    pub fn name(&self) -> &'static str {
        CLASS_NAMES[self.class]
    }

    pub fn auc(&self) -> Option<f64> {
        self.curve.as_ref().map(|c| c.auc)
    }
}

/// Per-class ROC results for one trained model on one test split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    /// Image ids of the test split, in evaluation order.
    pub test_ids: Vec<String>,
    pub classes: Vec<ClassRoc>,
}

/// Builds per-class curves from a `samples x 14` score matrix.
pub fn class_curves(scores: &[Vec<f64>], labels: &[[bool; NUM_CLASSES]]) -> Result<Vec<ClassRoc>> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    (0..NUM_CLASSES)
        .map(|class| {
            let s: Vec<f64> = scores.iter().map(|row| row[class]).collect();
            let l: Vec<bool> = labels.iter().map(|row| row[class]).collect();
            let n_pos = l.iter().filter(|&&v| v).count();
            let n_neg = l.len() - n_pos;
            let curve = match roc_curve(&s, &l) {
                Ok(c) => Some(c),
                Err(MetricsError::DegenerateLabels) => None,
                Err(e) => return Err(e),
            };
            Ok(ClassRoc {
                class,
                n_pos,
                n_neg,
                curve,
            })
        })
        .collect()
}

/// Scores the un-augmented test inputs and builds one curve per class.
pub fn evaluate(model: &Model, test: &[Sample], pipeline: &PipelineConfig) -> Result<EvalRun> {
    if test.is_empty() {
        return Err(MetricsError::EmptySplit("test"));
    }
    let mut scores = Vec::with_capacity(test.len());
    for sample in test {
        let input = pipeline.prepare(&sample.image).map_err(ModelError::from)?;
        scores.push(crate::model::forward(model, std::slice::from_ref(&input))?.remove(0));
    }
    let labels: Vec<[bool; NUM_CLASSES]> = test
        .iter()
        .map(|s| std::array::from_fn(|i| s.labels.contains(i)))
        .collect();
    Ok(EvalRun {
        test_ids: test.iter().map(|s| s.image_id.clone()).collect(),
        classes: class_curves(&scores, &labels)?,
    })
}

/// One row of the comparison report.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub class: usize,
    pub auc_raw: Option<f64>,
    pub auc_wavelet: Option<f64>,
    /// `wavelet - raw`; undefined if either side is.
    pub delta: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub raw: EvalRun,
    pub wavelet: EvalRun,
}

/// Pairs two runs class by class. Both must cover the same test images.
pub fn compare(run_raw: &EvalRun, run_wavelet: &EvalRun) -> Result<ComparisonReport> {
    let mut a = run_raw.test_ids.clone();
    let mut b = run_wavelet.test_ids.clone();
    a.sort();
    b.sort();
    if a != b {
        return Err(MetricsError::SplitMismatch);
    }
    let rows = (0..NUM_CLASSES)
        .map(|class| {
            let find = |run: &EvalRun| run.classes.iter().find(|c| c.class == class).cloned();
            let (raw, wav) = (find(run_raw), find(run_wavelet));
            let auc_raw = raw.as_ref().and_then(ClassRoc::auc);
            let auc_wavelet = wav.as_ref().and_then(ClassRoc::auc);
            let counts = raw.or(wav).map_or((0, 0), |c| (c.n_pos, c.n_neg));
            ComparisonRow {
                class,
                auc_raw,
                auc_wavelet,
                delta: auc_raw.zip(auc_wavelet).map(|(r, w)| w - r),
                n_pos: counts.0,
                n_neg: counts.1,
            }
        })
        .collect();
    Ok(ComparisonReport {
        rows,
        raw: run_raw.clone(),
        wavelet: run_wavelet.clone(),
    })
}

pub const ROC_FILE: &str = "roc.csv";
pub const AUC_FILE: &str = "auc.csv";
pub const TEST_IDS_FILE: &str = "test_ids.txt";
pub const REPORT_FILE: &str = "report.csv";
const UNDEFINED: &str = "undefined";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn quote(name: &str) -> String {
    if name.contains([',', '"']) {
        format!("\"{}\"", name.replace('"', "\"\""))
    } else {
        name.to_string()
    }
}

/// `class,threshold,fpr,tpr` rows for every defined class.
pub fn roc_csv(run: &EvalRun) -> String {
    let mut out = String::from("class,threshold,fpr,tpr\n");
    for c in &run.classes {
        if let Some(curve) = &c.curve {
            for p in &curve.points {
                let _ = writeln!(out, "{},{},{},{}", quote(c.name()), p.threshold, p.fpr, p.tpr);
            }
        }
    }
    out
}

/// `class,auc,n_pos,n_neg` rows for all 14 classes.
pub fn auc_csv(run: &EvalRun) -> String {
    let mut out = String::from("class,auc,n_pos,n_neg\n");
    for c in &run.classes {
        let _ = writeln!(out, "{},{},{},{}", quote(c.name()), fmt_opt(c.auc()), c.n_pos, c.n_neg);
    }
    out
}

/// Writes `roc.csv`, `auc.csv` and `test_ids.txt` into `dir`.
pub fn write_eval_dir(dir: impl AsRef<Path>, run: &EvalRun) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = [
        (ROC_FILE, roc_csv(run)),
        (AUC_FILE, auc_csv(run)),
        (TEST_IDS_FILE, run.test_ids.iter().map(|id| format!("{id}\n")).collect()),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

fn read_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let malformed = |reason: String| MetricsError::Malformed {
        path: path.display().to_string(),
        reason,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => MetricsError::Io {
            path: path.display().to_string(),
            source: io,
        },
        other => malformed(format!("{other:?}")),
    })?;
    rdr.records()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| malformed(e.to_string()))
}

/// Reads a directory written by [`write_eval_dir`].
pub fn read_eval_dir(dir: impl AsRef<Path>) -> Result<EvalRun> {
    let dir = dir.as_ref();
    let malformed = |path: &Path, reason: &str| MetricsError::Malformed {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let ids_path = dir.join(TEST_IDS_FILE);
    let test_ids = fs::read_to_string(&ids_path)
        .map_err(io_err(&ids_path))?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();

    let auc_path = dir.join(AUC_FILE);
    let mut classes = Vec::new();
    for row in read_rows(&auc_path)? {
        let field = |i: usize| row.get(i).ok_or_else(|| malformed(&auc_path, "short row"));
        let class = class_index(field(0)?).ok_or_else(|| malformed(&auc_path, "unknown class"))?;
        let auc = match field(1)? {
            UNDEFINED => None,
            v => Some(v.parse::<f64>().map_err(|_| malformed(&auc_path, "bad auc"))?),
        };
        let count = |i: usize| -> Result<usize> {
            field(i)?.parse().map_err(|_| malformed(&auc_path, "bad count"))
        };
        classes.push((class, auc, count(2)?, count(3)?));
    }

    let roc_path = dir.join(ROC_FILE);
    let mut points: Vec<Vec<RocPoint>> = vec![Vec::new(); NUM_CLASSES];
    for row in read_rows(&roc_path)? {
        let field = |i: usize| row.get(i).ok_or_else(|| malformed(&roc_path, "short row"));
        let class = class_index(field(0)?).ok_or_else(|| malformed(&roc_path, "unknown class"))?;
        let num = |i: usize| -> Result<f64> {
            field(i)?.parse().map_err(|_| malformed(&roc_path, "bad number"))
        };
        points[class].push(RocPoint {
            threshold: num(1)?,
            fpr: num(2)?,
            tpr: num(3)?,
        });
    }

    let classes = classes
        .into_iter()
        .map(|(class, auc, n_pos, n_neg)| {
            let curve = match auc {
                Some(auc) => {
                    let pts = std::mem::take(&mut points[class]);
                    if pts.len() < 2 {
                        return Err(malformed(&roc_path, "defined class without curve points"));
                    }
                    Some(RocCurve { points: pts, auc })
                }
                None => None,
            };
            Ok(ClassRoc {
                class,
                n_pos,
                n_neg,
                curve,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalRun { test_ids, classes })
}

/// `class,auc_raw,auc_wavelet,delta,n_pos,n_neg`.
pub fn report_csv(report: &ComparisonReport) -> String {
    let mut out = String::from("class,auc_raw,auc_wavelet,delta,n_pos,n_neg\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            quote(CLASS_NAMES[r.class]),
            fmt_opt(r.auc_raw),
            fmt_opt(r.auc_wavelet),
            fmt_opt(r.delta),
            r.n_pos,
            r.n_neg
        );
    }
    out
}
