//! Manifest parsing, 14-class label encoding, class histograms and seeded
//! train/validation/test splitting.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The fourteen findings, in the order used for every label vector.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Infiltration",
    "Effusion",
    "Atelectasis",
    "Nodule",
    "Mass",
    "Consolidation",
    "Pneumothorax",
    "Pleural Thickening",
    "Cardiomegaly",
    "Emphysema",
    "Edema",
    "Fibrosis",
    "Pneumonia",
    "Hernia",
];

pub const NUM_CLASSES: usize = 14;

/// Label string for a scan without findings.
pub const NO_FINDING: &str = "No Finding";

pub const IMAGE_COLUMN: &str = "Image Index";
pub const LABEL_COLUMN: &str = "Finding Labels";
pub const PATIENT_COLUMN: &str = "Patient ID";
pub const SPLIT_COLUMN: &str = "split";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown label `{token}`{}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    UnknownLabel { token: String, line: Option<u64> },
    #[error("manifest is missing column `{0}`")]
    MissingColumn(String),
    #[error("malformed manifest row on line {0}")]
    MalformedRow(u64),
    #[error("bad split ratios {0:?}: each must lie in (0, 1) and they must sum to 1")]
    BadRatios([f64; 3]),
    #[error("need at least 3 entries to split, got {0}")]
    TooFewEntries(usize),
    #[error("invalid split metadata: {0}")]
    BadMetadata(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Position of a class name in [`CLASS_NAMES`], after trimming whitespace.
pub fn class_index(name: &str) -> Option<usize> {
    let name = name.trim();
    CLASS_NAMES.iter().position(|c| *c == name)
}

/// A 14-bit multi-label vector aligned with [`CLASS_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Labels(u16);

impl Labels {
    pub const EMPTY: Labels = Labels(0);

    pub fn from_bits(bits: u16) -> Self {
        Labels(bits & ((1 << NUM_CLASSES) - 1))
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut labels = Labels::EMPTY;
        for i in indices {
            labels.insert(i);
        }
        labels
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn contains(self, class: usize) -> bool {
        class < NUM_CLASSES && self.0 & (1 << class) != 0
    }

    pub fn insert(&mut self, class: usize) {
        assert!(class < NUM_CLASSES, "class index {class} out of range");
        self.0 |= 1 << class;
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn indices(self) -> impl Iterator<Item = usize> {
        (0..NUM_CLASSES).filter(move |&i| self.contains(i))
    }

    /// Targets for the loss: 1.0 where the bit is set.
    pub fn to_targets(self) -> [f64; NUM_CLASSES] {
        std::array::from_fn(|i| if self.contains(i) { 1.0 } else { 0.0 })
    }
}

impl fmt::Display for Labels {
    /// Alphabetically sorted, `|`-joined class names, or `No Finding`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str(NO_FINDING);
        }
        let mut names: Vec<&str> = self.indices().map(|i| CLASS_NAMES[i]).collect();
        names.sort_unstable();
        f.write_str(&names.join("|"))
    }
}

/// Parses a `|`-separated finding list. `No Finding` contributes no bits.
pub fn encode_labels(label_string: &str) -> Result<Labels> {
    let mut labels = Labels::EMPTY;
    for token in label_string.split('|') {
        let token = token.trim();
        if token == NO_FINDING {
            continue;
        }
        match class_index(token) {
            Some(i) => labels.insert(i),
            None => {
                return Err(DatasetError::UnknownLabel {
                    token: token.to_string(),
                    line: None,
                })
            }
        }
    }
    Ok(labels)
}

/// Inverse of [`encode_labels`] in canonical (sorted) form.
pub fn decode_labels(labels: Labels) -> String {
    labels.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Image location relative to the image root (the `Image Index` value).
    pub path: PathBuf,
    pub labels: Labels,
    pub patient_id: Option<String>,
}

impl ManifestEntry {
    pub fn new(image_id: impl Into<String>, labels: Labels) -> Self {
        let image_id = image_id.into();
        Self {
            path: PathBuf::from(&image_id),
            image_id,
            labels,
            patient_id: None,
        }
    }
}

fn csv_error(path: &Path, source: csv::Error) -> DatasetError {
    DatasetError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a labels CSV with `Image Index` and `Finding Labels` columns (and an
/// optional `Patient ID`). Other columns are ignored; row order is kept.
pub fn parse_manifest(csv_path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = csv_path.as_ref();
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_manifest(file, path)
}

/// [`parse_manifest`] over any reader; `origin` only labels errors.
pub fn read_manifest(reader: impl std::io::Read, origin: &Path) -> Result<Vec<ManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(origin, e))?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let image_col =
        column(IMAGE_COLUMN).ok_or_else(|| DatasetError::MissingColumn(IMAGE_COLUMN.into()))?;
    let label_col =
        column(LABEL_COLUMN).ok_or_else(|| DatasetError::MissingColumn(LABEL_COLUMN.into()))?;
    let patient_col = column(PATIENT_COLUMN);

    let mut entries = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| match e.position() {
            Some(pos) => DatasetError::MalformedRow(pos.line()),
            None => csv_error(origin, e),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let image_id = record.get(image_col).map(str::trim).unwrap_or_default();
        if image_id.is_empty() {
            return Err(DatasetError::MalformedRow(line));
        }
        let labels = record
            .get(label_col)
            .ok_or(DatasetError::MalformedRow(line))
            .and_then(encode_labels)
            .map_err(|e| match e {
                DatasetError::UnknownLabel { token, .. } => DatasetError::UnknownLabel {
                    token,
                    line: Some(line),
                },
                other => other,
            })?;
        let mut entry = ManifestEntry::new(image_id, labels);
        entry.patient_id = patient_col
            .and_then(|c| record.get(c))
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::to_string);
        entries.push(entry);
    }
    Ok(entries)
}

/// Per-class positive counts; a multi-label entry counts once per set bit.
pub fn class_histogram(entries: &[ManifestEntry]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for entry in entries {
        for i in entry.labels.indices() {
            counts[i] += 1;
        }
    }
    counts
}

/// How entries are grouped before shuffling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Every image is shuffled independently.
    #[default]
    Image,
    /// Images sharing a patient id always land in the same split.
    Patient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub train: Vec<ManifestEntry>,
    pub validation: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub mode: SplitMode,
}

impl SplitManifest {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parts(&self) -> [(&'static str, &[ManifestEntry]); 3] {
        [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }
}

fn check_split_inputs(n: usize, ratios: [f64; 3]) -> Result<()> {
    let in_range = ratios.iter().all(|r| *r > 0.0 && *r < 1.0);
    if !in_range || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(ratios));
    }
    if n < 3 {
        return Err(DatasetError::TooFewEntries(n));
    }
    Ok(())
}

fn cut_points(n: usize, ratios: [f64; 3]) -> (usize, usize) {
    // products such as 100 * 0.29 land just below the integer
    // (28.999999999999996); the nudge keeps the floor on the decimal result
    let cut = |fraction: f64| ((n as f64 * fraction) * (1.0 + 1e-12) + 1e-9).floor() as usize;
    let first = cut(ratios[0]);
    let second = cut(ratios[0] + ratios[1]);
    (first.min(n), second.clamp(first, n))
}

/// Seeded image-level split: shuffle, then cut at `floor(N r1)` and
/// `floor(N (r1 + r2))`; the remainder is the test split.
pub fn split(entries: &[ManifestEntry], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    check_split_inputs(entries.len(), ratios)?;
    let mut shuffled = entries.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = cut_points(shuffled.len(), ratios);
    let test = shuffled.split_off(b);
    let validation = shuffled.split_off(a);
    Ok(SplitManifest {
        train: shuffled,
        validation,
        test,
        seed,
        ratios,
        mode: SplitMode::Image,
    })
}

/// Seeded patient-level split. Patients (entries without a patient id are
/// their own group) are shuffled and assigned whole, filling train up to
/// `floor(N r1)` images and validation up to `floor(N (r1 + r2))`.
pub fn split_grouped(
    entries: &[ManifestEntry],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitManifest> {
    check_split_inputs(entries.len(), ratios)?;
    let mut group_of: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<&ManifestEntry>> = Vec::new();
    for entry in entries {
        match entry.patient_id.as_deref() {
            Some(pid) => {
                let idx = *group_of.entry(pid).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[idx].push(entry);
            }
            None => groups.push(vec![entry]),
        }
    }
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = cut_points(entries.len(), ratios);
    let mut out = SplitManifest {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
        ratios,
        mode: SplitMode::Patient,
    };
    let mut assigned = 0;
    for group in groups {
        let bucket = if assigned < a {
            &mut out.train
        } else if assigned < b {
            &mut out.validation
        } else {
            &mut out.test
        };
        assigned += group.len();
        bucket.extend(group.into_iter().cloned());
    }
    Ok(out)
}

/// Sidecar record written next to the split CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetadata {
    pub seed: u64,
    pub ratio_train: f64,
    pub ratio_validation: f64,
    pub ratio_test: f64,
    pub mode: SplitMode,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
}

pub const SPLIT_METADATA_FILE: &str = "split_meta.toml";

pub fn split_file_name(part: &str) -> String {
    format!("{part}.csv")
}

/// Writes `train.csv`, `validation.csv`, `test.csv` and the metadata record.
/// Returns the paths written.
pub fn write_split(dir: impl AsRef<Path>, split: &SplitManifest) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let with_patient = split
        .parts()
        .iter()
        .any(|(_, part)| part.iter().any(|e| e.patient_id.is_some()));
    let mut written = Vec::new();
    for (name, part) in split.parts() {
        let path = dir.join(split_file_name(name));
        let mut wtr = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let mut header = vec![IMAGE_COLUMN, LABEL_COLUMN];
        if with_patient {
            header.push(PATIENT_COLUMN);
        }
        header.push(SPLIT_COLUMN);
        wtr.write_record(&header).map_err(|e| csv_error(&path, e))?;
        for entry in part {
            let labels = entry.labels.to_string();
            let mut row = vec![entry.image_id.as_str(), labels.as_str()];
            if with_patient {
                row.push(entry.patient_id.as_deref().unwrap_or(""));
            }
            row.push(name);
            wtr.write_record(&row).map_err(|e| csv_error(&path, e))?;
        }
        wtr.flush().map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        written.push(path);
    }
    let meta = SplitMetadata {
        seed: split.seed,
        ratio_train: split.ratios[0],
        ratio_validation: split.ratios[1],
        ratio_test: split.ratios[2],
        mode: split.mode,
        n_train: split.train.len(),
        n_validation: split.validation.len(),
        n_test: split.test.len(),
    };
    let meta_path = dir.join(SPLIT_METADATA_FILE);
    let text = toml::to_string(&meta).map_err(|e| DatasetError::BadMetadata(e.to_string()))?;
    fs::write(&meta_path, text).map_err(|source| DatasetError::Io {
        path: meta_path.display().to_string(),
        source,
    })?;
    written.push(meta_path);
    Ok(written)
}

/// Reads a directory produced by [`write_split`].
pub fn read_split(dir: impl AsRef<Path>) -> Result<SplitManifest> {
    let dir = dir.as_ref();
    let meta_path = dir.join(SPLIT_METADATA_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|source| DatasetError::Io {
        path: meta_path.display().to_string(),
        source,
    })?;
    let meta: SplitMetadata =
        toml::from_str(&text).map_err(|e| DatasetError::BadMetadata(e.to_string()))?;
    let part = |name: &str| parse_manifest(dir.join(split_file_name(name)));
    let out = SplitManifest {
        train: part("train")?,
        validation: part("validation")?,
        test: part("test")?,
        seed: meta.seed,
        ratios: [meta.ratio_train, meta.ratio_validation, meta.ratio_test],
        mode: meta.mode,
    };
    if (out.train.len(), out.validation.len(), out.test.len())
        != (meta.n_train, meta.n_validation, meta.n_test)
    {
        return Err(DatasetError::BadMetadata(format!(
            "{} row counts disagree with the split files",
            meta_path.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entries(n: usize) -> Vec<ManifestEntry> {
        (0..n)
            .map(|i| ManifestEntry::new(format!("img_{i:05}.png"), Labels::from_bits(i as u16)))
            .collect()
    }

    #[test]
    fn class_set_is_fixed() {
        assert_eq!(CLASS_NAMES.len(), 14);
        assert_eq!(class_index("  Pleural Thickening "), Some(7));
        assert_eq!(class_index("hernia"), None);
    }

    #[test]
    fn encode_examples() {
        let l = encode_labels("Effusion|Infiltration").unwrap();
        assert_eq!(l.indices().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(l.count(), 2);
        assert!(encode_labels("No Finding").unwrap().is_empty());
        let l = encode_labels("Cardiomegaly|Cardiomegaly").unwrap();
        assert_eq!(l, Labels::from_indices([8]));
        match encode_labels("Effusion|Flu") {
            Err(DatasetError::UnknownLabel { token, .. }) => assert_eq!(token, "Flu"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(encode_labels("").is_err());
    }

    #[test]
    fn decode_is_sorted() {
        let l = Labels::from_indices([13, 0, 8]);
        assert_eq!(l.to_string(), "Cardiomegaly|Hernia|Infiltration");
        assert_eq!(Labels::EMPTY.to_string(), "No Finding");
    }

    #[test]
    fn manifest_parsing() {
        let csv = "Image Index,Finding Labels,Follow-up #\na.png,Hernia,0\nb.png,No Finding,1\n";
        let got = read_manifest(csv.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].labels.count(), 1);
        assert_eq!(got[1].labels.count(), 0);
        assert_eq!(got[0].path, PathBuf::from("a.png"));

        let header_only = "Image Index,Finding Labels\n";
        assert!(read_manifest(header_only.as_bytes(), Path::new("mem"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn manifest_quoted_fields_and_patient() {
        let csv = "\"Image Index\",\"Finding Labels\",\"Patient ID\"\n\"x, y.png\",\"Mass|Nodule\",17\n";
        let got = read_manifest(csv.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(got[0].image_id, "x, y.png");
        assert_eq!(got[0].patient_id.as_deref(), Some("17"));
        assert_eq!(got[0].labels, Labels::from_indices([3, 4]));
    }

    #[test]
    fn manifest_errors() {
        let missing = "Image,Finding Labels\na.png,Hernia\n";
        assert!(matches!(
            read_manifest(missing.as_bytes(), Path::new("mem")),
            Err(DatasetError::MissingColumn(c)) if c == IMAGE_COLUMN
        ));
        let ragged = "Image Index,Finding Labels\na.png,Hernia\nb.png\n";
        assert!(matches!(
            read_manifest(ragged.as_bytes(), Path::new("mem")),
            Err(DatasetError::MalformedRow(3))
        ));
        let unknown = "Image Index,Finding Labels\na.png,Hernia\nb.png,Cough\n";
        assert!(matches!(
            read_manifest(unknown.as_bytes(), Path::new("mem")),
            Err(DatasetError::UnknownLabel { line: Some(3), .. })
        ));
    }

    #[test]
    fn histogram_cases() {
        assert_eq!(class_histogram(&[]), [0; 14]);
        let e = ManifestEntry::new("a", encode_labels("Effusion|Infiltration").unwrap());
        let h = class_histogram(&[e]);
        assert_eq!(h[0], 1);
        assert_eq!(h[1], 1);
        assert_eq!(h.iter().sum::<usize>(), 2);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let data = entries(20);
        let s = split(&data, [0.70, 0.15, 0.15], 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (14, 3, 3));
        assert_eq!(s, split(&data, [0.70, 0.15, 0.15], 7).unwrap());
    }

    #[test]
    fn split_errors() {
        let data = entries(20);
        assert!(matches!(
            split(&data, [0.75, 0.15, 0.15], 1),
            Err(DatasetError::BadRatios(_))
        ));
        assert!(matches!(
            split(&data, [1.0, 0.0, 0.0], 1),
            Err(DatasetError::BadRatios(_))
        ));
        assert!(matches!(
            split(&entries(2), [0.70, 0.15, 0.15], 1),
            Err(DatasetError::TooFewEntries(2))
        ));
    }

    #[test]
    fn distinct_seeds_give_distinct_permutations() {
        let data = entries(100);
        let orders: Vec<Vec<String>> = (0..10)
            .map(|seed| {
                let s = split(&data, [0.70, 0.15, 0.15], seed).unwrap();
                s.train
                    .iter()
                    .chain(&s.validation)
                    .chain(&s.test)
                    .map(|e| e.image_id.clone())
                    .collect()
            })
            .collect();
        for i in 0..orders.len() {
            for j in i + 1..orders.len() {
                assert_ne!(orders[i], orders[j]);
            }
        }
    }

    #[test]
    fn grouped_split_keeps_patients_together() {
        let data: Vec<ManifestEntry> = (0..60)
            .map(|i| {
                let mut e = ManifestEntry::new(format!("{i}.png"), Labels::EMPTY);
                e.patient_id = Some(format!("p{}", i / 3));
                e
            })
            .collect();
        let s = split_grouped(&data, [0.70, 0.15, 0.15], 3).unwrap();
        assert_eq!(s.len(), 60);
        let patients = |part: &[ManifestEntry]| -> std::collections::HashSet<String> {
            part.iter().filter_map(|e| e.patient_id.clone()).collect()
        };
        let (a, b, c) = (patients(&s.train), patients(&s.validation), patients(&s.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(s.train.len(), 42);
    }

    #[test]
    fn split_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = split(&entries(30), [0.70, 0.15, 0.15], 11).unwrap();
        let written = write_split(dir.path(), &s).unwrap();
        assert_eq!(written.len(), 4);
        let text = fs::read_to_string(dir.path().join("validation.csv")).unwrap();
        assert!(text.starts_with("Image Index,Finding Labels,split\n"));
        assert!(text.lines().skip(1).all(|l| l.ends_with(",validation")));
        let back = read_split(dir.path()).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn labels_round_trip(bits in 1u16..(1 << 14)) {
            let labels = Labels::from_bits(bits);
            prop_assert_eq!(encode_labels(&labels.to_string()).unwrap(), labels);
        }

        #[test]
        fn histogram_is_additive(a in proptest::collection::vec(0u16..(1 << 14), 0..40),
                                 b in proptest::collection::vec(0u16..(1 << 14), 0..40)) {
            let make = |bits: &[u16]| -> Vec<ManifestEntry> {
                bits.iter().map(|&x| ManifestEntry::new("x", Labels::from_bits(x))).collect()
            };
            let (ea, eb) = (make(&a), make(&b));
            let joined: Vec<_> = ea.iter().chain(&eb).cloned().collect();
            let (ha, hb, hj) = (class_histogram(&ea), class_histogram(&eb), class_histogram(&joined));
            for i in 0..NUM_CLASSES {
                prop_assert_eq!(ha[i] + hb[i], hj[i]);
            }
        }

        #[test]
        fn split_partitions(n in 3usize..300, seed in any::<u64>()) {
            let data = entries(n);
            let s = split(&data, [0.70, 0.15, 0.15], seed).unwrap();
            let mut ids: Vec<_> = s.train.iter().chain(&s.validation).chain(&s.test)
                .map(|e| e.image_id.clone()).collect();
            ids.sort();
            let mut expected: Vec<_> = data.iter().map(|e| e.image_id.clone()).collect();
            expected.sort();
            prop_assert_eq!(ids, expected);
        }
    }
}
