//! Class-labelled manifests, stratified splits and seeded batching.
//!
//! A data root holds one subdirectory per class (`covid/`, `healthy/`) of
//! PGM frames. Manifests are stored as JSON Lines sorted by path, one
//! `{"path", "label", "split"}` object per line.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, AugmentConfig, ImageError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Covid,
    Healthy,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Covid, Label::Healthy];

    /// Output unit of the classifier head; covid is unit 0.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Covid => "covid",
            Self::Healthy => "healthy",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split {other:?} (expected train|val|test)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing class directory {0}")]
    MissingClassDir(PathBuf),
    #[error("class {0} has zero images")]
    EmptyClass(Label),
    #[error("dataset I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    BadLine { line: usize, message: String },
    #[error("duplicate path {0:?} in manifest")]
    DuplicatePath(String),
    #[error("split fractions sum to {0}, expected 1")]
    Fractions(f64),
    #[error("class {0} gets no training samples")]
    TrainTooSmall(Label),
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("image {path}: {source}")]
    Image { path: String, source: ImageError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn new(mut records: Vec<Record>) -> Result<Self, DatasetError> {
        records.sort_by(|a, b| a.path.cmp(&b.path));
        for pair in records.windows(2) {
            if pair[0].path == pair[1].path {
                return Err(DatasetError::DuplicatePath(pair[0].path.clone()));
            }
        }
        let mut m = Self {
            records,
            warnings: vec![],
        };
        m.refresh_warnings();
        Ok(m)
    }

    fn refresh_warnings(&mut self) {
        self.warnings.clear();
        let (c, h) = (self.count(Label::Covid, None), self.count(Label::Healthy, None));
        if c != h {
            self.warnings
                .push(format!("class imbalance: {c} covid vs {h} healthy images"));
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of `label`, optionally restricted to one split.
    pub fn count(&self, label: Label, split: Option<Split>) -> usize {
        self.records
            .iter()
            .filter(|r| r.label == label && (split.is_none() || r.split == split))
            .count()
    }

    pub fn split_records(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }

    pub fn is_balanced(&self) -> bool {
        self.warnings.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DatasetError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| DatasetError::BadLine {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Self::new(records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(io_err(path))?;
        let mut text = String::new();
        for line in BufReader::new(f).lines() {
            text.push_str(&line.map_err(io_err(path))?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// One record per `*.pgm` under `root/covid` and `root/healthy`.
pub fn build_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest, DatasetError> {
    let root = root.as_ref();
    let mut records = Vec::new();
    for label in Label::ALL {
        let dir = root.join(label.as_str());
        if !dir.is_dir() {
            return Err(DatasetError::MissingClassDir(dir));
        }
        let mut found = 0;
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if path.is_file() && is_pgm(&path) {
                records.push(Record {
                    path: path.to_string_lossy().into_owned(),
                    label,
                    split: None,
                });
                found += 1;
            }
        }
        if found == 0 {
            return Err(DatasetError::EmptyClass(label));
        }
    }
    let m = DatasetManifest::new(records)?;
    for w in &m.warnings {
        log::warn!("{w}");
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

const FRACTION_EPS: f64 = 1e-9;

/// Largest-remainder apportionment of `n` items; ties go to the earlier
/// split (train, then val, then test).
pub fn apportion(n: usize, fractions: &SplitFractions) -> [usize; 3] {
    let exact = [
        n as f64 * fractions.train,
        n as f64 * fractions.val,
        n as f64 * fractions.test,
    ];
    let mut counts = exact.map(|x| (x + FRACTION_EPS).floor().max(0.0) as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    let rem = |i: usize| exact[i] - counts[i] as f64;
    order.sort_by(|&a, &b| {
        let (ra, rb) = (rem(a), rem(b));
        if (ra - rb).abs() <= FRACTION_EPS {
            a.cmp(&b)
        } else {
            rb.total_cmp(&ra)
        }
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Stratified split: each class is shuffled on its own stream of `seed` and
/// cut by [`apportion`].
pub fn split(manifest: &DatasetManifest, fractions: &SplitFractions, seed: u64) -> Result<DatasetManifest, DatasetError> {
    let sum = fractions.train + fractions.val + fractions.test;
    let parts = [fractions.train, fractions.val, fractions.test];
    if (sum - 1.0).abs() > 1e-9 || parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(DatasetError::Fractions(sum));
    }
    let mut out = manifest.clone();
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..out.records.len())
            .filter(|&i| out.records[i].label == label)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label.index() as u64);
        idx.shuffle(&mut rng);
        let counts = apportion(idx.len(), fractions);
        if counts[0] == 0 {
            return Err(DatasetError::TrainTooSmall(label));
        }
        let mut cursor = idx.into_iter();
        for (split, n) in Split::ALL.into_iter().zip(counts) {
            for i in cursor.by_ref().take(n) {
                out.records[i].split = Some(split);
            }
        }
    }
    Ok(out)
}

/// Permutation of `0..n` keyed by `(seed, epoch)`.
pub fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub paths: Vec<String>,
    pub labels: Vec<Label>,
}

/// Every record of `split` exactly once, in an order keyed by
/// `(seed, epoch)`; the final short batch is kept.
pub fn batches(
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::ZeroBatch);
    }
    let recs = manifest.split_records(split);
    if recs.is_empty() {
        return Err(DatasetError::EmptySplit(split));
    }
    let order = shuffled_indices(recs.len(), seed, epoch);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch {
            paths: chunk.iter().map(|&i| recs[i].path.clone()).collect(),
            labels: chunk.iter().map(|&i| recs[i].label).collect(),
        })
        .collect())
}

pub fn read_pgm(path: &str) -> Result<imaging::ImageU8, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(Path::new(path)))?;
    imaging::decode_pgm(&bytes).map_err(|source| DatasetError::Image {
        path: path.to_string(),
        source,
    })
}

/// Writes ten images per record to `out_root/<label>/<stem>_aug<k>.pgm`.
/// Copies inherit the split of their source frame.
pub fn augment_dataset(
    manifest: &DatasetManifest,
    out_root: impl AsRef<Path>,
    seed: u64,
    config: &AugmentConfig,
) -> Result<DatasetManifest, DatasetError> {
    let out_root = out_root.as_ref();
    for label in Label::ALL {
        let dir = out_root.join(label.as_str());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut records = Vec::with_capacity(manifest.len() * imaging::EXPANSION_FACTOR);
    let mut seen = HashSet::new();
    for (index, rec) in manifest.records.iter().enumerate() {
        let img = imaging::normalize(&read_pgm(&rec.path)?);
        let stem = Path::new(&rec.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("img{index}"));
        for (k, variant) in config.expand(&img, seed, index as u64).iter().enumerate() {
            let mut name = format!("{stem}_aug{k}.pgm");
            if !seen.insert((rec.label, name.clone())) {
                name = format!("{stem}_{index}_aug{k}.pgm");
                seen.insert((rec.label, name.clone()));
            }
            let path = out_root.join(rec.label.as_str()).join(name);
            fs::write(&path, imaging::encode_pgm(&imaging::quantize(variant))).map_err(io_err(&path))?;
            records.push(Record {
                path: path.to_string_lossy().into_owned(),
                label: rec.label,
                split: rec.split,
            });
        }
    }
    DatasetManifest::new(records)
}
