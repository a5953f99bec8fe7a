//! Banknote-authentication ingestion, deterministic stratified splits and
//! train-fitted standardization.
//!
//! The input is the published comma-separated file: four wavelet features
//! (variance, skewness, kurtosis, entropy) and an integer label, no header.
//! Label `1` marks a counterfeit note, the anomalous class; genuine notes
//! (`0`) are the normal class.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

pub const FEATURES: usize = 4;
/// Row count of the published file.
pub const CANONICAL_ROWS: usize = 1372;
/// Counterfeit notes in the published file.
pub const CANONICAL_POSITIVES: usize = 610;
/// Environment variable naming the dataset file.
pub const DATA_ENV: &str = "FFOC_BANKNOTE";
pub const DEFAULT_DATA_PATH: &str = "data/data_banknote_authentication.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<u8>) -> Result<Self> {
        if features.cols() != FEATURES {
            return Err(Error::Format(format!(
                "expected {FEATURES} feature columns, got {}",
                features.cols()
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::Length(features.rows(), labels.len()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Format("labels must be 0 or 1".into()));
        }
        Ok(Dataset { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// True for the full published file (1372 rows, 610 counterfeit).
    pub fn has_canonical_counts(&self) -> bool {
        self.len() == CANONICAL_ROWS && self.positives() == CANONICAL_POSITIVES
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

pub fn load_banknote(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_banknote(&text, path)
}

pub fn parse_banknote(text: &str, path: &Path) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != FEATURES + 1 {
            return Err(err(format!(
                "expected {} comma-separated columns, found {}",
                FEATURES + 1,
                fields.len()
            )));
        }
        for f in &fields[..FEATURES] {
            let v: f64 = f.parse().map_err(|_| err(format!("`{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(format!("`{f}` is not finite")));
            }
            data.push(v);
        }
        let label = match fields[FEATURES] {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label `{other}` is not 0 or 1"))),
        };
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Format(format!("{} contains no samples", path.display())));
    }
    let rows = labels.len();
    Dataset::new(Matrix::from_vec(rows, FEATURES, data)?, labels)
}

/// Writes `ds` in the published format (`{:?}` floats round-trip exactly).
pub fn write_banknote(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, label) in ds.labels.iter().enumerate() {
        let row: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{},{label}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Dataset location: `explicit`, else `$FFOC_BANKNOTE`, else the default path.
pub fn resolve_data_path(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_ENV) {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => PathBuf::from(DEFAULT_DATA_PATH),
    }
}

/// Per-feature mean and standard deviation of the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub const STD_FLOOR: f64 = 1e-12;

    pub fn fit(m: &Matrix) -> Result<Self> {
        let mean = m.col_means()?.into_vec();
        let n = m.rows() as f64;
        let mut var = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            for ((v, x), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                *v += (x - mu) * (x - mu);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(Self::STD_FLOOR)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn identity(cols: usize) -> Self {
        Standardizer {
            mean: vec![0.0; cols],
            std: vec![1.0; cols],
        }
    }

    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.mean.len() {
            return Err(Error::Shape {
                op: "standardize",
                left: m.shape(),
                right: (1, self.mean.len()),
            });
        }
        Ok(Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            (m.get(i, j) - self.mean[j]) / self.std[j]
        }))
    }
}

/// Index splits into the dataset plus the standardizer fitted on `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub standardizer: Standardizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" | "validation" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::config(format!("unknown split `{s}`"))),
        }
    }
}

impl Splits {
    pub fn indices(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    /// Writes `train.idx`, `valid.idx` and `test.idx`, one index per line.
    pub fn write_index_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, idx) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{name}.idx")))?);
            for i in idx {
                writeln!(f, "{i}")?;
            }
            f.flush()?;
        }
        Ok(())
    }
}

/// Split settings; the split seed is fixed across model seeds so every trial
/// sees the same partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub fractions: [f64; 3],
    pub split_seed: u64,
    /// Move every counterfeit note out of the training split.
    pub oneclass: bool,
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            fractions: [0.6, 0.2, 0.2],
            split_seed: 0,
            oneclass: true,
            standardize: true,
        }
    }
}

/// Stratified, seeded partition. Each class is shuffled on its own and cut by
/// `fractions` (train and valid counts rounded, test takes the rest); the three
/// index lists are then shuffled. With `oneclass`, counterfeit rows drawn for
/// training are appended to the test split instead.
pub fn make_splits(ds: &Dataset, fractions: [f64; 3], split_seed: u64, oneclass: bool) -> Result<Splits> {
    if fractions.iter().any(|&f| !(f >= 0.0) || !f.is_finite()) || fractions[0] <= 0.0 {
        return Err(Error::config(format!("invalid split fractions {fractions:?}")));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions sum to {sum}, not 1")));
    }
    let mut rng = SplitMix64::new(split_seed);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        rng.shuffle(&mut idx);
        let n = idx.len();
        let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
        let n_valid = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        let (tr, rest) = idx.split_at(n_train);
        let (va, te) = rest.split_at(n_valid);
        if oneclass && class == 1 {
            test.extend_from_slice(tr);
        } else {
            train.extend_from_slice(tr);
        }
        valid.extend_from_slice(va);
        test.extend_from_slice(te);
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut valid);
    rng.shuffle(&mut test);
    if train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let standardizer = Standardizer::fit(&ds.features.select_rows(&train))?;
    Ok(Splits {
        train,
        valid,
        test,
        standardizer,
    })
}

/// Train-statistics standardization of `m`.
pub fn standardize(split: &Splits, m: &Matrix) -> Result<Matrix> {
    split.standardizer.apply(m)
}

/// Feature matrices and labels for the three splits, ready for training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub splits: Splits,
    /// Transform applied to every split (identity when standardization is off).
    pub transform: Standardizer,
    pub train: Matrix,
    pub valid: Matrix,
    pub test: Matrix,
    pub train_labels: Vec<u8>,
    pub valid_labels: Vec<u8>,
    pub test_labels: Vec<u8>,
}

impl PreparedData {
    pub fn new(ds: &Dataset, cfg: &DataConfig) -> Result<Self> {
        let splits = make_splits(ds, cfg.fractions, cfg.split_seed, cfg.oneclass)?;
        let transform = if cfg.standardize {
            splits.standardizer.clone()
        } else {
            Standardizer::identity(FEATURES)
        };
        let take = |idx: &[usize]| transform.apply(&ds.features.select_rows(idx));
        Ok(PreparedData {
            train: take(&splits.train)?,
            valid: take(&splits.valid)?,
            test: take(&splits.test)?,
            train_labels: ds.labels_at(&splits.train),
            valid_labels: ds.labels_at(&splits.valid),
            test_labels: ds.labels_at(&splits.test),
            transform,
            splits,
        })
    }

    pub fn split(&self, which: SplitName) -> (&Matrix, &[u8], &[usize]) {
        match which {
            SplitName::Train => (&self.train, &self.train_labels, &self.splits.train),
            SplitName::Valid => (&self.valid, &self.valid_labels, &self.splits.valid),
            SplitName::Test => (&self.test, &self.test_labels, &self.splits.test),
        }
    }
}

/// A synthetic stand-in with the published shape (1372 rows, 610 counterfeit)
/// and roughly matching per-class feature means and spreads, drawn as
/// independent Gaussians. It is NOT the banknote data; it exists for tests and
/// demos when the real file is absent.
pub fn synthetic_banknote(seed: u64) -> Dataset {
    // (mean, std) per feature for genuine and counterfeit notes
    const GENUINE: [(f64, f64); 4] = [(2.28, 2.02), (4.26, 5.14), (0.80, 3.24), (-1.15, 2.13)];
    const FORGED: [(f64, f64); 4] = [(-1.87, 1.88), (-0.99, 5.40), (2.15, 5.26), (-1.25, 2.07)];
    let mut rng = SplitMix64::new(seed);
    let n_neg = CANONICAL_ROWS - CANONICAL_POSITIVES;
    let mut rows = Vec::with_capacity(CANONICAL_ROWS);
    let mut labels = Vec::with_capacity(CANONICAL_ROWS);
    for i in 0..CANONICAL_ROWS {
        let (params, label) = if i < n_neg { (&GENUINE, 0) } else { (&FORGED, 1) };
        rows.push(params.map(|(m, s)| m + s * rng.normal()));
        labels.push(label);
    }
    Dataset::new(Matrix::from_rows(&rows), labels).expect("well-formed")
}
