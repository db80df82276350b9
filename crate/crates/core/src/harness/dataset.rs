use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::nn::{seeded_rng, Tensor, STREAM_SPLIT};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Per-feature affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Which rows go to the test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { test_fraction: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `samples × d_i`.
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub norm: Option<Normalization>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn rows(&self, idx: &[usize]) -> Tensor<f64> {
        self.x.gather_rows(idx)
    }

    /// One-hot targets for the given rows.
    pub fn one_hot(&self, idx: &[usize]) -> Tensor<f64> {
        let c = self.classes;
        let mut t = vec![0.0; idx.len() * c];
        for (b, &i) in idx.iter().enumerate() {
            t[b * c + self.labels[i]] = 1.0;
        }
        Tensor::matrix(idx.len(), c, t).expect("one-hot shape")
    }

    /// Rows per class, ordered by class index.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.classes];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }

    /// Re-draws the train/test split.
    pub fn resplit(&mut self, split: SplitSpec) -> Result<(), HarnessError> {
        let (train, test) = split_indices(self.len(), split)?;
        self.train = train;
        self.test = test;
        Ok(())
    }

    /// Z-scores each feature with statistics from the training rows only.
    pub fn standardize_features(&mut self) {
        let d = self.input_dim();
        let n = self.train.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for &i in &self.train {
            for (m, v) in mean.iter_mut().zip(self.x.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for &i in &self.train {
            for ((s, v), m) in var.iter_mut().zip(self.x.row(i)).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std: Vec<f64> = var.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        self.apply_norm(Normalization { mean, std });
    }

    /// One mean and deviation shared by every feature (training rows only).
    pub fn standardize_global(&mut self) {
        let d = self.input_dim();
        let vals = self.train.iter().flat_map(|&i| self.x.row(i).iter().copied());
        let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
        for v in vals {
            n += 1.0;
            sum += v;
            sq += v * v;
        }
        let mean = if n > 0.0 { sum / n } else { 0.0 };
        let var = if n > 0.0 { sq / n - mean * mean } else { 1.0 };
        let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
        self.apply_norm(Normalization { mean: vec![mean; d], std: vec![std; d] });
    }

    fn apply_norm(&mut self, norm: Normalization) {
        let d = self.input_dim();
        for (k, v) in self.x.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - norm.mean[j]) / norm.std[j];
        }
        self.norm = Some(norm);
    }

    /// Keeps only the first `limit` rows, then re-splits.
    pub fn truncate(&mut self, limit: usize, split: SplitSpec) -> Result<(), HarnessError> {
        if limit >= self.len() {
            return Ok(());
        }
        let d = self.input_dim();
        let data = self.x.data()[..limit * d].to_vec();
        self.x = Tensor::matrix(limit, d, data)?;
        self.labels.truncate(limit);
        self.resplit(split)
    }
}

/// Seeded shuffle, then the first `round(n·fraction)` rows become the test set.
pub fn split_indices(n: usize, split: SplitSpec) -> Result<(Vec<usize>, Vec<usize>), HarnessError> {
    if !(0.0..1.0).contains(&split.test_fraction) {
        return Err(HarnessError::Config(format!("test fraction must be in [0, 1), got {}", split.test_fraction)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(split.seed, STREAM_SPLIT));
    let n_test = (n as f64 * split.test_fraction).round() as usize;
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    Ok((train, test))
}

/// How to read a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvOptions {
    /// Header name or zero-based index of the label column.
    pub label: String,
    /// Columns expanded to one indicator feature per distinct value.
    pub categorical: Vec<String>,
    /// Expected class count, checked after loading.
    pub classes: Option<usize>,
    pub split: SplitSpec,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self { label: "species".into(), categorical: Vec::new(), classes: None, split: SplitSpec::default() }
    }
}

enum Column {
    Numeric(Vec<f64>),
    Categorical { values: Vec<String>, levels: Vec<String> },
}

/// Loads a comma-separated file with a header row. Numeric features are
/// z-scored using training-split statistics; labels are indexed in sorted
/// order of their distinct values.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<Dataset, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(BufReader::new(file));
    let headers: Vec<String> = rdr.headers().map_err(|e| HarnessError::Parse { line: 1, reason: e.to_string() })?.iter().map(String::from).collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(HarnessError::Parse { line: 1, reason: "empty file or missing header row".into() });
    }
    let col_index = |name: &str| -> Result<usize, HarnessError> {
        headers
            .iter()
            .position(|h| h == name)
            .or_else(|| name.parse::<usize>().ok().filter(|&i| i < headers.len()))
            .ok_or_else(|| HarnessError::Config(format!("column {name:?} not found; header is {headers:?}")))
    };
    let label_col = col_index(&opts.label)?;
    let categorical = opts.categorical.iter().map(|c| col_index(c)).collect::<Result<Vec<_>, _>>()?;

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| HarnessError::Parse { line, reason: e.to_string() })?;
        if rec.len() != headers.len() {
            return Err(HarnessError::Parse { line, reason: format!("expected {} fields, found {}", headers.len(), rec.len()) });
        }
        for (j, field) in rec.iter().enumerate() {
            if field.is_empty() {
                return Err(HarnessError::Parse { line, reason: format!("missing value in column {:?}", headers[j]) });
            }
            raw[j].push(field.to_string());
        }
    }
    let n = raw[label_col].len();
    if n == 0 {
        return Err(HarnessError::Parse { line: 2, reason: "no data rows".into() });
    }

    let mut columns = Vec::new();
    let mut feature_names = Vec::new();
    for (j, values) in raw.iter().enumerate() {
        if j == label_col {
            continue;
        }
        if categorical.contains(&j) {
            let levels: Vec<String> = values.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
            feature_names.extend(levels.iter().map(|l| format!("{}={l}", headers[j])));
            columns.push(Column::Categorical { values: values.clone(), levels });
        } else {
            let nums = values
                .iter()
                .enumerate()
                .map(|(r, v)| {
                    v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| HarnessError::Parse {
                        line: r + 2,
                        reason: format!("column {:?} value {v:?} is not numeric (declare it categorical to one-hot encode it)", headers[j]),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            feature_names.push(headers[j].clone());
            columns.push(Column::Numeric(nums));
        }
    }
    let d = feature_names.len();
    if d == 0 {
        return Err(HarnessError::Config("no feature columns besides the label".into()));
    }

    let mut data = vec![0.0; n * d];
    let mut numeric = vec![false; d];
    let mut offset = 0;
    for col in &columns {
        match col {
            Column::Numeric(v) => {
                numeric[offset] = true;
                for (r, x) in v.iter().enumerate() {
                    data[r * d + offset] = *x;
                }
                offset += 1;
            }
            Column::Categorical { values, levels } => {
                for (r, v) in values.iter().enumerate() {
                    let k = levels.binary_search(v).expect("level present");
                    data[r * d + offset + k] = 1.0;
                }
                offset += levels.len();
            }
        }
    }

    let class_names: Vec<String> = raw[label_col].iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let labels: Vec<usize> = raw[label_col].iter().map(|v| class_names.binary_search(v).expect("class present")).collect();
    let classes = class_names.len();
    if let Some(c) = opts.classes {
        if c != classes {
            return Err(HarnessError::Config(format!("expected {c} classes, found {classes}: {class_names:?}")));
        }
    }
    if classes < 2 {
        return Err(HarnessError::Config(format!("need at least 2 classes, found {classes}")));
    }

    let (train, test) = split_indices(n, opts.split)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut ds = Dataset { name, x: Tensor::matrix(n, d, data)?, labels, classes, class_names, feature_names, train, test, norm: None };
    ds.standardize_features();
    // Indicator columns stay 0/1.
    if let Some(norm) = ds.norm.as_mut() {
        let (mean, std) = (norm.mean.clone(), norm.std.clone());
        for (k, v) in ds.x.data_mut().iter_mut().enumerate() {
            let j = k % d;
            if !numeric[j] {
                *v = *v * std[j] + mean[j];
            }
        }
        for j in (0..d).filter(|&j| !numeric[j]) {
            norm.mean[j] = 0.0;
            norm.std[j] = 1.0;
        }
    }
    Ok(ds)
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut bytes = Vec::new();
    let res = if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)
    } else {
        BufReader::new(file).read_to_end(&mut bytes)
    };
    res.map_err(|e| HarnessError::io(path, e))?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, HarnessError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| HarnessError::Format(format!("{}: truncated IDX header", path.display())))
}

/// Reads an IDX image/label pair (optionally gzipped). Pixels are scaled to
/// `[0, 1]`; `limit` keeps the first rows only.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>, split: SplitSpec) -> Result<Dataset, HarnessError> {
    let img = open_maybe_gz(images)?;
    let lab = open_maybe_gz(labels)?;
    let magic = be_u32(&img, 0, images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(HarnessError::Format(format!("{}: image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}", images.display())));
    }
    let magic = be_u32(&lab, 0, labels)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(HarnessError::Format(format!("{}: label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}", labels.display())));
    }
    let n_img = be_u32(&img, 4, images)? as usize;
    let (rows, cols) = (be_u32(&img, 8, images)? as usize, be_u32(&img, 12, images)? as usize);
    let n_lab = be_u32(&lab, 4, labels)? as usize;
    if n_img != n_lab {
        return Err(HarnessError::Format(format!("{n_img} images but {n_lab} labels")));
    }
    let d = rows * cols;
    let n = limit.map_or(n_img, |l| l.min(n_img));
    let pixels = img.get(16..16 + n * d).ok_or_else(|| HarnessError::Format(format!("{}: fewer pixels than the header declares", images.display())))?;
    let raw_labels = lab.get(8..8 + n).ok_or_else(|| HarnessError::Format(format!("{}: fewer labels than the header declares", labels.display())))?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    let (train, test) = split_indices(n, split)?;
    Ok(Dataset {
        name: images.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        x: Tensor::matrix(n, d, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?,
        labels,
        classes,
        class_names: (0..classes).map(|c| c.to_string()).collect(),
        feature_names: (0..d).map(|k| format!("px{k}")).collect(),
        train,
        test,
        norm: None,
    })
}

/// Gaussian features with labels from a random linear map; used for timing
/// runs where accuracy does not matter.
pub fn synthetic(n: usize, d: usize, classes: usize, seed: u64) -> Dataset {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = seeded_rng(seed, STREAM_SPLIT);
    let w: Vec<f64> = (0..classes * d).map(|_| rng.sample(StandardNormal)).collect();
    let x: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let labels = (0..n)
        .map(|i| {
            let scores: Vec<f64> = (0..classes).map(|j| (0..d).map(|k| w[j * d + k] * x[i * d + k]).sum()).collect();
            crate::nn::loss::argmax(&scores)
        })
        .collect();
    Dataset {
        name: format!("synthetic-{d}"),
        x: Tensor::matrix(n, d, x).expect("shape"),
        labels,
        classes,
        class_names: (0..classes).map(|c| c.to_string()).collect(),
        feature_names: (0..d).map(|k| format!("f{k}")).collect(),
        train: (0..n).collect(),
        test: Vec::new(),
        norm: None,
    }
}
