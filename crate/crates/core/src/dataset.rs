//! Labelled feature matrices: CSV ingestion, synthetic clusters, splitting.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// Features in `[-1, 1]` with labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub tag: SplitTag,
}

impl DatasetSplit {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize, tag: SplitTag) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if num_classes < 2 {
            return Err(Error::domain("a dataset needs at least 2 classes"));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::domain(format!("label {bad} outside [0, {num_classes})")));
        }
        if features.data().iter().any(|v| v.abs() > 1.0) {
            return Err(Error::domain("features must lie within [-1, 1]"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            tag,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn select(&self, indices: &[usize], tag: SplitTag) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            tag,
        }
    }

    /// Writes a header `f0..f{k-1},label` and one row per sample.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header: Vec<String> = (0..self.input_dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for (row, y) in self.features.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Reads a headed CSV of query rows. A column named `label` is ignored.
/// Values are not range-checked: queries may come from anywhere.
pub fn read_queries(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            col: 0,
            message: e.to_string(),
        })?
        .clone();
    let skip = headers.iter().position(|h| h == "label");
    let k = headers.len() - usize::from(skip.is_some());
    if k == 0 {
        return Err(Error::Parse {
            row: 1,
            col: 0,
            message: "no feature columns".into(),
        });
    }
    let mut data = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            col: 0,
            message: e.to_string(),
        })?;
        for (c, cell) in record.iter().enumerate().filter(|(c, _)| Some(*c) != skip) {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                col: c + 1,
                message: format!("{cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    col: c + 1,
                    message: format!("{cell:?} is not finite"),
                });
            }
            data.push(v);
        }
    }
    Matrix::new(data.len() / k, k, data)
}

/// Per-column minimum and maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanges {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureRanges {
    pub fn of(data: &Matrix) -> Self {
        let mut min = vec![f64::INFINITY; data.cols()];
        let mut max = vec![f64::NEG_INFINITY; data.cols()];
        for row in data.iter_rows() {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self { min, max }
    }

    /// Maps `[min, max]` onto `[-1, 1]`, clipping values outside the range.
    /// Constant columns map to 0.
    pub fn rescale(&self, data: &Matrix) -> Result<Matrix> {
        if data.cols() != self.min.len() {
            return Err(Error::shape("feature ranges do not match the column count"));
        }
        let mut out = data.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                let (lo, hi) = (self.min[j], self.max[j]);
                *v = if hi > lo {
                    (2.0 * (*v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
                } else {
                    0.0
                };
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub enum Rescale {
    /// Values must already lie in `[-1, 1]`.
    #[default]
    None,
    /// Fit ranges on this file.
    Fit,
    /// Apply previously fitted ranges.
    Using(FeatureRanges),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub label_column: String,
    /// Subtracted from every raw label, e.g. 1 for labels numbered from one.
    pub label_offset: i64,
    /// Inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
    pub rescale: Rescale,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".into(),
            label_offset: 0,
            num_classes: None,
            rescale: Rescale::None,
        }
    }
}

/// Reads a headed CSV where every column but the label is a feature.
/// Rows and columns in errors are 1-based file positions.
/// Returns the split and the feature ranges it was scaled with (or the raw
/// ranges when no rescaling was requested).
pub fn ingest_csv(path: &Path, schema: &CsvSchema, tag: SplitTag) -> Result<(DatasetSplit, FeatureRanges)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            col: 0,
            message: e.to_string(),
        })?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| Error::Parse {
            row: 1,
            col: 0,
            message: format!("no column named {:?}", schema.label_column),
        })?;
    let k = headers.len() - 1;
    if k == 0 {
        return Err(Error::Parse {
            row: 1,
            col: 0,
            message: "no feature columns".into(),
        });
    }
    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            col: 0,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                col: 0,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let bad = |message: String| Error::Parse {
                row,
                col: c + 1,
                message,
            };
            if c == label_col {
                let y: i64 = cell.parse().map_err(|_| bad(format!("label {cell:?} is not an integer")))?;
                raw_labels.push(y - schema.label_offset);
            } else {
                let v: f64 = cell.parse().map_err(|_| bad(format!("{cell:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(bad(format!("{cell:?} is not finite")));
                }
                data.push(v);
            }
        }
    }
    let n = raw_labels.len();
    if n == 0 {
        return Err(Error::domain(format!("{} has no data rows", path.display())));
    }
    if let Some(bad) = raw_labels.iter().find(|&&y| y < 0) {
        return Err(Error::domain(format!("label {bad} is negative after offset")));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&y| y as usize).collect();
    let num_classes = schema
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let raw = Matrix::new(n, k, data)?;
    let (features, ranges) = match &schema.rescale {
        Rescale::None => {
            let ranges = FeatureRanges::of(&raw);
            (raw, ranges)
        }
        Rescale::Fit => {
            let ranges = FeatureRanges::of(&raw);
            (ranges.rescale(&raw)?, ranges)
        }
        Rescale::Using(ranges) => (ranges.rescale(&raw)?, ranges.clone()),
    };
    Ok((DatasetSplit::new(features, labels, num_classes, tag)?, ranges))
}

/// Gaussian class clusters sharing a low-rank within-class covariance.
///
/// The default mimics a 561-feature, 6-activity sensor set: most features sit
/// near the bottom of the scaled range, and the classes form a low group and a
/// lifted group (static and moving activities).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub features: usize,
    pub samples: usize,
    /// Within-class scale; 0 puts every sample on its centroid.
    pub spread: f64,
    /// Rank of the shared within-class factor structure.
    pub factors: usize,
    /// Standard deviation of each centroid's offset from the shared base.
    pub separation: f64,
    /// Range of the shared per-feature base level.
    pub base: [f64; 2],
    /// Classes are split into this many contiguous groups.
    pub groups: usize,
    /// Added to every centroid coordinate once per group index.
    pub group_offset: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            features: 561,
            samples: 3000,
            spread: 0.2,
            factors: 8,
            separation: 0.1,
            base: [-1.0, -0.8],
            groups: 2,
            group_offset: 0.4,
        }
    }
}

/// Balanced classes (`samples / classes` each, remainder to the lowest
/// labels), features clipped to `[-1, 1]`.
pub fn make_synthetic(cfg: &SyntheticConfig, rng: &mut Rng) -> Result<DatasetSplit> {
    if cfg.classes < 2 || cfg.features == 0 || cfg.samples < cfg.classes {
        return Err(Error::domain("synthetic data needs C ≥ 2, k ≥ 1 and n ≥ C"));
    }
    if !(cfg.spread >= 0.0 && cfg.separation >= 0.0) {
        return Err(Error::domain("spread and separation must be non-negative"));
    }
    if !(-1.0 <= cfg.base[0] && cfg.base[0] <= cfg.base[1] && cfg.base[1] <= 1.0) {
        return Err(Error::domain("base range must be an ordered sub-interval of [-1, 1]"));
    }
    if cfg.groups == 0 || cfg.groups > cfg.classes {
        return Err(Error::domain("groups must lie in 1..=C"));
    }
    let (k, r) = (cfg.features, cfg.factors);
    let base: Vec<f64> = (0..k)
        .map(|_| {
            if cfg.base[1] > cfg.base[0] {
                rng.range(cfg.base[0], cfg.base[1])
            } else {
                cfg.base[0]
            }
        })
        .collect();
    let centroids: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|c| {
            let lift = (c * cfg.groups / cfg.classes) as f64 * cfg.group_offset;
            base.iter().map(|b| b + lift + cfg.separation * rng.normal()).collect()
        })
        .collect();
    let loading_scale = if r > 0 { 1.0 / (r as f64).sqrt() } else { 0.0 };
    let loadings: Vec<f64> = (0..k * r).map(|_| rng.normal() * loading_scale).collect();
    let mut data = Vec::with_capacity(cfg.samples * k);
    let mut labels = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let class = i % cfg.classes;
        let s: Vec<f64> = (0..r).map(|_| rng.normal()).collect();
        for (j, mu) in centroids[class].iter().enumerate() {
            let shared: f64 = (0..r).map(|f| loadings[j * r + f] * s[f]).sum();
            let noise = 0.5 * rng.normal();
            data.push((mu + cfg.spread * (shared + noise)).clamp(-1.0, 1.0));
        }
        labels.push(class);
    }
    DatasetSplit::new(Matrix::new(cfg.samples, k, data)?, labels, cfg.classes, SplitTag::Train)
}

/// Random split with `round(test_fraction · n)` test rows.
pub fn train_test_split(
    data: &DatasetSplit,
    test_fraction: f64,
    rng: &mut Rng,
) -> Result<(DatasetSplit, DatasetSplit)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::domain("test fraction must lie in (0, 1)"));
    }
    let n = data.len();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::domain("split leaves an empty side"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let (test, train) = order.split_at(n_test);
    Ok((data.select(train, SplitTag::Train), data.select(test, SplitTag::Test)))
}
