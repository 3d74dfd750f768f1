//! Labeled datasets with samples as columns: CSV ingestion, one-hot
//! targets, feature normalization and synthetic Gaussian blobs.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `P x J` inputs.
    features: Matrix,
    /// `Q x J` one-hot targets.
    targets: Matrix,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.ncols() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature columns but {} labels",
                features.ncols(),
                labels.len()
            )));
        }
        if let Some((j, _)) = features
            .column_iter()
            .enumerate()
            .find(|(_, c)| c.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Data(format!("sample {j} has a non-finite feature")));
        }
        let targets = one_hot(&labels, classes)?;
        Ok(Self {
            features,
            targets,
            labels,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn classes(&self) -> usize {
        self.targets.nrows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_columns(indices),
            targets: self.targets.select_columns(indices),
            labels: indices.iter().map(|&j| self.labels[j]).collect(),
        }
    }

    /// Same labels, transformed features.
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.ncols() != self.len() {
            return Err(Error::Data(
                "transformed features changed the sample count".into(),
            ));
        }
        Self::new(features, self.labels.clone(), self.classes())
    }

    /// Number of samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// `Q x J` matrix with a single 1 per column at the sample's label.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    if classes == 0 {
        return Err(Error::Data("one-hot encoding needs Q >= 1".into()));
    }
    let mut t = Matrix::zeros(classes, labels.len());
    for (j, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data(format!(
                "sample {j} has label {l}, outside 0..{classes}"
            )));
        }
        t[(l, j)] = 1.0;
    }
    Ok(t)
}

/// Which column carries the label and how many classes there are. Every
/// other column is a feature, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub label_column: String,
    pub classes: usize,
}

impl CsvSchema {
    pub fn new(label_column: impl Into<String>, classes: usize) -> Self {
        Self {
            label_column: label_column.into(),
            classes,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(input: R, schema: &CsvSchema) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader.headers()?.clone();
    let label_idx = header
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| {
            Error::Data(format!(
                "label column '{}' not in header [{}]",
                schema.label_column,
                header.iter().collect::<Vec<_>>().join(", ")
            ))
        })?;
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&c| c != label_idx).collect();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // Row numbers are 1-based and count the header.
        let row = i + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: "*".into(),
                message: format!("{} fields, header has {}", rec.len(), header.len()),
            });
        }
        let raw = &rec[label_idx];
        let label: usize = raw.parse().map_err(|_| Error::Parse {
            row,
            column: schema.label_column.clone(),
            message: format!("label '{raw}' is not a non-negative integer"),
        })?;
        if label >= schema.classes {
            return Err(Error::Parse {
                row,
                column: schema.label_column.clone(),
                message: format!("label {label} outside 0..{}", schema.classes),
            });
        }
        labels.push(label);
        for &c in &feature_cols {
            let v: f64 = rec[c].parse().map_err(|e| Error::Parse {
                row,
                column: header[c].to_string(),
                message: format!("'{}': {e}", &rec[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: header[c].to_string(),
                    message: "non-finite feature".into(),
                });
            }
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::Data("CSV has no samples".into()));
    }
    // `values` holds samples contiguously, i.e. column-major for P x J.
    let features = Matrix::from_column_slice(feature_cols.len(), labels.len(), &values);
    LabeledDataset::new(features, labels, schema.classes)
}

/// Writes features as `x0..x{P-1}` followed by the label column.
pub fn write_csv<W: Write>(data: &LabeledDataset, out: W, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..data.input_dim()).map(|p| format!("x{p}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header)?;
    for (j, col) in data.features.column_iter().enumerate() {
        let mut rec: Vec<String> = col.iter().map(|v| v.to_string()).collect();
        rec.push(data.labels[j].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(data: &LabeledDataset, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    write_csv(data, std::fs::File::create(path)?, label_column)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    None,
    UnitNormPerSample,
    #[default]
    ZScorePerDim,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::UnitNormPerSample => "unit",
            Normalization::ZScorePerDim => "zscore",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Normalization::None),
            "unit" => Some(Normalization::UnitNormPerSample),
            "zscore" => Some(Normalization::ZScorePerDim),
            _ => None,
        }
    }
}

/// Statistics fitted on a training split, applied unchanged to any other split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub policy: Normalization,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Dimensions with zero variance; centred but not scaled.
    pub zero_variance_dims: Vec<usize>,
}

impl NormalizationStats {
    pub fn fit(policy: Normalization, x: &Matrix) -> Self {
        let p = x.nrows();
        let mut stats = Self {
            policy,
            mean: vec![0.0; p],
            scale: vec![1.0; p],
            zero_variance_dims: Vec::new(),
        };
        if policy != Normalization::ZScorePerDim || x.ncols() == 0 {
            return stats;
        }
        let j = x.ncols() as f64;
        for (d, row) in x.row_iter().enumerate() {
            let mean = row.sum() / j;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / j;
            stats.mean[d] = mean;
            if var > 0.0 {
                stats.scale[d] = var.sqrt();
            } else {
                stats.zero_variance_dims.push(d);
            }
        }
        if !stats.zero_variance_dims.is_empty() {
            log::warn!(
                "zero-variance input dimensions {:?} are centred but not scaled",
                stats.zero_variance_dims
            );
        }
        stats
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.nrows() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "normalization fitted on {} dims, input has {}",
                self.mean.len(),
                x.nrows()
            )));
        }
        let mut out = x.clone();
        match self.policy {
            Normalization::None => {}
            Normalization::UnitNormPerSample => {
                for mut col in out.column_iter_mut() {
                    let n = col.norm();
                    if n > 0.0 {
                        col /= n;
                    }
                }
            }
            Normalization::ZScorePerDim => {
                for (d, mut row) in out.row_iter_mut().enumerate() {
                    row.apply(|v| *v = (*v - self.mean[d]) / self.scale[d]);
                }
            }
        }
        Ok(out)
    }

    pub fn apply_dataset(&self, data: &LabeledDataset) -> Result<LabeledDataset> {
        data.with_features(self.apply(data.features())?)
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub input_dim: usize,
    pub classes: usize,
    pub samples: usize,
    pub separation: f64,
    pub seed: u64,
}

/// `Q` unit-variance Gaussian clusters. Class centres are `separation`
/// times a unit direction: the standard basis when `Q <= P`, otherwise
/// seeded random directions. Class sizes differ by at most one.
pub fn synthetic_blobs(spec: &BlobSpec) -> Result<LabeledDataset> {
    let BlobSpec {
        input_dim: p,
        classes: q,
        samples: j,
        separation,
        seed,
    } = *spec;
    if p == 0 || q == 0 {
        return Err(Error::Data("blobs need P >= 1 and Q >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..q)
        .map(|c| {
            if q <= p {
                (0..p).map(|d| if d == c { 1.0 } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                let n = v
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / n).collect()
            }
        })
        .collect();
    let mut labels: Vec<usize> = (0..j).map(|i| i % q).collect();
    labels.shuffle(&mut rng);
    let mut features = Matrix::zeros(p, j);
    for (s, &l) in labels.iter().enumerate() {
        for d in 0..p {
            let noise: f64 = rng.sample(StandardNormal);
            features[(d, s)] = separation * centres[l][d] + noise;
        }
    }
    LabeledDataset::new(features, labels, q)
}
