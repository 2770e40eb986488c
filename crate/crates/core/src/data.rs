//! Labelled datasets, CSV I/O, standardisation, and a seeded synthetic
//! before/after-drift task generator.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("a dataset needs at least one sample".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} not below class count {num_classes}")));
        }
        if !features.is_finite() {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Features and labels of the listed samples, in order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Matrix, Vec<usize>)> {
        let x = self.features.gather_rows(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Writes features followed by the label, with a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let header: Vec<String> = (0..self.feature_dim())
            .map(|j| format!("f{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        let mut line = String::new();
        for (r, label) in self.labels.iter().enumerate() {
            line.clear();
            for v in self.features.row(r) {
                // Display prints the shortest representation that round-trips
                line.push_str(&v.to_string());
                line.push(',');
            }
            line.push_str(&label.to_string());
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Last,
    Index(usize),
    Name(String),
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    /// `last`, a column index, or a header name.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "last" => Self::Last,
            _ => s.parse().map(Self::Index).unwrap_or_else(|_| Self::Name(s.to_string())),
        })
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    /// `label_values[c]` is the original label mapped to class `c`.
    pub label_values: Vec<i64>,
}

impl LoadedCsv {
    pub fn is_identity_mapping(&self) -> bool {
        self.label_values.iter().enumerate().all(|(c, &v)| v == c as i64)
    }
}

/// Reads a rectangular CSV with an optional header; labels are remapped to `0..C`
/// in ascending order of their original values.
pub fn load_csv(path: &Path, label_column: &LabelColumn) -> Result<LoadedCsv> {
    let parse_err = |row: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);

    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(i + 1, 0, e.to_string()))?;
        records.push(rec);
    }
    let Some(first) = records.first() else {
        return Err(parse_err(0, 0, "file is empty".into()));
    };
    let has_header = first.iter().any(|cell| cell.trim().parse::<f64>().is_err());
    let width = first.len();
    let label_idx = match label_column {
        LabelColumn::Last => width - 1,
        LabelColumn::Index(i) if *i < width => *i,
        LabelColumn::Index(i) => return Err(parse_err(1, *i + 1, format!("label column {i} beyond {width} columns"))),
        LabelColumn::Name(name) => {
            if !has_header {
                return Err(parse_err(1, 0, format!("label column '{name}' requested but file has no header")));
            }
            first
                .iter()
                .position(|c| c.trim() == name)
                .ok_or_else(|| parse_err(1, 0, format!("no column named '{name}'")))?
        }
    };
    if width < 2 {
        return Err(parse_err(1, 1, "need at least one feature column and a label column".into()));
    }
    let body = if has_header { &records[1..] } else { &records[..] };
    if body.is_empty() {
        return Err(parse_err(1, 0, "no data rows".into()));
    }
    let row_offset = if has_header { 2 } else { 1 };
    let mut features = Vec::with_capacity(body.len() * (width - 1));
    let mut raw_labels = Vec::with_capacity(body.len());
    for (r, rec) in body.iter().enumerate() {
        let row = r + row_offset;
        if rec.len() != width {
            return Err(parse_err(row, rec.len().min(width) + 1, format!("expected {width} columns, found {}", rec.len())));
        }
        for (c, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if c == label_idx {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(row, c + 1, format!("label '{cell}' is not a number")))?;
                if v.fract() != 0.0 || !v.is_finite() {
                    return Err(parse_err(row, c + 1, format!("label '{cell}' is not an integer")));
                }
                raw_labels.push(v as i64);
            } else {
                let v: f32 = cell
                    .parse()
                    .map_err(|_| parse_err(row, c + 1, format!("'{cell}' is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(row, c + 1, format!("non-finite value '{cell}'")));
                }
                features.push(v);
            }
        }
    }
    let label_values: Vec<i64> = raw_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let labels = raw_labels
        .iter()
        .map(|v| label_values.binary_search(v).expect("value collected above"))
        .collect();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let features = Matrix::from_vec(body.len(), width - 1, features)?;
    let dataset = Dataset::new(name, features, labels, label_values.len())?;
    Ok(LoadedCsv {
        dataset,
        label_values,
    })
}

/// Per-feature standardisation fitted on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Self {
        let x = train.features();
        let (rows, cols) = x.shape();
        let mut mean = vec![0.0f64; cols];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0f64; cols];
        for r in 0..rows {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var.iter().map(|&s| (s / rows as f64).sqrt() as f32).collect(),
        }
    }

    /// `(x − mean) / std`; constant features map to zero.
    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        if data.feature_dim() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "Standardizer::apply",
                left: data.features.shape(),
                right: (1, self.mean.len()),
            });
        }
        let cols = self.mean.len();
        for (j, v) in data.features.as_mut_slice().iter_mut().enumerate() {
            let c = j % cols;
            *v = if self.std[c] > 0.0 {
                (*v - self.mean[c]) / self.std[c]
            } else {
                0.0
            };
        }
        Ok(())
    }
}

/// Fits on `train`, then standardises `train` and every dataset in `others` with it.
pub fn normalize(train: &mut Dataset, others: &mut [&mut Dataset]) -> Result<Standardizer> {
    let s = Standardizer::fit(train);
    s.apply(train)?;
    for d in others.iter_mut() {
        s.apply(d)?;
    }
    Ok(s)
}

/// Parameters of the synthetic drift task: Gaussian class blobs before drift,
/// shifted and noisier blobs after.
///
/// A random shift direction is nearly orthogonal to every class center in high
/// dimensions and barely affects a trained classifier, so each center moves
/// along the line to its neighbour instead.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub pretrain_samples: usize,
    pub finetune_samples: usize,
    pub test_samples: usize,
    /// Norm of each class center.
    pub separation: f32,
    /// Per-feature standard deviation before drift.
    pub noise: f32,
    /// Distance each class center moves after drift, towards the next class's center.
    pub drift_shift: f32,
    /// Noise standard deviation multiplier after drift.
    pub drift_noise: f32,
    pub seed: u64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            feature_dim: 256,
            pretrain_samples: 470,
            finetune_samples: 470,
            test_samples: 470,
            separation: 8.0,
            noise: 1.0,
            drift_shift: 8.0,
            drift_noise: 1.5,
            seed: 0,
        }
    }
}

impl DriftSpec {
    pub fn validate(&self) -> Result<()> {
        let splits = [self.pretrain_samples, self.finetune_samples, self.test_samples];
        if self.num_classes < 2 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument("need at least 2 classes and 1 feature".into()));
        }
        if splits.iter().any(|&s| s < self.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "every split needs at least one sample per class, got {splits:?} for {} classes",
                self.num_classes
            )));
        }
        let params = [self.separation, self.noise, self.drift_shift, self.drift_noise];
        if params.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!("drift parameters must be finite and non-negative: {params:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DriftSplits {
    pub pretrain: Dataset,
    pub finetune: Dataset,
    pub test: Dataset,
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize, norm: f32) -> Vec<f32> {
    let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let len = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
    v.into_iter().map(|x| x * norm / len).collect()
}

fn sample_split(
    rng: &mut ChaCha8Rng,
    name: &str,
    count: usize,
    centers: &[Vec<f32>],
    noise: f32,
) -> Result<Dataset> {
    let dim = centers[0].len();
    let mut labels: Vec<usize> = (0..count).map(|j| j % centers.len()).collect();
    labels.shuffle(rng);
    let mut features = Vec::with_capacity(count * dim);
    for &c in &labels {
        for &mu in &centers[c] {
            let z: f32 = StandardNormal.sample(rng);
            features.push(mu + noise * z);
        }
    }
    Dataset::new(name, Matrix::from_vec(count, dim, features)?, labels, centers.len())
}

pub fn gen_drifted(spec: &DriftSpec) -> Result<DriftSplits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f32>> = (0..spec.num_classes)
        .map(|_| random_direction(&mut rng, spec.feature_dim, spec.separation))
        .collect();
    let drifted: Vec<Vec<f32>> = (0..spec.num_classes)
        .map(|c| {
            let (from, to) = (&centers[c], &centers[(c + 1) % spec.num_classes]);
            let dir: Vec<f32> = to.iter().zip(from).map(|(t, f)| t - f).collect();
            let len = dir.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
            from.iter()
                .zip(&dir)
                .map(|(f, d)| f + spec.drift_shift * d / len)
                .collect()
        })
        .collect();
    let after_noise = spec.noise * spec.drift_noise;
    Ok(DriftSplits {
        pretrain: sample_split(&mut rng, "pretrain", spec.pretrain_samples, &centers, spec.noise)?,
        finetune: sample_split(&mut rng, "finetune", spec.finetune_samples, &drifted, after_noise)?,
        test: sample_split(&mut rng, "test", spec.test_samples, &drifted, after_noise)?,
    })
}
