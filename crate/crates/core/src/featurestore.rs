//! Feature bundles: loading, validation, persistence and base-split statistics.
//!
//! A bundle on disk is a JSON manifest next to a raw little-endian,
//! row-major binary of `n * d` scalars:
//!
//! ```json
//! {"version":1,"n":3,"d":2,"dtype":"f32","labels":["a","a","b"],"data_file":"features.bin"}
//! ```
//!
//! The manifest may also carry an optional `"split"` tag (`"base"`,
//! `"validation"` or `"novel"`). A path ending in `.csv` is read as
//! `label,v0,v1,...` rows instead.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("unsupported dtype {0:?} (expected \"f32\" or \"f64\")")]
    UnsupportedDtype(String),
    #[error("length mismatch in {field}: expected {expected}, found {found}")]
    LengthMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("bundle is empty")]
    Empty,
    #[error("malformed csv {path} line {line}: {message}")]
    Csv {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("expected a {expected} bundle, got {found}")]
    WrongSplit { expected: SplitTag, found: SplitTag },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Base,
    Validation,
    Novel,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitTag::Base => "base",
            SplitTag::Validation => "validation",
            SplitTag::Novel => "novel",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n: usize,
    pub d: usize,
    pub dtype: String,
    pub labels: Vec<String>,
    pub data_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitTag>,
}

/// A labeled N×D feature matrix.
///
/// Labels are opaque strings; `class_names[c]` is the name of dense class id
/// `c`, ids being assigned in order of first appearance.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    class_index: Vec<Vec<usize>>,
    split: SplitTag,
}

impl FeatureBundle {
    /// Builds a validated bundle from rows and string labels.
    pub fn new(
        features: DMatrix<f64>,
        labels: &[impl AsRef<str>],
        split: SplitTag,
    ) -> Result<Self, BundleError> {
        let n = features.nrows();
        if n == 0 || features.ncols() == 0 {
            return Err(BundleError::Empty);
        }
        if labels.len() != n {
            return Err(BundleError::LengthMismatch {
                field: "labels",
                expected: n,
                found: labels.len(),
            });
        }
        for row in 0..n {
            for col in 0..features.ncols() {
                if !features[(row, col)].is_finite() {
                    return Err(BundleError::NonFinite { row, col });
                }
            }
        }
        let mut ids: HashMap<&str, usize> = HashMap::new();
        let mut class_names = Vec::new();
        let mut class_index: Vec<Vec<usize>> = Vec::new();
        let mut dense = Vec::with_capacity(n);
        for (row, label) in labels.iter().enumerate() {
            let label = label.as_ref();
            let id = *ids.entry(label).or_insert_with(|| {
                class_names.push(label.to_string());
                class_index.push(Vec::new());
                class_names.len() - 1
            });
            class_index[id].push(row);
            dense.push(id);
        }
        Ok(Self {
            features,
            labels: dense,
            class_names,
            class_index,
            split,
        })
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    /// Replaces the feature matrix, keeping labels. Used after row-wise
    /// preprocessing.
    pub fn map_features(
        &self,
        features: DMatrix<f64>,
    ) -> Result<Self, BundleError> {
        if features.nrows() != self.n() {
            return Err(BundleError::LengthMismatch {
                field: "features",
                expected: self.n(),
                found: features.nrows(),
            });
        }
        let labels: Vec<&str> = self.labels.iter().map(|&c| self.class_names[c].as_str()).collect();
        FeatureBundle::new(features, &labels, self.split)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads a bundle from a manifest (or a `.csv` file).
///
/// The split tag comes from the manifest when present, otherwise it
/// defaults to [`SplitTag::Novel`]; callers re-tag with
/// [`FeatureBundle::with_split`].
pub fn load_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle, BundleError> {
    let path = path.as_ref();
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        return load_csv(path);
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| BundleError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(BundleError::UnsupportedVersion {
            found: manifest.version,
        });
    }
    let dtype = match manifest.dtype.as_str() {
        "f32" => Dtype::F32,
        "f64" => Dtype::F64,
        other => return Err(BundleError::UnsupportedDtype(other.to_string())),
    };
    if manifest.labels.len() != manifest.n {
        return Err(BundleError::LengthMismatch {
            field: "labels",
            expected: manifest.n,
            found: manifest.labels.len(),
        });
    }
    if manifest.n == 0 || manifest.d == 0 {
        return Err(BundleError::Empty);
    }
    let data_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.data_file);
    let bytes = fs::read(&data_path).map_err(io_err(&data_path))?;
    let row_bytes = manifest.d * dtype.width();
    if bytes.len() % row_bytes != 0 {
        return Err(BundleError::LengthMismatch {
            field: "data_file bytes",
            expected: manifest.n * row_bytes,
            found: bytes.len(),
        });
    }
    let rows = bytes.len() / row_bytes;
    if rows != manifest.n {
        return Err(BundleError::LengthMismatch {
            field: "data_file rows",
            expected: manifest.n,
            found: rows,
        });
    }
    let values: Vec<f64> = match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let features = DMatrix::from_row_slice(manifest.n, manifest.d, &values);
    FeatureBundle::new(features, &manifest.labels, manifest.split.unwrap_or(SplitTag::Novel))
}

fn load_csv(path: &Path) -> Result<FeatureBundle, BundleError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| BundleError::Csv {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim: Option<usize> = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| BundleError::Csv {
            path: path.to_path_buf(),
            line: line + 1,
            message: e.to_string(),
        })?;
        if record.len() < 2 {
            return Err(BundleError::Csv {
                path: path.to_path_buf(),
                line: line + 1,
                message: "expected label followed by at least one value".into(),
            });
        }
        let parsed: Result<Vec<f64>, _> = record.iter().skip(1).map(|s| s.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(row) => row,
            // A non-numeric first line is a header.
            Err(_) if line == 0 => continue,
            Err(e) => {
                return Err(BundleError::Csv {
                    path: path.to_path_buf(),
                    line: line + 1,
                    message: e.to_string(),
                })
            }
        };
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(BundleError::LengthMismatch {
                    field: "csv row width",
                    expected: d,
                    found: row.len(),
                })
            }
            _ => {}
        }
        labels.push(record[0].trim().to_string());
        values.extend(row);
    }
    let d = dim.ok_or(BundleError::Empty)?;
    let features = DMatrix::from_row_slice(labels.len(), d, &values);
    FeatureBundle::new(features, &labels, SplitTag::Novel)
}

/// Writes `bundle` as a manifest at `manifest_path` plus a sibling `.bin` file.
pub fn save_bundle(
    bundle: &FeatureBundle,
    manifest_path: impl AsRef<Path>,
    dtype: Dtype,
) -> Result<(), BundleError> {
    let manifest_path = manifest_path.as_ref();
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("features");
    let data_file = format!("{stem}.bin");
    let data_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&data_file);

    let mut bytes = Vec::with_capacity(bundle.n() * bundle.dim() * dtype.width());
    for row in bundle.features.row_iter() {
        for &v in row.iter() {
            match dtype {
                Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        n: bundle.n(),
        d: bundle.dim(),
        dtype: match dtype {
            Dtype::F32 => "f32".into(),
            Dtype::F64 => "f64".into(),
        },
        labels: bundle
            .labels
            .iter()
            .map(|&c| bundle.class_names[c].clone())
            .collect(),
        data_file,
        split: Some(bundle.split),
    };
    let mut f = fs::File::create(&data_path).map_err(io_err(&data_path))?;
    f.write_all(&bytes).map_err(io_err(&data_path))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(manifest_path, json).map_err(io_err(manifest_path))?;
    Ok(())
}

/// Grand mean, pooled within-class scatter and per-class means of a base split.
#[derive(Debug, Clone)]
pub struct BaseStatistics {
    pub mean: DVector<f64>,
    /// Σ_c Σ_{i∈c} (x_i − m_c)(x_i − m_c)ᵀ / N_base
    pub scatter: DMatrix<f64>,
    pub per_class_means: Vec<DVector<f64>>,
    pub class_names: Vec<String>,
}

impl BaseStatistics {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Statistics for features scaled by `c`: mean·c, scatter·c².
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            mean: &self.mean * c,
            scatter: &self.scatter * (c * c),
            per_class_means: self.per_class_means.iter().map(|m| m * c).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

pub fn compute_base_statistics(bundle: &FeatureBundle) -> Result<BaseStatistics, BundleError> {
    if bundle.split() != SplitTag::Base {
        return Err(BundleError::WrongSplit {
            expected: SplitTag::Base,
            found: bundle.split(),
        });
    }
    Ok(scatter_statistics(bundle.features(), bundle.class_index(), bundle.class_names()))
}

/// Within-class scatter of arbitrary rows grouped by `groups`, normalized by
/// the total row count.
pub fn scatter_statistics(
    features: &DMatrix<f64>,
    groups: &[Vec<usize>],
    class_names: &[String],
) -> BaseStatistics {
    let d = features.ncols();
    let n_total: usize = groups.iter().map(Vec::len).sum();
    let mut mean = DVector::zeros(d);
    let mut scatter = DMatrix::zeros(d, d);
    let mut per_class_means = Vec::with_capacity(groups.len());
    for rows in groups {
        let mut m = DVector::zeros(d);
        for &i in rows {
            m += features.row(i).transpose();
        }
        mean += &m;
        m /= rows.len().max(1) as f64;
        let mut centered = DMatrix::zeros(rows.len(), d);
        for (r, &i) in rows.iter().enumerate() {
            let dev = features.row(i) - m.transpose();
            centered.set_row(r, &dev);
        }
        scatter.gemm_tr(1.0, &centered, &centered, 1.0);
        per_class_means.push(m);
    }
    if n_total > 0 {
        mean /= n_total as f64;
        scatter /= n_total as f64;
    }
    // gemm_tr of a matrix with itself is symmetric up to round-off; make it exact.
    let scatter = (&scatter + scatter.transpose()) * 0.5;
    BaseStatistics {
        mean,
        scatter,
        per_class_means,
        class_names: class_names.to_vec(),
    }
}
