//! Tabular CSV ingestion and synthetic datasets.
//!
//! [`load_csv`] reads a delimited file with one label column (and optionally
//! an id column) and z-score normalizes every feature. [`gen_blobs`] and
//! [`gen_localization`] build seeded synthetic data so that every experiment
//! runs offline.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attribution::{GroundTruthMask, Instance};
use crate::error::{Error, Result};
use crate::seed;

/// Per-feature z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for constant columns.
    pub std: Vec<f64>,
    /// Columns whose raw values were all identical.
    pub constant_columns: Vec<usize>,
}

impl NormalizationStats {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyDataset)?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let mut constant_columns = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let sd = (s / n).sqrt();
                if rows.iter().all(|r| r[j] == first[j]) {
                    constant_columns.push(j);
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self {
            mean,
            std,
            constant_columns,
        })
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDataset {
    pub instances: Vec<Instance>,
    pub feature_names: Vec<String>,
    /// Original label strings, indexed by class id.
    pub class_names: Vec<String>,
    /// Applied to the raw values, if the data was normalized.
    pub normalization: Option<NormalizationStats>,
}

impl TabularDataset {
    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Layout of a delimited input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_true")]
    pub has_header: bool,
    /// Zero-based; defaults to the last column.
    #[serde(default)]
    pub label_column: Option<usize>,
    #[serde(default)]
    pub id_column: Option<usize>,
    /// Allowed label values. When absent, the observed labels are used.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
}

fn default_delimiter() -> char {
    ','
}

fn default_true() -> bool {
    true
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            delimiter: ',',
            has_header: true,
            label_column: None,
            id_column: None,
            classes: None,
        }
    }
}

/// Orders labels numerically when they all parse as numbers.
fn sort_labels(labels: &mut [String]) {
    if labels.iter().all(|l| l.parse::<f64>().is_ok()) {
        labels.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .total_cmp(&b.parse::<f64>().unwrap())
        });
    } else {
        labels.sort();
    }
}

/// Reads and z-score normalizes a labelled CSV file.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TabularDataset> {
    let path = path.as_ref();
    if !schema.delimiter.is_ascii() {
        return Err(Error::InvalidSchema(format!(
            "delimiter {:?} is not ASCII",
            schema.delimiter
        )));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header: Option<Vec<String>> = if schema.has_header {
        Some(reader.headers()?.iter().map(str::to_string).collect())
    } else {
        None
    };

    let mut raw_rows = Vec::new();
    let mut raw_labels = Vec::new();
    let mut width = header.as_ref().map(Vec::len);
    let mut layout: Option<(usize, Vec<usize>)> = None;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::RaggedRow {
                path: path.to_path_buf(),
                line,
                expected,
                found: record.len(),
            });
        }
        let (label_col, feature_cols) = match &layout {
            Some(l) => l,
            None => layout.insert(column_layout(schema, expected)?),
        };
        let mut row = Vec::with_capacity(feature_cols.len());
        for &c in feature_cols.iter() {
            let cell = &record[c];
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("column {c}: cannot parse {cell:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("column {c}: non-finite value {cell:?}"),
                });
            }
            row.push(v);
        }
        raw_labels.push((line, record[*label_col].to_string()));
        raw_rows.push(row);
    }
    let (_, feature_cols) = layout.ok_or(Error::EmptyDataset)?;

    let class_names = match &schema.classes {
        Some(classes) => classes.clone(),
        None => {
            let mut observed: Vec<String> = raw_labels
                .iter()
                .map(|(_, l)| l.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            sort_labels(&mut observed);
            observed
        }
    };
    let labels = raw_labels
        .iter()
        .map(|(line, l)| {
            class_names
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::UnknownLabel {
                    path: path.to_path_buf(),
                    line: *line,
                    label: l.clone(),
                })
        })
        .collect::<Result<Vec<_>>>()?;

    let stats = NormalizationStats::fit(&raw_rows)?;
    let instances = raw_rows
        .iter()
        .zip(labels)
        .map(|(row, y)| Instance::new(stats.normalize(row), Some(y)))
        .collect();
    let feature_names = feature_cols
        .iter()
        .map(|&c| match &header {
            Some(h) => h[c].clone(),
            None => format!("x{c}"),
        })
        .collect();
    Ok(TabularDataset {
        instances,
        feature_names,
        class_names,
        normalization: Some(stats),
    })
}

fn column_layout(schema: &CsvSchema, width: usize) -> Result<(usize, Vec<usize>)> {
    let label = schema.label_column.unwrap_or(width.saturating_sub(1));
    if label >= width {
        return Err(Error::InvalidSchema(format!(
            "label column {label} outside a {width}-column file"
        )));
    }
    if let Some(id) = schema.id_column {
        if id >= width || id == label {
            return Err(Error::InvalidSchema(format!(
                "id column {id} is invalid for a {width}-column file with label column {label}"
            )));
        }
    }
    let features: Vec<usize> = (0..width)
        .filter(|&c| c != label && Some(c) != schema.id_column)
        .collect();
    if features.is_empty() {
        return Err(Error::InvalidSchema("no feature columns".into()));
    }
    Ok((label, features))
}

const CENTER_ATTEMPTS_PER_CLASS: usize = 1_000;

/// Gaussian clusters (unit variance) around random class centers whose
/// pairwise distances are at least `separation`. Classes are assigned round
/// robin, so class sizes differ by at most one.
pub fn gen_blobs(
    dim: usize,
    classes: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<TabularDataset> {
    if dim == 0 || classes == 0 || n == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::GenerationFailed(format!("invalid separation {separation}")));
    }
    let mut rng = seed::rng(seed);
    // A box wide enough that a random packing of `classes` points is easy.
    let half_width = separation * (classes as f64).powf(1.0 / dim as f64).max(1.0);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while centers.len() < classes {
        attempts += 1;
        if attempts > CENTER_ATTEMPTS_PER_CLASS * classes {
            return Err(Error::GenerationFailed(format!(
                "could not place {classes} centers {separation} apart in {dim} dimensions"
            )));
        }
        let c: Vec<f64> = (0..dim)
            .map(|_| rng.random_range(-half_width..=half_width))
            .collect();
        let far = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= separation
        });
        if far {
            centers.push(c);
        }
    }
    let instances = (0..n)
        .map(|i| {
            let y = i % classes;
            let features = centers[y]
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + z
                })
                .collect();
            Instance::new(features, Some(y))
        })
        .collect();
    Ok(TabularDataset {
        instances,
        feature_names: (0..dim).map(|j| format!("x{j}")).collect(),
        class_names: (0..classes).map(|c| c.to_string()).collect(),
        normalization: None,
    })
}

/// Images on an `height × width` grid (row-major features) with a bright
/// square patch in one of the four corners; the corner is the class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationDataset {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub instances: Vec<Instance>,
    pub masks: Vec<GroundTruthMask>,
}

pub const LOCALIZATION_CLASSES: usize = 4;
const BACKGROUND_SD: f64 = 0.5;
const PATCH_LEVEL: f64 = 2.0;

impl LocalizationDataset {
    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn class_count(&self) -> usize {
        LOCALIZATION_CLASSES
    }

    /// Ground-truth mask of the patch for `class`.
    pub fn class_mask(height: usize, width: usize, patch: usize, class: usize) -> Vec<bool> {
        let (r0, c0) = match class {
            0 => (0, 0),
            1 => (0, width - patch),
            2 => (height - patch, 0),
            _ => (height - patch, width - patch),
        };
        let mut mask = vec![false; height * width];
        for r in r0..r0 + patch {
            for c in c0..c0 + patch {
                mask[r * width + c] = true;
            }
        }
        mask
    }
}

pub fn gen_localization(
    height: usize,
    width: usize,
    n: usize,
    patch: usize,
    seed: u64,
) -> Result<LocalizationDataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    // Corner patches must not overlap, or two classes would share a mask.
    if patch == 0 || 2 * patch > height.min(width) {
        return Err(Error::InvalidPatch {
            patch,
            height,
            width,
        });
    }
    let masks: Vec<GroundTruthMask> = (0..LOCALIZATION_CLASSES)
        .map(|c| GroundTruthMask::new(LocalizationDataset::class_mask(height, width, patch, c)))
        .collect::<Result<_>>()?;
    let mut rng = seed::rng(seed);
    let mut instances = Vec::with_capacity(n);
    let mut instance_masks = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % LOCALIZATION_CLASSES;
        let mask = &masks[y];
        let features = (0..height * width)
            .map(|f| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let level = if mask.contains(f) { PATCH_LEVEL } else { 0.0 };
                level + BACKGROUND_SD * z
            })
            .collect();
        instances.push(Instance::new(features, Some(y)));
        instance_masks.push(mask.clone());
    }
    Ok(LocalizationDataset {
        height,
        width,
        patch,
        instances,
        masks: instance_masks,
    })
}

/// Deterministic shuffled split into `(train, holdout)`.
pub fn train_holdout_split(
    instances: &[Instance],
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<Instance>, Vec<Instance>)> {
    let (train, holdout) = split_indices(instances.len(), holdout_fraction, seed)?;
    Ok((
        train.iter().map(|&i| instances[i].clone()).collect(),
        holdout.iter().map(|&i| instances[i].clone()).collect(),
    ))
}

/// Index form of [`train_holdout_split`], for data with side tables.
pub fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::InvalidSchema(format!(
            "holdout fraction {holdout_fraction} outside [0, 1)"
        )));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    let holdout_len = (n as f64 * holdout_fraction).round() as usize;
    let holdout = idx.split_off(n - holdout_len);
    Ok((idx, holdout))
}

/// Per-feature mean of a (training) split, for the `feature_mean` baseline.
pub fn feature_mean(instances: &[Instance]) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = instances.iter().map(|i| i.features.clone()).collect();
    Ok(NormalizationStats::fit(&rows)?.mean)
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        schema: CsvSchema,
    },
    Blobs {
        dim: usize,
        classes: usize,
        n: usize,
        separation: f64,
        seed: u64,
    },
    Localization {
        height: usize,
        width: usize,
        n: usize,
        patch: usize,
        seed: u64,
    },
}

/// Sidecar JSON describing a generated or loaded dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: DataSource,
    pub rows: usize,
    pub dim: usize,
    pub class_count: usize,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub normalization: Option<NormalizationStats>,
}

impl DatasetManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}
