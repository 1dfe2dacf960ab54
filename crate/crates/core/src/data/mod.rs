//! Dataset schema, CSV ingestion, standard scaling, log-target transform
//! and chronological splitting.

mod synthetic;

pub use synthetic::{
    generate_synthetic, mixing_logit, oracle_nll, row_oracle_log_density, ComponentTruth,
    EntityTruth, GroundTruth, MixingRule, SyntheticGenConfig,
};

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{FeatureVector, Sample};

/// Floor substituted for the standard deviation of constant features.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub variant_names: Vec<String>,
    pub invariant_names: Vec<String>,
    pub target_name: String,
    pub entity_key_name: String,
    pub time_name: String,
}

impl FeatureSchema {
    /// Ten time-variant and four time-invariant features of a taxi-stand
    /// passage-time dataset.
    pub fn taxi_stand() -> Self {
        let s = |v: &[&str]| v.iter().map(|n| n.to_string()).collect();
        Self {
            variant_names: s(&[
                "hour_sin",
                "hour_cos",
                "dow_sin",
                "dow_cos",
                "count_15m",
                "count_30m",
                "count_60m",
                "avg_duration_15m",
                "avg_duration_30m",
                "avg_duration_60m",
            ]),
            invariant_names: s(&["latitude", "longitude", "segment_length", "total_count"]),
            target_name: "duration".into(),
            entity_key_name: "entity_key".into(),
            time_name: "time".into(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.variant_names.len() + self.invariant_names.len()
    }

    /// Feature names in vector order: variant, then invariant.
    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.variant_names
            .iter()
            .chain(&self.invariant_names)
            .map(String::as_str)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self.feature_names().chain([
            self.target_name.as_str(),
            self.entity_key_name.as_str(),
            self.time_name.as_str(),
        ]) {
            if !seen.insert(name) {
                return Err(Error::Schema(format!("duplicate column name `{name}`")));
            }
        }
        if self.n_features() == 0 {
            return Err(Error::Schema("schema has no features".into()));
        }
        Ok(())
    }

    /// CSV header: entity key, time, features, target.
    pub fn header(&self) -> Vec<String> {
        let mut h = vec![self.entity_key_name.clone(), self.time_name.clone()];
        h.extend(self.feature_names().map(String::from));
        h.push(self.target_name.clone());
        h
    }
}

/// One unscaled record; `features` follows schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub entity_key: String,
    pub time: f64,
    pub features: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub schema: FeatureSchema,
    pub rows: Vec<RawRow>,
}

fn parse_cell(text: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = text.trim().parse().map_err(|_| Error::Cell {
        row,
        column: column.to_string(),
        message: format!("non-numeric value `{text}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Cell {
            row,
            column: column.to_string(),
            message: format!("non-finite value `{text}`"),
        });
    }
    Ok(v)
}

/// Reads a headered CSV, locating columns by name. Row numbers in errors are
/// 1-based data rows.
pub fn load_dataset(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<RawDataset> {
    schema.validate()?;
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyFile);
    }
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let find = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let key_col = find(&schema.entity_key_name)?;
    let time_col = find(&schema.time_name)?;
    let target_col = find(&schema.target_name)?;
    let feature_cols = schema
        .feature_names()
        .map(|n| find(n).map(|i| (n.to_string(), i)))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |col: usize| record.get(col).unwrap_or("");
        let features = feature_cols
            .iter()
            .map(|(name, col)| parse_cell(cell(*col), row, name))
            .collect::<Result<Vec<_>>>()?;
        rows.push(RawRow {
            entity_key: cell(key_col).to_string(),
            time: parse_cell(cell(time_col), row, &schema.time_name)?,
            features,
            target: parse_cell(cell(target_col), row, &schema.target_name)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile);
    }
    Ok(RawDataset {
        schema: schema.clone(),
        rows,
    })
}

pub fn write_dataset(path: impl AsRef<Path>, data: &RawDataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(data.schema.header())?;
    let mut record = Vec::with_capacity(data.schema.n_features() + 3);
    for row in &data.rows {
        record.clear();
        record.push(row.entity_key.clone());
        record.push(row.time.to_string());
        record.extend(row.features.iter().map(f64::to_string));
        record.push(row.target.to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-feature mean and population standard deviation, fitted on the train
/// split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn fit(rows: &[RawRow]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptySplit("train"))?;
        let n_features = first.features.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; n_features];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(&row.features) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; n_features];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(&row.features).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < STD_FLOOR {
                    STD_FLOOR
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Standardized feature vector split into its two segments.
    pub fn apply(&self, schema: &FeatureSchema, row: &RawRow) -> Result<FeatureVector> {
        if row.features.len() != self.len() {
            return Err(Error::Schema(format!(
                "row has {} features, scaler expects {}",
                row.features.len(),
                self.len()
            )));
        }
        let mut variant = self.transform(&row.features);
        let invariant = variant.split_off(schema.variant_names.len());
        Ok(FeatureVector {
            variant,
            invariant,
            entity_key: row.entity_key.clone(),
        })
    }
}

/// Natural log of a strictly positive target.
pub fn transform_target(y_raw: f64) -> Result<f64> {
    if !(y_raw > 0.0) || !y_raw.is_finite() {
        return Err(Error::NonPositiveTarget(y_raw));
    }
    Ok(y_raw.ln())
}

pub fn inverse_target(y: f64) -> f64 {
    y.exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitBoundaries {
    /// Train is `time < valid_start`, valid is `valid_start <= time < test_start`.
    Time { valid_start: f64, test_start: f64 },
    /// Cut points as fractions of the row count; ties in time are assigned by
    /// row index.
    Fraction { valid: f64, test: f64 },
}

impl SplitBoundaries {
    /// Days 14 and 21 of a 28-day window, in seconds.
    pub fn default_days() -> Self {
        SplitBoundaries::Time {
            valid_start: 14.0 * 86_400.0,
            test_start: 21.0 * 86_400.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSplit {
    pub train: Vec<RawRow>,
    pub valid: Vec<RawRow>,
    pub test: Vec<RawRow>,
}

/// Contiguous chronological split of rows already ordered by time.
pub fn temporal_split(rows: &[RawRow], boundaries: SplitBoundaries) -> Result<RawSplit> {
    for (i, pair) in rows.windows(2).enumerate() {
        if pair[1].time < pair[0].time {
            return Err(Error::Unordered { row: i + 2 });
        }
    }
    let n = rows.len();
    let (a, b) = match boundaries {
        SplitBoundaries::Time {
            valid_start,
            test_start,
        } => {
            if !(valid_start < test_start) {
                return Err(Error::Config("split boundaries must increase".into()));
            }
            (
                rows.partition_point(|r| r.time < valid_start),
                rows.partition_point(|r| r.time < test_start),
            )
        }
        SplitBoundaries::Fraction { valid, test } => {
            if !(0.0 < valid && valid < test && test < 1.0) {
                return Err(Error::Config(
                    "split fractions must satisfy 0 < valid < test < 1".into(),
                ));
            }
            (
                (valid * n as f64).floor() as usize,
                (test * n as f64).floor() as usize,
            )
        }
    };
    let split = RawSplit {
        train: rows[..a].to_vec(),
        valid: rows[a..b].to_vec(),
        test: rows[b..].to_vec(),
    };
    for (name, part) in [
        ("train", &split.train),
        ("valid", &split.valid),
        ("test", &split.test),
    ] {
        if part.is_empty() {
            return Err(Error::EmptySplit(name));
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub schema: FeatureSchema,
    pub scaler: Scaler,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn to_samples(schema: &FeatureSchema, scaler: &Scaler, rows: &[RawRow]) -> Result<Vec<Sample>> {
    rows.iter()
        .map(|r| {
            Ok(Sample {
                x: scaler.apply(schema, r)?,
                y: transform_target(r.target)?,
            })
        })
        .collect()
}

impl SplitDataset {
    /// Fits the scaler on train and standardizes / log-transforms all splits.
    pub fn prepare(schema: &FeatureSchema, split: &RawSplit) -> Result<Self> {
        let scaler = Scaler::fit(&split.train)?;
        Self::with_scaler(schema, scaler, split)
    }

    pub fn with_scaler(schema: &FeatureSchema, scaler: Scaler, split: &RawSplit) -> Result<Self> {
        Ok(Self {
            train: to_samples(schema, &scaler, &split.train)?,
            valid: to_samples(schema, &scaler, &split.valid)?,
            test: to_samples(schema, &scaler, &split.test)?,
            schema: schema.clone(),
            scaler,
        })
    }
}
