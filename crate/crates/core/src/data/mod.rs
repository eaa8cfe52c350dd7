//! Dataset container and the pre-processing steps applied to it: forward
//! fill, chronological split, and train-fitted standard scaling.

mod kmeans;
mod pipeline;
mod raw;
mod synth;

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robustness::PerturbationRecord;

pub use kmeans::{kmeans_cluster, kmeans_fixed, silhouette_score, KMeansConfig, KMeansResult};
pub use pipeline::{drift_summary, preprocess_dir, PreprocessOptions, PreprocessOutput, SiteSeries};
pub use raw::{aggregate_by_unit, read_cell_map, read_raw_csv, write_raw_csv, RawRecord, BIN_MINUTES};
pub use synth::{synth_generate, synth_parts, synth_raw_sites, DriftProfile, SynthParts, SynthSpec};

pub const DATASET_FORMAT: &str = "ncpwatt-dataset";

/// Row ranges of the chronological split. Rows between the two ranges are
/// used by neither.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub test: Range<usize>,
}

/// Default split fractions: first 65% for training, last 30% for testing.
pub const TRAIN_FRACTION: f64 = 0.65;
pub const TEST_FRACTION: f64 = 0.30;

/// `train = [0, ⌊train_fraction·T⌋)`, `test = [T − ⌊test_fraction·T⌋, T)`.
pub fn chrono_split(rows: usize, train_fraction: f64, test_fraction: f64) -> Result<Split> {
    if rows < 20 {
        return Err(Error::data(format!("need at least 20 rows to split, got {rows}")));
    }
    let valid = |f: f64| f > 0.0 && f < 1.0;
    if !valid(train_fraction) || !valid(test_fraction) || train_fraction + test_fraction > 1.0 + 1e-12 {
        return Err(Error::config(
            "split",
            format!("fractions {train_fraction}/{test_fraction} must be in (0, 1) and sum to at most 1"),
        ));
    }
    let train_end = (train_fraction * rows as f64 + 1e-9).floor() as usize;
    let test_len = (test_fraction * rows as f64 + 1e-9).floor() as usize;
    let test_start = (rows - test_len).max(train_end);
    Ok(Split {
        train: 0..train_end,
        test: test_start..rows,
    })
}

/// Replaces each missing value with the previous present value; leading
/// gaps take the first present value.
pub fn forward_fill(series: &[Option<f64>]) -> Result<Vec<f64>> {
    let first = series
        .iter()
        .flatten()
        .next()
        .copied()
        .ok_or_else(|| Error::data("cannot forward-fill a series with no values"))?;
    let mut last = first;
    Ok(series
        .iter()
        .map(|v| {
            if let Some(x) = v {
                last = *x;
            }
            last
        })
        .collect())
}

/// Per-column mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnScaler {
    /// Fits on the given rows; constant columns get `std = 1`.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::data("cannot fit a scaler on an empty train split"));
        }
        let cols = rows[0].len();
        let mut mean = vec![0.0; cols];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; cols];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .enumerate()
            .map(|(c, s)| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    log::warn!("column {c} is constant on the train split; using std = 1");
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn transform_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn inverse_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = *v * s + m;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub features: ColumnScaler,
    pub target: ColumnScaler,
}

/// Multivariate time series with a scalar regression target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub format: String,
    pub feature_names: Vec<String>,
    pub timestamps: Vec<String>,
    /// `T` rows of `F` features.
    pub features: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default)]
    pub scaler: Option<Scaler>,
    #[serde(default)]
    pub perturbation: Option<PerturbationRecord>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(feature_names: Vec<String>, timestamps: Vec<String>, features: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self> {
        let ds = Self {
            format: DATASET_FORMAT.into(),
            feature_names,
            timestamps,
            features,
            target,
            split: None,
            scaler: None,
            perturbation: None,
            metadata: BTreeMap::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.target.len();
        if self.features.len() != t || self.timestamps.len() != t {
            return Err(Error::data(format!(
                "dataset has {} feature rows, {} targets, {} timestamps",
                self.features.len(),
                t,
                self.timestamps.len()
            )));
        }
        let f = self.feature_names.len();
        if let Some((i, r)) = self.features.iter().enumerate().find(|(_, r)| r.len() != f) {
            return Err(Error::data(format!("row {i} has {} features, expected {f}", r.len())));
        }
        let finite = self.features.iter().flatten().chain(&self.target).all(|v| v.is_finite());
        if !finite {
            return Err(Error::data("dataset contains missing or non-finite values"));
        }
        if let Some(s) = &self.split {
            if s.train.end > s.test.start || s.test.end > t {
                return Err(Error::data("split ranges out of order or out of bounds"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    pub fn split(&self) -> Result<&Split> {
        self.split.as_ref().ok_or_else(|| Error::data("dataset has not been split"))
    }

    pub fn rows(&self, range: Range<usize>) -> impl Iterator<Item = &[f64]> {
        self.features[range].iter().map(|r| r.as_slice())
    }

    /// Splits chronologically and standardizes features and target with
    /// statistics of the train rows only.
    pub fn prepare(mut self, train_fraction: f64, test_fraction: f64) -> Result<Self> {
        if self.scaler.is_some() {
            return Err(Error::data("dataset is already scaled"));
        }
        let split = chrono_split(self.len(), train_fraction, test_fraction)?;
        let features = ColumnScaler::fit(&self.features[split.train.clone()])?;
        let target_rows: Vec<Vec<f64>> = self.target[split.train.clone()].iter().map(|&y| vec![y]).collect();
        let target = ColumnScaler::fit(&target_rows)?;
        for row in &mut self.features {
            features.transform_row(row);
        }
        for y in &mut self.target {
            let mut v = [*y];
            target.transform_row(&mut v);
            *y = v[0];
        }
        self.split = Some(split);
        self.scaler = Some(Scaler { features, target });
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ds: Dataset = crate::io::read_json(path)?;
        if ds.format != DATASET_FORMAT {
            return Err(Error::data(format!("{}: not a dataset file (format `{}`)", path.display(), ds.format)));
        }
        ds.validate()?;
        Ok(ds)
    }

    /// Content hash used to key experiment runs.
    pub fn fingerprint(&self) -> Result<String> {
        crate::io::stable_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        let s = chrono_split(8000, 0.65, 0.30).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (5200, 2400));
        let s = chrono_split(100, 0.65, 0.30).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.test.start - s.train.end), (65, 30, 5));
        let s = chrono_split(100, 0.65, 0.35).unwrap();
        assert_eq!(s.train.end, s.test.start);
        assert!(chrono_split(19, 0.65, 0.3).is_err());
        assert!(chrono_split(100, 0.8, 0.3).is_err());
    }

    #[test]
    fn forward_fill_examples() {
        assert_eq!(forward_fill(&[Some(1.0), None, Some(3.0)]).unwrap(), vec![1.0, 1.0, 3.0]);
        assert_eq!(forward_fill(&[None, Some(2.0), None, None]).unwrap(), vec![2.0; 4]);
        assert_eq!(forward_fill(&[Some(4.0), Some(5.0)]).unwrap(), vec![4.0, 5.0]);
        assert!(forward_fill(&[None, None]).is_err());
    }

    #[test]
    fn scaling_uses_population_std() {
        let s = ColumnScaler::fit(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let mut rows = [[1.0], [2.0], [3.0]];
        rows.iter_mut().for_each(|r| s.transform_row(r));
        let e = 1.224744871391589;
        assert!((rows[0][0] + e).abs() < 1e-12 && rows[1][0] == 0.0 && (rows[2][0] - e).abs() < 1e-12);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let s = ColumnScaler::fit(&[vec![4.0], vec![4.0]]).unwrap();
        assert_eq!(s.std, vec![1.0]);
        let mut r = [4.0];
        s.transform_row(&mut r);
        assert_eq!(r, [0.0]);
    }

    #[test]
    fn empty_train_split_is_an_error() {
        assert!(ColumnScaler::fit(&[]).is_err());
    }
}
