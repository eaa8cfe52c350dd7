//! Directory ingestion: per-site CSVs to one scaled, split dataset.
//!
//! Each site file is read and aggregated to radio-unit level independently.
//! Every unit series is laid on a gap-free 15-minute grid and forward
//! filled. Units are clustered on a drift summary, and the units of the
//! lowest-drift cluster are summed per timestamp into one series.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans_cluster, kmeans_fixed, KMeansConfig, KMeansResult};
use super::raw::{aggregate_by_unit, format_timestamp, read_cell_map, read_raw_csv, BIN_MINUTES};
use super::{forward_fill, Dataset, TEST_FRACTION, TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::robustness::ks_2samp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub cell_map: Option<PathBuf>,
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub kmeans: KMeansConfig,
    /// Skips silhouette selection and uses this `k`.
    pub forced_k: Option<usize>,
    /// Keep only the lowest-drift cluster; otherwise all units are used.
    pub select_low_drift: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            cell_map: None,
            train_fraction: TRAIN_FRACTION,
            test_fraction: TEST_FRACTION,
            kmeans: KMeansConfig::default(),
            forced_k: None,
            select_low_drift: true,
        }
    }
}

/// One radio unit on a gap-free grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSeries {
    pub site_id: String,
    pub unit_id: String,
    pub timestamps: Vec<DateTime<Utc>>,
    pub counter_names: Vec<String>,
    /// Rows of counters, forward filled.
    pub features: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PreprocessOutput {
    /// Scaled and split.
    pub dataset: Dataset,
    pub series: Vec<SiteSeries>,
    pub summaries: Vec<Vec<f64>>,
    pub clustering: Option<KMeansResult>,
    /// Indices into `series` that feed the dataset.
    pub selected: Vec<usize>,
}

/// `[mean |Δ| over counters, |Δ| of energy, KS D of energy]`, where `Δ` is
/// the shift of the mean from the first 65% to the last 30% in units of
/// the first part's standard deviation.
pub fn drift_summary(series: &SiteSeries) -> Result<Vec<f64>> {
    let n = series.energy.len();
    let split = super::chrono_split(n, TRAIN_FRACTION, TEST_FRACTION)?;
    let shift = |col: &[f64]| -> f64 {
        let a = &col[split.train.clone()];
        let b = &col[split.test.clone()];
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let sd = (a.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / a.len() as f64).sqrt();
        ((mb - ma) / if sd > 0.0 { sd } else { 1.0 }).abs()
    };
    let f = series.counter_names.len();
    let counter_shift = if f == 0 {
        0.0
    } else {
        (0..f)
            .map(|j| shift(&series.features.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .sum::<f64>()
            / f as f64
    };
    let ks = ks_2samp(&series.energy[split.train.clone()], &series.energy[split.test.clone()])?;
    Ok(vec![counter_shift, shift(&series.energy), ks.statistic])
}

fn build_series(records: &[super::RawRecord]) -> Result<Vec<SiteSeries>> {
    let names: Vec<String> = records
        .iter()
        .flat_map(|r| r.counters.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut by_unit: BTreeMap<(&str, &str), Vec<&super::RawRecord>> = BTreeMap::new();
    for r in records {
        by_unit.entry((&r.site_id, &r.unit_id)).or_default().push(r);
    }
    let step = Duration::minutes(BIN_MINUTES);
    by_unit
        .into_iter()
        .map(|((site, unit), recs)| {
            let first = recs.iter().map(|r| r.timestamp).min().expect("non-empty group");
            let last = recs.iter().map(|r| r.timestamp).max().expect("non-empty group");
            let bins = ((last - first).num_minutes() / BIN_MINUTES) as usize + 1;
            let at: HashMap<DateTime<Utc>, &super::RawRecord> = recs.iter().map(|r| (r.timestamp, *r)).collect();
            let timestamps: Vec<DateTime<Utc>> = (0..bins).map(|i| first + step * i as i32).collect();
            let column = |get: &dyn Fn(&super::RawRecord) -> Option<f64>, what: &str| -> Result<Vec<f64>> {
                let raw: Vec<Option<f64>> = timestamps.iter().map(|t| at.get(t).and_then(|r| get(r))).collect();
                forward_fill(&raw).map_err(|_| Error::data(format!("site {site} unit {unit}: `{what}` has no values")))
            };
            let cols = names
                .iter()
                .map(|n| column(&|r| r.counters.get(n).copied().flatten(), n))
                .collect::<Result<Vec<_>>>()?;
            let energy = column(&|r| r.energy, "energy")?;
            let features = (0..bins).map(|t| cols.iter().map(|c| c[t]).collect()).collect();
            Ok(SiteSeries {
                site_id: site.to_string(),
                unit_id: unit.to_string(),
                timestamps,
                counter_names: names.clone(),
                features,
                energy,
            })
        })
        .collect()
}

fn csv_files(dir: &Path, exclude: Option<&Path>) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        let excluded = exclude.is_some_and(|x| x.file_name() == path.file_name() && x.parent() == path.parent());
        if is_csv && !excluded {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!("{}: no CSV files", dir.display())));
    }
    Ok(files)
}

/// Sums the selected unit series on their common timestamps.
fn combine(series: &[SiteSeries], selected: &[usize]) -> Result<Dataset> {
    let names = series[selected[0]].counter_names.clone();
    let mut common: Option<BTreeSet<DateTime<Utc>>> = None;
    for &i in selected {
        if series[i].counter_names != names {
            return Err(Error::data("selected units report different counter sets"));
        }
        let ts: BTreeSet<_> = series[i].timestamps.iter().copied().collect();
        common = Some(match common {
            None => ts,
            Some(c) => c.intersection(&ts).copied().collect(),
        });
    }
    let common: Vec<DateTime<Utc>> = common.unwrap_or_default().into_iter().collect();
    let mut features = vec![vec![0.0; names.len()]; common.len()];
    let mut target = vec![0.0; common.len()];
    for &i in selected {
        let s = &series[i];
        let index: HashMap<DateTime<Utc>, usize> = s.timestamps.iter().enumerate().map(|(k, t)| (*t, k)).collect();
        for (row, t) in common.iter().enumerate() {
            let k = index[t];
            features[row].iter_mut().zip(&s.features[k]).for_each(|(a, b)| *a += b);
            target[row] += s.energy[k];
        }
    }
    Dataset::new(names, common.iter().map(format_timestamp).collect(), features, target)
}

pub fn preprocess_dir(dir: &Path, opts: &PreprocessOptions) -> Result<PreprocessOutput> {
    let cell_map = opts.cell_map.as_deref().map(read_cell_map).transpose()?;
    let files = csv_files(dir, opts.cell_map.as_deref())?;
    let per_file: Vec<Vec<SiteSeries>> = files
        .par_iter()
        .map(|f| {
            let recs = read_raw_csv(f, cell_map.as_ref())?;
            build_series(&aggregate_by_unit(&recs)?)
        })
        .collect::<Result<_>>()?;
    let mut series: Vec<SiteSeries> = per_file.into_iter().flatten().collect();
    series.sort_by(|a, b| (&a.site_id, &a.unit_id).cmp(&(&b.site_id, &b.unit_id)));
    let summaries = series.iter().map(drift_summary).collect::<Result<Vec<_>>>()?;

    let n = series.len();
    let (clustering, selected): (_, Vec<usize>) = if !opts.select_low_drift || n < 3 {
        (None, (0..n).collect())
    } else {
        let result = match opts.forced_k {
            Some(k) => kmeans_fixed(&summaries, k, &opts.kmeans)?,
            None => {
                let candidates: Vec<usize> = opts.kmeans.k_candidates.iter().copied().filter(|&k| k >= 2 && k < n).collect();
                if candidates.is_empty() {
                    return Err(Error::config("k_candidates", format!("no candidate k in [2, {n}) for {n} units")));
                }
                kmeans_cluster(&summaries, &KMeansConfig { k_candidates: candidates, ..opts.kmeans.clone() })?
            }
        };
        let norm = |c: &Vec<f64>| c.iter().map(|v| v * v).sum::<f64>();
        let low = (0..result.k)
            .filter(|&c| result.assignments.contains(&c))
            .min_by(|&a, &b| norm(&result.centroids[a]).total_cmp(&norm(&result.centroids[b])))
            .expect("at least one non-empty cluster");
        let selected: Vec<usize> = (0..n).filter(|&i| result.assignments[i] == low).collect();
        (Some(result), selected)
    };
    log::info!("{} units read, {} selected", n, selected.len());

    let mut dataset = combine(&series, &selected)?;
    dataset.metadata.insert("source".into(), dir.display().to_string());
    let units: Vec<&str> = selected.iter().map(|&i| series[i].unit_id.as_str()).collect();
    dataset.metadata.insert("units".into(), units.join(","));
    let dataset = dataset.prepare(opts.train_fraction, opts.test_fraction)?;
    Ok(PreprocessOutput {
        dataset,
        series,
        summaries,
        clustering,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{synth_raw_sites, write_raw_csv, SynthSpec};
    use super::*;

    #[test]
    fn low_drift_units_are_selected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { rows: 400, ..Default::default() };
        let recs = synth_raw_sites(&spec, 6, 1, 2, &[0.0, 0.0, 0.0, 3.0, 3.0, 3.0], 0.02).unwrap();
        for s in 0..6 {
            let site = format!("site{s:03}");
            let mine: Vec<_> = recs.iter().filter(|r| r.site_id == site).cloned().collect();
            write_raw_csv(&dir.path().join(format!("{site}.csv")), &mine).unwrap();
        }
        let out = preprocess_dir(dir.path(), &PreprocessOptions::default()).unwrap();
        assert_eq!(out.series.len(), 6);
        assert_eq!(out.selected, vec![0, 1, 2]);
        assert_eq!(out.dataset.len(), 400);
        assert_eq!(out.dataset.feature_count(), 6);
        let split = out.dataset.split().unwrap();
        assert!(out.dataset.timestamps[split.train.end - 1] < out.dataset.timestamps[split.test.start]);
    }

    #[test]
    fn gaps_are_forward_filled() {
        let t0 = DateTime::from_timestamp(0, 0).unwrap();
        let rec = |k: i64, v: f64| super::super::RawRecord {
            timestamp: t0 + Duration::minutes(15 * k),
            site_id: "s".into(),
            unit_id: "u".into(),
            cell_id: None,
            counters: [("a".to_string(), Some(v))].into_iter().collect(),
            energy: Some(v * 2.0),
        };
        let s = build_series(&[rec(0, 1.0), rec(2, 3.0)]).unwrap();
        assert_eq!(s[0].features, vec![vec![1.0], vec![1.0], vec![3.0]]);
        assert_eq!(s[0].energy, vec![2.0, 2.0, 6.0]);
    }
}
