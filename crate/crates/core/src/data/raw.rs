//! Per-cell counter records and their CSV form.
//!
//! Columns: `timestamp, site_id, unit_id, cell_id, <counters…>, energy`.
//! `unit_id` may be omitted when a separate `cell_id,unit_id` map is given;
//! `energy` is optional. Empty fields are missing values. Timestamps are
//! ISO-8601 (`2024-01-01T00:15:00Z` or `2024-01-01 00:15:00`, read as UTC)
//! and must fall on the 15-minute grid.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Timelike, Utc};

use crate::error::{Error, Result};

pub const BIN_MINUTES: i64 = 15;

const RESERVED: [&str; 5] = ["timestamp", "site_id", "unit_id", "cell_id", "energy"];

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub timestamp: DateTime<Utc>,
    pub site_id: String,
    pub unit_id: String,
    /// `None` after aggregation to unit level.
    pub cell_id: Option<String>,
    pub counters: BTreeMap<String, Option<f64>>,
    /// Joules per bin, measured per radio unit.
    pub energy: Option<f64>,
}

pub(crate) fn parse_timestamp(s: &str) -> Result<DateTime<Utc>> {
    let s = s.trim();
    let ts = DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S").map(|n| n.and_utc()))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").map(|n| n.and_utc()))
        .map_err(|_| Error::data(format!("unparseable timestamp `{s}`")))?;
    if ts.second() != 0 || ts.nanosecond() != 0 || i64::from(ts.minute()) % BIN_MINUTES != 0 {
        return Err(Error::data(format!("timestamp `{s}` is not on the 15-minute grid")));
    }
    Ok(ts)
}

pub(crate) fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn parse_value(field: &str, column: &str, line: usize) -> Result<Option<f64>> {
    let f = field.trim();
    if f.is_empty() || f.eq_ignore_ascii_case("nan") || f.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    f.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::data(format!("line {line}: column `{column}`: `{f}` is not a number")))
}

/// Reads a `cell_id,unit_id` mapping file.
pub fn read_cell_map(path: &Path) -> Result<HashMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let (cell, unit) = (row.get(0), row.get(1));
        match (cell, unit) {
            (Some(c), Some(u)) => {
                map.insert(c.trim().to_string(), u.trim().to_string());
            }
            _ => return Err(Error::data(format!("{}: rows need cell_id,unit_id", path.display()))),
        }
    }
    Ok(map)
}

/// Reads one per-site counter CSV.
pub fn read_raw_csv(path: &Path, cell_map: Option<&HashMap<String, String>>) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let ts_col = col("timestamp").ok_or_else(|| Error::data(format!("{}: missing `timestamp` column", path.display())))?;
    let site_col = col("site_id").ok_or_else(|| Error::data(format!("{}: missing `site_id` column", path.display())))?;
    let unit_col = col("unit_id");
    let cell_col = col("cell_id");
    let energy_col = col("energy");
    if unit_col.is_none() && (cell_map.is_none() || cell_col.is_none()) {
        return Err(Error::data(format!(
            "{}: no `unit_id` column; provide a cell map and a `cell_id` column",
            path.display()
        )));
    }
    let counter_cols: Vec<(usize, &String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !RESERVED.contains(&h.as_str()))
        .collect();

    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let get = |c: usize| row.get(c).unwrap_or("").trim();
        let cell_id = cell_col.map(|c| get(c).to_string()).filter(|c| !c.is_empty());
        let unit_id = match unit_col {
            Some(c) if !get(c).is_empty() => get(c).to_string(),
            _ => {
                let cell = cell_id
                    .as_ref()
                    .ok_or_else(|| Error::data(format!("line {line}: no unit_id and no cell_id")))?;
                cell_map
                    .and_then(|m| m.get(cell))
                    .cloned()
                    .ok_or_else(|| Error::data(format!("line {line}: cell `{cell}` has no unit mapping")))?
            }
        };
        let counters = counter_cols
            .iter()
            .map(|&(c, name)| Ok((name.clone(), parse_value(get(c), name, line)?)))
            .collect::<Result<_>>()?;
        out.push(RawRecord {
            timestamp: parse_timestamp(get(ts_col))?,
            site_id: get(site_col).to_string(),
            unit_id,
            cell_id,
            counters,
            energy: match energy_col {
                Some(c) => parse_value(get(c), "energy", line)?,
                None => None,
            },
        });
    }
    Ok(out)
}

pub fn write_raw_csv(path: &Path, records: &[RawRecord]) -> Result<()> {
    let names: Vec<String> = records
        .iter()
        .flat_map(|r| r.counters.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut header = vec!["timestamp", "site_id", "unit_id", "cell_id"];
    header.extend(names.iter().map(String::as_str));
    header.push("energy");
    w.write_record(&header)?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        let mut row = vec![
            format_timestamp(&r.timestamp),
            r.site_id.clone(),
            r.unit_id.clone(),
            r.cell_id.clone().unwrap_or_default(),
        ];
        row.extend(names.iter().map(|n| fmt(r.counters.get(n).copied().flatten())));
        row.push(fmt(r.energy));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sums counters over the cells of each radio unit, one record per
/// `(site, unit, timestamp)`. Energy is per unit already and passes through;
/// two different readings for the same key are an error.
pub fn aggregate_by_unit(records: &[RawRecord]) -> Result<Vec<RawRecord>> {
    let mut groups: BTreeMap<(String, String, DateTime<Utc>), RawRecord> = BTreeMap::new();
    for r in records {
        let key = (r.site_id.clone(), r.unit_id.clone(), r.timestamp);
        let slot = groups.entry(key).or_insert_with(|| RawRecord {
            timestamp: r.timestamp,
            site_id: r.site_id.clone(),
            unit_id: r.unit_id.clone(),
            cell_id: None,
            counters: BTreeMap::new(),
            energy: None,
        });
        for (name, v) in &r.counters {
            let acc = slot.counters.entry(name.clone()).or_insert(None);
            if let Some(x) = v {
                *acc = Some(acc.unwrap_or(0.0) + x);
            }
        }
        match (slot.energy, r.energy) {
            (_, None) => {}
            (None, Some(e)) => slot.energy = Some(e),
            (Some(a), Some(b)) if (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0) => {}
            (Some(a), Some(b)) => {
                return Err(Error::data(format!(
                    "conflicting energy for site {} unit {} at {}: {a} vs {b}",
                    r.site_id,
                    r.unit_id,
                    format_timestamp(&r.timestamp)
                )))
            }
        }
    }
    Ok(groups.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ts: &str, unit: &str, cell: &str, c: f64, energy: Option<f64>) -> RawRecord {
        RawRecord {
            timestamp: parse_timestamp(ts).unwrap(),
            site_id: "s1".into(),
            unit_id: unit.into(),
            cell_id: Some(cell.into()),
            counters: [("prb".to_string(), Some(c))].into_iter().collect(),
            energy,
        }
    }

    #[test]
    fn two_cells_sum() {
        let out = aggregate_by_unit(&[
            rec("2024-01-01T00:00:00Z", "u1", "c1", 3.0, Some(10.0)),
            rec("2024-01-01T00:00:00Z", "u1", "c2", 5.0, Some(10.0)),
        ])
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].counters["prb"], Some(8.0));
        assert_eq!(out[0].energy, Some(10.0));
    }

    #[test]
    fn single_cell_is_identity() {
        let r = rec("2024-01-01T00:15:00Z", "u1", "c1", 3.0, Some(1.0));
        let out = aggregate_by_unit(std::slice::from_ref(&r)).unwrap();
        assert_eq!(out[0].counters, r.counters);
        assert_eq!(out[0].energy, r.energy);
    }

    #[test]
    fn conflicting_energy_is_an_error() {
        let err = aggregate_by_unit(&[
            rec("2024-01-01T00:00:00Z", "u1", "c1", 3.0, Some(10.0)),
            rec("2024-01-01T00:00:00Z", "u1", "c2", 5.0, Some(11.0)),
        ]);
        assert!(err.is_err());
    }

    #[test]
    fn timestamps_must_be_on_grid() {
        assert!(parse_timestamp("2024-01-01T00:07:00Z").is_err());
        assert!(parse_timestamp("2024-01-01 00:45:00").is_ok());
        assert!(parse_timestamp("yesterday").is_err());
    }

    #[test]
    fn csv_round_trip_with_cell_map() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("site.csv");
        std::fs::write(
            &path,
            "timestamp,site_id,cell_id,prb,users,energy\n\
             2024-01-01T00:00:00Z,s1,c1,1.5,,7\n\
             2024-01-01T00:00:00Z,s1,c2,2.5,4,7\n",
        )
        .unwrap();
        assert!(read_raw_csv(&path, None).is_err());
        let map: HashMap<String, String> = [("c1", "u1"), ("c2", "u1")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let recs = read_raw_csv(&path, Some(&map)).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].counters["users"], None);
        let agg = aggregate_by_unit(&recs).unwrap();
        assert_eq!(agg[0].counters["prb"], Some(4.0));
        assert_eq!(agg[0].counters["users"], Some(4.0));

        let out = dir.path().join("again.csv");
        write_raw_csv(&out, &recs).unwrap();
        let back = read_raw_csv(&out, None).unwrap();
        assert_eq!(back, recs);
    }
}
