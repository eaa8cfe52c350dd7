//! Training cost: parameter counts, FLOPs, wall time, and optional
//! externally metered energy.
//!
//! One training step costs the forward FLOPs plus about twice that for the
//! backward pass, so `flops_total = 3 · flops_per_step · steps · epochs`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

/// Training FLOPs per forward FLOP.
pub const TRAIN_FLOP_FACTOR: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub run_id: String,
    pub params: usize,
    pub flops_per_step: u64,
    pub steps_per_epoch: u64,
    pub epochs: u64,
    pub flops_total: u64,
    pub wall_seconds: f64,
    pub external_energy_joules: Option<f64>,
}

pub fn training_flops(flops_per_step: u64, steps_per_epoch: u64, epochs: u64) -> u64 {
    TRAIN_FLOP_FACTOR * flops_per_step * steps_per_epoch * epochs
}

pub fn ledger_for(run_id: &str, model: &Model, steps_per_epoch: usize, epochs: usize, wall_seconds: f64) -> CostLedger {
    let fps = model.flops_per_step();
    CostLedger {
        run_id: run_id.to_string(),
        params: model.param_count(),
        flops_per_step: fps,
        steps_per_epoch: steps_per_epoch as u64,
        epochs: epochs as u64,
        flops_total: training_flops(fps, steps_per_epoch as u64, epochs as u64),
        wall_seconds,
        external_energy_joules: None,
    }
}

/// Reads a `run_id,joules` meter CSV. Repeated run ids are summed.
pub fn import_energy(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if !text.trim().is_empty() && (headers.get(0).map(str::trim) != Some("run_id") || headers.get(1).map(str::trim) != Some("joules")) {
        return Err(Error::data(format!("{}: expected header `run_id,joules`", path.display())));
    }
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let id = row.get(0).map(str::trim).unwrap_or_default();
        let joules: f64 = row
            .get(1)
            .and_then(|v| v.trim().parse().ok())
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::data(format!("{}: line {}: bad joules value", path.display(), i + 2)))?;
        if id.is_empty() {
            return Err(Error::data(format!("{}: line {}: empty run_id", path.display(), i + 2)));
        }
        if let Some(prev) = out.get_mut(id) {
            log::warn!("run `{id}` has several meter readings; summing them");
            *prev += joules;
        } else {
            out.insert(id.to_string(), joules);
        }
    }
    Ok(out)
}

/// Sets `external_energy_joules` on matching ledgers; returns how many matched.
pub fn attach_energy(ledgers: &mut [CostLedger], readings: &BTreeMap<String, f64>) -> usize {
    let mut matched = 0;
    for l in ledgers {
        if let Some(j) = readings.get(&l.run_id) {
            l.external_energy_joules = Some(*j);
            matched += 1;
        }
    }
    matched
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    #[test]
    fn flops_scale_with_epochs() {
        let m = Model::new(ModelKind::Ncp, 6, 16, 0, 1.0).unwrap();
        let a = ledger_for("a", &m, 100, 50, 0.0);
        let b = ledger_for("b", &m, 100, 100, 0.0);
        assert_eq!(b.flops_total, 2 * a.flops_total);
        assert_eq!(ledger_for("z", &m, 100, 0, 0.0).flops_total, 0);
    }

    #[test]
    fn ncp_is_cheaper_than_lstm() {
        let n = Model::new(ModelKind::Ncp, 6, 64, 0, 1.0).unwrap();
        let l = Model::new(ModelKind::Lstm, 6, 64, 0, 1.0).unwrap();
        assert!(ledger_for("n", &n, 1300, 100, 0.0).flops_total < ledger_for("l", &l, 1300, 100, 0.0).flops_total);
    }

    #[test]
    fn meter_import() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(import_energy(&empty).unwrap().is_empty());

        let path = dir.path().join("meter.csv");
        std::fs::write(&path, "run_id,joules\na,10\nb,2.5\na,5\n").unwrap();
        let r = import_energy(&path).unwrap();
        assert_eq!(r["a"], 15.0);
        let m = Model::new(ModelKind::Lstm, 2, 2, 0, 1.0).unwrap();
        let mut ledgers = vec![ledger_for("a", &m, 1, 1, 0.0), ledger_for("c", &m, 1, 1, 0.0)];
        assert_eq!(attach_energy(&mut ledgers, &r), 1);
        assert_eq!(ledgers[0].external_energy_joules, Some(15.0));
        assert_eq!(ledgers[1].external_energy_joules, None);

        std::fs::write(&path, "run_id,joules\na,lots\n").unwrap();
        assert!(import_energy(&path).is_err());
    }
}
