//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{Duration, TimeZone, Utc};

use ncpwatt::data::RawRecord;
use ncpwatt::ltc::LtcCellParams;
use ncpwatt::model::Model;
use ncpwatt::trainer::window_loss_and_grads;

/// Window MSE computed with the untaped forward pass.
pub fn plain_window_loss(model: &Model, state: &[f64], inputs: &[Vec<f64>], targets: &[f64]) -> f64 {
    let mut s = state.to_vec();
    let mut total = 0.0;
    for (x, y) in inputs.iter().zip(targets) {
        let p = model.step(&mut s, x).unwrap();
        total += (p - y) * (p - y);
    }
    total / targets.len() as f64
}

/// Norm-wise relative error between reverse-mode and central-difference
/// gradients over every parameter of `model`.
pub fn gradient_error(model: &Model, state: &[f64], inputs: &[Vec<f64>], targets: &[f64]) -> f64 {
    let rows: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let analytic: Vec<f64> = window_loss_and_grads(model, state, &rows, targets)
        .unwrap()
        .grads
        .concat();
    let h = 1e-6;
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for a in 0..model.param_arrays().len() {
        for i in 0..model.param_arrays()[a].len() {
            let base = model.param_arrays()[a][i];
            probe.param_arrays_mut()[a][i] = base + h;
            let up = plain_window_loss(&probe, state, inputs, targets);
            probe.param_arrays_mut()[a][i] = base - h;
            let down = plain_window_loss(&probe, state, inputs, targets);
            probe.param_arrays_mut()[a][i] = base;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    assert_eq!(numeric.len(), analytic.len());
    let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Classical RK4 on `dx/dt = cell.derivative(x, u)` with `u` held fixed.
pub fn rk4(cell: &LtcCellParams, x: &[f64], input: &[f64], h: f64, steps: usize) -> Vec<f64> {
    let mut x = x.to_vec();
    let axpy = |x: &[f64], k: &[f64], s: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    for _ in 0..steps {
        let k1 = cell.derivative(&x, input);
        let k2 = cell.derivative(&axpy(&x, &k1, h / 2.0), input);
        let k3 = cell.derivative(&axpy(&x, &k2, h / 2.0), input);
        let k4 = cell.derivative(&axpy(&x, &k3, h), input);
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    x
}

pub fn brute_mse(actual: &[f64], pred: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in (0..actual.len()).rev() {
        s += (actual[i] - pred[i]).powi(2);
    }
    s / actual.len() as f64
}

pub fn brute_r2(actual: &[f64], pred: &[f64]) -> f64 {
    let n = actual.len() as f64;
    let mean = actual.iter().rev().sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in (0..actual.len()).rev() {
        ss_res += (actual[i] - pred[i]).powi(2);
        ss_tot += (actual[i] - mean).powi(2);
    }
    1.0 - ss_res / ss_tot
}

/// MSE over samples whose actual is at or above the linearly interpolated
/// `p`-th percentile of actuals.
pub fn brute_tail_mse(actual: &[f64], pred: &[f64], p: f64) -> (f64, usize) {
    let mut sorted = actual.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let threshold = sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]);
    let mut s = 0.0;
    let mut n = 0;
    for i in 0..actual.len() {
        if actual[i] >= threshold {
            s += (actual[i] - pred[i]).powi(2);
            n += 1;
        }
    }
    (s / n as f64, n)
}

/// KS statistic by evaluating both empirical CDFs at every sample point.
pub fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
        .fold(0.0, f64::max)
}

/// `(site, unit, timestamp)` → `(counters, energy)`.
pub type Groups = BTreeMap<(String, String, String), (BTreeMap<String, Option<f64>>, Option<f64>)>;

/// Nested-loop group-by: sum of every counter and the shared energy per
/// `(site, unit, timestamp)`.
pub fn brute_group_by(records: &[RawRecord]) -> Groups {
    let mut out = BTreeMap::new();
    for r in records {
        let key = (r.site_id.clone(), r.unit_id.clone(), r.timestamp.to_rfc3339());
        if out.contains_key(&key) {
            continue;
        }
        let mut counters: BTreeMap<String, Option<f64>> = BTreeMap::new();
        let mut energy = None;
        for s in records {
            if (s.site_id.clone(), s.unit_id.clone(), s.timestamp.to_rfc3339()) != key {
                continue;
            }
            for (name, v) in &s.counters {
                let slot = counters.entry(name.clone()).or_insert(None);
                if let Some(v) = v {
                    *slot = Some(slot.unwrap_or(0.0) + v);
                }
            }
            if s.energy.is_some() {
                energy = s.energy;
            }
        }
        out.insert(key, (counters, energy));
    }
    out
}

/// Three cells on two units over four bins, with gaps and per-unit energy.
pub fn aggregation_fixture() -> Vec<RawRecord> {
    let t0 = Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap();
    let mut out = Vec::new();
    for t in 0..4 {
        for c in 0..3 {
            let unit = if c < 2 { "u1" } else { "u2" };
            let missing = (t + c) % 5 == 4;
            out.push(RawRecord {
                timestamp: t0 + Duration::minutes(15 * t),
                site_id: "s1".into(),
                unit_id: unit.into(),
                cell_id: Some(format!("c{c}")),
                counters: [
                    ("prb".to_string(), if missing { None } else { Some((t * 10 + c) as f64) }),
                    ("users".to_string(), Some((c + 1) as f64 * 0.5)),
                ]
                .into_iter()
                .collect(),
                energy: Some(100.0 + t as f64 + if c < 2 { 0.0 } else { 50.0 }),
            });
        }
    }
    out
}
