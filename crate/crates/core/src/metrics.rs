//! Regression metrics and the per-run evaluation report.

use serde::{Deserialize, Serialize};

use crate::accounting::CostLedger;
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::robustness::PerturbationRecord;

fn check_pair(actual: &[f64], pred: &[f64], min_len: usize) -> Result<()> {
    if actual.len() != pred.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} actual vs {} predicted",
            actual.len(),
            pred.len()
        )));
    }
    if actual.len() < min_len {
        return Err(Error::invalid(format!("need at least {min_len} samples, got {}", actual.len())));
    }
    if actual.iter().chain(pred).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

pub fn mse(actual: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(actual, pred, 1)?;
    Ok(actual.iter().zip(pred).map(|(a, p)| (a - p) * (a - p)).sum::<f64>() / actual.len() as f64)
}

/// `1 − SS_res / SS_tot`; a constant `actual` is an error.
pub fn r2_score(actual: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(actual, pred, 2)?;
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::invalid("R² is undefined for a constant target"));
    }
    let ss_res: f64 = actual.iter().zip(pred).map(|(a, p)| (a - p) * (a - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Linear-interpolation quantile (type 7) for `q ∈ [0, 1]`.
pub fn quantile_type7(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// MSE over samples whose actual value is at or above the `percentile`-th
/// percentile of `actual`; returns `(mse, n_tail)`.
pub fn tail_mse(actual: &[f64], pred: &[f64], percentile: f64) -> Result<(f64, usize)> {
    check_pair(actual, pred, 10)?;
    let threshold = quantile_type7(actual, percentile / 100.0)?;
    let (sum, n) = actual
        .iter()
        .zip(pred)
        .filter(|(a, _)| **a >= threshold)
        .fold((0.0, 0usize), |(s, n), (a, p)| (s + (a - p) * (a - p), n + 1));
    if n == 0 {
        return Err(Error::invalid("tail is empty"));
    }
    Ok((sum / n as f64, n))
}

/// Accuracy numbers for one prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r2: f64,
    pub mse: f64,
    /// `None` when the test set is too short for a tail.
    pub tail_mse_p90: Option<f64>,
    pub n_test: usize,
    pub n_tail: usize,
}

impl Metrics {
    pub fn compute(actual: &[f64], pred: &[f64]) -> Result<Self> {
        let (tail, n_tail) = if actual.len() >= 10 {
            let (t, n) = tail_mse(actual, pred, 90.0)?;
            (Some(t), n)
        } else {
            (None, 0)
        };
        Ok(Self {
            r2: r2_score(actual, pred)?,
            mse: mse(actual, pred)?,
            tail_mse_p90: tail,
            n_test: actual.len(),
            n_tail,
        })
    }
}

/// Identity of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIdent {
    pub run_key: String,
    pub model: ModelKind,
    pub neurons: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_key: String,
    pub model: ModelKind,
    pub neurons: usize,
    pub epochs: usize,
    pub seed: u64,
    /// `"none"`, or `"<kind>:<target>@<epsilon>"`.
    pub perturbation: String,
    pub r2: f64,
    pub mse: f64,
    pub tail_mse_p90: Option<f64>,
    pub n_test: usize,
    pub n_tail: usize,
    pub param_count: usize,
    pub flops_per_step: u64,
    pub flops_total: u64,
    pub train_wall_seconds: f64,
    pub train_energy_joules: Option<f64>,
    pub ks_statistic: Option<f64>,
    pub ks_p: Option<f64>,
}

impl EvalReport {
    /// Copy with the wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            train_wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

pub fn perturbation_label(p: Option<&PerturbationRecord>) -> String {
    match p {
        None => "none".into(),
        Some(r) => {
            let kind = serde_json::to_value(r.spec.kind).ok().and_then(|v| v.as_str().map(String::from));
            let target = serde_json::to_value(r.spec.target).ok().and_then(|v| v.as_str().map(String::from));
            format!("{}:{}@{}", kind.unwrap_or_default(), target.unwrap_or_default(), r.spec.epsilon)
        }
    }
}

pub fn assemble_report(ident: &RunIdent, metrics: &Metrics, ledger: &CostLedger, perturbation: Option<&PerturbationRecord>) -> EvalReport {
    EvalReport {
        run_key: ident.run_key.clone(),
        model: ident.model,
        neurons: ident.neurons,
        epochs: ident.epochs,
        seed: ident.seed,
        perturbation: perturbation_label(perturbation),
        r2: metrics.r2,
        mse: metrics.mse,
        tail_mse_p90: metrics.tail_mse_p90,
        n_test: metrics.n_test,
        n_tail: metrics.n_tail,
        param_count: ledger.params,
        flops_per_step: ledger.flops_per_step,
        flops_total: ledger.flops_total,
        train_wall_seconds: ledger.wall_seconds,
        train_energy_joules: ledger.external_energy_joules,
        ks_statistic: perturbation.map(|p| p.ks.statistic),
        ks_p: perturbation.map(|p| p.ks.p_value),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_examples() {
        assert_eq!(r2_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r2_score(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(r2_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(), 0.5);
        assert!(r2_score(&[2.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(r2_score(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn tail_examples() {
        let actual: Vec<f64> = (0..10).map(f64::from).collect();
        let mut pred = actual.clone();
        assert!((quantile_type7(&actual, 0.9).unwrap() - 8.1).abs() < 1e-12);
        assert_eq!(tail_mse(&actual, &pred, 90.0).unwrap(), (0.0, 1));
        pred[9] = 8.0;
        assert_eq!(tail_mse(&actual, &pred, 90.0).unwrap(), (1.0, 1));
        let flat = vec![3.0; 12];
        let p: Vec<f64> = (0..12).map(f64::from).collect();
        let (t, n) = tail_mse(&flat, &p, 90.0).unwrap();
        assert_eq!(n, 12);
        assert_eq!(t, mse(&flat, &p).unwrap());
    }

    #[test]
    fn mse_example() {
        assert_eq!(mse(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(mse(&[], &[]).is_err());
    }
}
