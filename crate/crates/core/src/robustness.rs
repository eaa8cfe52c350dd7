//! Test-set perturbations and the two-sample Kolmogorov–Smirnov statistic.
//!
//! Both perturbations scale with the range `max − min` of the column over
//! the test split. Noise draws use a fixed stream per `(seed, column)`, so
//! larger `epsilon` rescales the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Noise,
    Drift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbTarget {
    Features,
    Label,
}

/// Sample the perturbed test column is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KsReference {
    /// The unperturbed test split: measures the injected shift.
    #[default]
    CleanTest,
    Train,
}

macro_rules! lowercase_from_str {
    ($ty:ty, $($text:literal => $variant:expr),+) => {
        impl std::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($variant),)+
                    other => Err(Error::invalid(format!("unexpected value `{other}`"))),
                }
            }
        }
    };
}

lowercase_from_str!(PerturbationKind, "noise" => PerturbationKind::Noise, "drift" => PerturbationKind::Drift);
lowercase_from_str!(PerturbTarget, "features" => PerturbTarget::Features, "label" => PerturbTarget::Label);
lowercase_from_str!(KsReference, "clean_test" => KsReference::CleanTest, "test" => KsReference::CleanTest, "train" => KsReference::Train);

pub const NOISE_GRID: [f64; 3] = [0.025, 0.05, 0.1];
pub const DRIFT_GRID: [f64; 3] = [0.01, 0.05, 0.075];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub epsilon: f64,
    pub target: PerturbTarget,
    pub seed: u64,
    #[serde(default)]
    pub ks_reference: KsReference,
}

impl PerturbationSpec {
    /// Noise goes to the features and drift to the label by default.
    pub fn new(kind: PerturbationKind, epsilon: f64, seed: u64) -> Self {
        let target = match kind {
            PerturbationKind::Noise => PerturbTarget::Features,
            PerturbationKind::Drift => PerturbTarget::Label,
        };
        Self {
            kind,
            epsilon,
            target,
            seed,
            ks_reference: KsReference::CleanTest,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", format!("must be finite and ≥ 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub m: usize,
}

/// What a perturbed dataset carries about its perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub spec: PerturbationSpec,
    /// KS result of the most shifted column.
    pub ks: KsResult,
    pub ks_column: String,
}

fn range(data: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot perturb an empty sample"));
    }
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(hi - lo)
}

/// `data + N(0, range·ε)` element-wise, with draws from `seed`.
pub fn add_noise(data: &[f64], epsilon: f64, seed: u64) -> Result<Vec<f64>> {
    PerturbationSpec::new(PerturbationKind::Noise, epsilon, seed).check()?;
    let sd = (range(data)? * epsilon).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(data
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sd * z
        })
        .collect())
}

/// `data − range·ε`.
pub fn add_drift(data: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    PerturbationSpec::new(PerturbationKind::Drift, epsilon, 0).check()?;
    let shift = range(data)? * epsilon;
    Ok(data.iter().map(|v| v - shift).collect())
}

fn column_seed(seed: u64, column: usize) -> u64 {
    seed.wrapping_add((column as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Copy of `ds` with its test split perturbed per `spec`.
pub fn perturb_test(ds: &Dataset, spec: &PerturbationSpec) -> Result<Dataset> {
    spec.check()?;
    if ds.perturbation.is_some() {
        return Err(Error::data("dataset is already perturbed"));
    }
    let split = ds.split()?.clone();
    let apply = |col: &[f64], c: usize| match spec.kind {
        PerturbationKind::Noise => add_noise(col, spec.epsilon, column_seed(spec.seed, c)),
        PerturbationKind::Drift => add_drift(col, spec.epsilon),
    };
    let reference = |col: &dyn Fn(usize) -> f64| -> Vec<f64> {
        match spec.ks_reference {
            KsReference::CleanTest => split.test.clone().map(col).collect(),
            KsReference::Train => split.train.clone().map(col).collect(),
        }
    };
    let mut out = ds.clone();
    let mut worst: Option<(KsResult, String)> = None;
    let mut consider = |ks: KsResult, name: &str| {
        if worst.as_ref().is_none_or(|(w, _)| ks.statistic > w.statistic) {
            worst = Some((ks, name.to_string()));
        }
    };
    match spec.target {
        PerturbTarget::Features => {
            for (c, name) in ds.feature_names.iter().enumerate() {
                let clean: Vec<f64> = split.test.clone().map(|t| ds.features[t][c]).collect();
                let moved = apply(&clean, c)?;
                for (t, v) in split.test.clone().zip(&moved) {
                    out.features[t][c] = *v;
                }
                consider(ks_2samp(&moved, &reference(&|t| ds.features[t][c]))?, name);
            }
        }
        PerturbTarget::Label => {
            let clean = &ds.target[split.test.clone()];
            let moved = apply(clean, 0)?;
            out.target[split.test.clone()].copy_from_slice(&moved);
            consider(ks_2samp(&moved, &reference(&|t| ds.target[t]))?, "target");
        }
    }
    let (ks, ks_column) = worst.ok_or_else(|| Error::data("dataset has no feature columns"))?;
    out.perturbation = Some(PerturbationRecord {
        spec: spec.clone(),
        ks,
        ks_column,
    });
    Ok(out)
}

/// Asymptotic Kolmogorov survival function `2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}`.
fn kolmogorov_sf(lambda2: f64) -> f64 {
    // Below λ ≈ 0.2 the alternating series has not converged and Q(λ) = 1 to double precision.
    if lambda2 < 0.04 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda2).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample KS statistic `D = sup |F_a − F_b|` with asymptotic p-value.
pub fn ks_2samp(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("ks_2samp needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("KS sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut gap = 0usize;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        gap = gap.max((i * m).abs_diff(j * n));
    }
    // Exact integer gap, one rounding: D = |i·m − j·n| / (n·m).
    let d = gap as f64 / (n * m) as f64;
    let ne = (n * m) as f64 / (n + m) as f64;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_sf(ne * d * d),
        n,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_examples() {
        assert_eq!(ks_2samp(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap().statistic, 0.0);
        assert_eq!(ks_2samp(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap().p_value, 1.0);
        assert_eq!(ks_2samp(&[0.0; 3], &[1.0; 3]).unwrap().statistic, 1.0);
        assert_eq!(ks_2samp(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap().statistic, 1.0 / 3.0);
        assert!(ks_2samp(&[], &[1.0]).is_err());
    }

    #[test]
    fn p_value_reference() {
        // Q(1) = 0.26999967167735456
        assert!((kolmogorov_sf(1.0) - 0.269_999_671_677_354_6).abs() < 1e-12);
        let big = ks_2samp(&(0..500).map(f64::from).collect::<Vec<_>>(), &(250..750).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert!(big.p_value < 1e-10);
    }

    #[test]
    fn drift_example() {
        let data: Vec<f64> = (0..=10).map(f64::from).collect();
        let out = add_drift(&data, 0.05).unwrap();
        assert_eq!(out[0], -0.5);
        assert_eq!(out[10], 9.5);
        assert_eq!(add_drift(&data, 0.0).unwrap(), data);
        assert!(add_drift(&data, -0.1).is_err());
    }

    #[test]
    fn noise_variance_matches() {
        let mut data = vec![0.0; 100_000];
        data[1] = 10.0;
        let out = add_noise(&data, 0.1, 9).unwrap();
        let noise: Vec<f64> = out.iter().zip(&data).map(|(o, d)| o - d).collect();
        let n = noise.len() as f64;
        let mean = noise.iter().sum::<f64>() / n;
        let var = noise.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((0.97..=1.03).contains(&var), "{var}");
        assert!(mean.abs() <= 0.02);
        assert_eq!(add_noise(&data, 0.0, 9).unwrap(), data);
    }
}
