//! Configuration-driven hyper-parameter sweeps.
//!
//! Runs sharing `(model, neurons, seed)` differ only in their epoch budget,
//! and training is deterministic, so each such group is trained once to its
//! largest budget and snapshotted at every smaller one. A snapshot at epoch
//! `e` is bit-identical to a separate `e`-epoch run.
//!
//! Finished runs are cached under `<output_dir>/runs/<run_key>.json`; a
//! group whose runs are all cached is skipped on the next invocation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounting::ledger_for;
use crate::data::{preprocess_dir, synth_generate, Dataset, KMeansConfig, PreprocessOptions, SynthSpec, TEST_FRACTION, TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::metrics::{assemble_report, quantile_type7, EvalReport, RunIdent};
use crate::model::{Checkpoint, ModelKind};
use crate::robustness::{perturb_test, KsReference, PerturbTarget, PerturbationKind, PerturbationSpec, DRIFT_GRID, NOISE_GRID};
use crate::trainer::{evaluate, train_with, TrainConfig, DEFAULT_DT, DEFAULT_LEARNING_RATE, DEFAULT_LSTM_CLIP, DEFAULT_TRUNCATION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic(SynthSpec),
    Csv { dir: PathBuf, cell_map: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub k_candidates: Vec<usize>,
    pub forced_k: Option<usize>,
    pub kmeans_seed: u64,
    pub select_low_drift: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_fraction: TRAIN_FRACTION,
            test_fraction: TEST_FRACTION,
            k_candidates: (2..=8).collect(),
            forced_k: None,
            kmeans_seed: 0,
            select_low_drift: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overtraining {
    pub neurons: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub models: Vec<ModelKind>,
    pub neurons: Vec<usize>,
    pub epochs: Vec<usize>,
    pub seeds: Vec<u64>,
    /// One extra epoch budget for one neuron count.
    pub overtraining: Option<Overtraining>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            models: vec![ModelKind::Ncp, ModelKind::Lstm],
            neurons: vec![16, 32, 64, 96],
            epochs: vec![50, 100, 200, 400],
            seeds: (0..5).collect(),
            overtraining: Some(Overtraining { neurons: 16, epochs: 800 }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub truncation_len: usize,
    pub lstm_clip_norm: Option<f64>,
    pub ncp_clip_norm: Option<f64>,
    pub dt: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            truncation_len: DEFAULT_TRUNCATION,
            lstm_clip_norm: Some(DEFAULT_LSTM_CLIP),
            ncp_clip_norm: None,
            dt: DEFAULT_DT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub noise: Vec<f64>,
    pub drift: Vec<f64>,
    pub seed: u64,
    pub noise_target: PerturbTarget,
    pub drift_target: PerturbTarget,
    pub ks_reference: KsReference,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            noise: NOISE_GRID.to_vec(),
            drift: DRIFT_GRID.to_vec(),
            seed: 0,
            noise_target: PerturbTarget::Features,
            drift_target: PerturbTarget::Label,
            ks_reference: KsReference::CleanTest,
        }
    }
}

impl PerturbationConfig {
    pub fn specs(&self) -> Vec<PerturbationSpec> {
        let make = |kind, target, eps| PerturbationSpec {
            kind,
            epsilon: eps,
            target,
            seed: self.seed,
            ks_reference: self.ks_reference,
        };
        self.noise
            .iter()
            .map(|&e| make(PerturbationKind::Noise, self.noise_target, e))
            .chain(self.drift.iter().map(|&e| make(PerturbationKind::Drift, self.drift_target, e)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub perturbations: PerturbationConfig,
}

fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        if let DatasetConfig::Csv { dir, cell_map } = &mut cfg.dataset {
            resolve(dir);
            if let Some(m) = cell_map {
                resolve(m);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            s.validate().map_err(|e| match e {
                Error::Config { field, message } => Error::config(format!("dataset.{field}"), message),
                other => other,
            })?;
        }
        let g = &self.grid;
        for (field, empty) in [
            ("grid.models", g.models.is_empty()),
            ("grid.neurons", g.neurons.is_empty()),
            ("grid.epochs", g.epochs.is_empty()),
            ("grid.seeds", g.seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::config(field, "must not be empty"));
            }
        }
        if g.neurons.contains(&0) {
            return Err(Error::config("grid.neurons", "entries must be positive"));
        }
        if g.epochs.contains(&0) || g.overtraining.is_some_and(|o| o.epochs == 0) {
            return Err(Error::config("grid.epochs", "entries must be at least 1"));
        }
        let p = &self.pipeline;
        crate::data::chrono_split(100, p.train_fraction, p.test_fraction)
            .map_err(|e| Error::config("pipeline.train_fraction", e.to_string()))?;
        if p.forced_k == Some(0) {
            return Err(Error::config("pipeline.forced_k", "must be at least 1"));
        }
        for (field, eps) in [("perturbations.noise", &self.perturbations.noise), ("perturbations.drift", &self.perturbations.drift)] {
            if eps.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
                return Err(Error::config(field, "epsilons must be finite and ≥ 0"));
            }
        }
        for kind in &g.models {
            self.train_config(*kind, g.neurons[0], g.epochs[0], g.seeds[0])
                .validate()
                .map_err(|e| match e {
                    Error::Config { field, message } => Error::config(format!("training.{field}"), message),
                    other => other,
                })?;
        }
        Ok(())
    }

    pub fn train_config(&self, kind: ModelKind, neurons: usize, epochs: usize, seed: u64) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            model_kind: kind,
            neuron_count: neurons,
            epochs,
            learning_rate: t.learning_rate,
            seed,
            truncation_len: t.truncation_len,
            clip_norm: match kind {
                ModelKind::Ncp => t.ncp_clip_norm,
                ModelKind::Lstm => t.lstm_clip_norm,
            },
            dt: t.dt,
            track_test_r2: false,
        }
    }

    /// Scaled, split dataset described by the config.
    pub fn build_dataset(&self) -> Result<Dataset> {
        let p = &self.pipeline;
        match &self.dataset {
            DatasetConfig::Synthetic(spec) => synth_generate(spec)?.prepare(p.train_fraction, p.test_fraction),
            DatasetConfig::Csv { dir, cell_map } => {
                let opts = PreprocessOptions {
                    cell_map: cell_map.clone(),
                    train_fraction: p.train_fraction,
                    test_fraction: p.test_fraction,
                    kmeans: KMeansConfig {
                        k_candidates: p.k_candidates.clone(),
                        seed: p.kmeans_seed,
                        ..Default::default()
                    },
                    forced_k: p.forced_k,
                    select_low_drift: p.select_low_drift,
                };
                Ok(preprocess_dir(dir, &opts)?.dataset)
            }
        }
    }

    /// Training groups `(model, neurons, seed)` with their epoch budgets.
    pub fn groups(&self) -> Vec<Group> {
        let g = &self.grid;
        let mut out = Vec::new();
        for &kind in &g.models {
            for &neurons in &g.neurons {
                for &seed in &g.seeds {
                    let mut budgets: BTreeSet<usize> = g.epochs.iter().copied().collect();
                    if let Some(o) = g.overtraining.filter(|o| o.neurons == neurons) {
                        budgets.insert(o.epochs);
                    }
                    out.push(Group {
                        kind,
                        neurons,
                        seed,
                        budgets: budgets.into_iter().collect(),
                    });
                }
            }
        }
        out
    }
}

/// Runs that share one training trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub kind: ModelKind,
    pub neurons: usize,
    pub seed: u64,
    /// Ascending epoch budgets.
    pub budgets: Vec<usize>,
}

/// Everything one finished run leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_key: String,
    pub train_config: TrainConfig,
    pub train_loss: Vec<f64>,
    pub checkpoint: Checkpoint,
    /// Clean test first, then one per perturbation.
    pub reports: Vec<EvalReport>,
}

/// Hash of the dataset, the training configuration, and the perturbations
/// the run is evaluated under.
pub fn run_key(dataset_fingerprint: &str, cfg: &TrainConfig, perturbations: &[PerturbationSpec]) -> Result<String> {
    crate::io::stable_hash(&(dataset_fingerprint, cfg, perturbations))
}

/// Trains `base` to its largest budget and evaluates a snapshot at each of
/// `budgets` on `clean` and every dataset of `perturbed`.
pub fn train_and_snapshot(clean: &Dataset, perturbed: &[Dataset], base: &TrainConfig, budgets: &[usize]) -> Result<Vec<RunRecord>> {
    let max = *budgets.iter().max().ok_or_else(|| Error::invalid("no epoch budgets"))?;
    let fingerprint = clean.fingerprint()?;
    let specs: Vec<PerturbationSpec> = perturbed
        .iter()
        .map(|d| d.perturbation.as_ref().map(|p| p.spec.clone()).ok_or_else(|| Error::data("perturbed dataset lacks its record")))
        .collect::<Result<_>>()?;
    let steps = clean.split()?.train.len();
    let mut model = base.build_model(clean.feature_count())?;
    let cfg = TrainConfig { epochs: max, ..base.clone() };
    let started = Instant::now();
    let mut losses = Vec::with_capacity(max);
    let mut records = Vec::new();
    train_with(&mut model, clean, &cfg, |end, model| {
        losses.push(end.train_loss);
        if !budgets.contains(&end.epoch) {
            return Ok(());
        }
        let wall = started.elapsed().as_secs_f64();
        let run_cfg = TrainConfig { epochs: end.epoch, ..base.clone() };
        let key = run_key(&fingerprint, &run_cfg, &specs)?;
        let ident = RunIdent {
            run_key: key.clone(),
            model: run_cfg.model_kind,
            neurons: run_cfg.neuron_count,
            epochs: end.epoch,
            seed: run_cfg.seed,
        };
        let ledger = ledger_for(&key, model, steps, end.epoch, wall);
        let mut reports = vec![assemble_report(&ident, &evaluate(model, clean)?, &ledger, None)];
        for d in perturbed {
            reports.push(assemble_report(&ident, &evaluate(model, d)?, &ledger, d.perturbation.as_ref()));
        }
        records.push(RunRecord {
            checkpoint: Checkpoint::from_model(model, &run_cfg.hash()?, run_cfg.seed, end.epoch),
            run_key: key,
            train_config: run_cfg,
            train_loss: losses.clone(),
            reports,
        });
        Ok(())
    })?;
    Ok(records)
}

/// Aggregate over seeds for one `(model, neurons, epochs, perturbation)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: ModelKind,
    pub neurons: usize,
    pub epochs: usize,
    pub perturbation: String,
    pub n_seeds: usize,
    pub r2_mean: f64,
    pub r2_std: f64,
    /// 2.5th and 97.5th percentiles over seeds.
    pub r2_lo: f64,
    pub r2_hi: f64,
    pub mse_mean: f64,
    pub tail_mse_p90_mean: Option<f64>,
    pub params: usize,
    pub flops_total: u64,
    pub wall_seconds_mean: f64,
    pub ks_statistic_mean: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn summarize(reports: &[EvalReport]) -> Result<Vec<SummaryRow>> {
    let mut cells: BTreeMap<(ModelKind, usize, usize, String), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        cells.entry((r.model, r.neurons, r.epochs, r.perturbation.clone())).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((model, neurons, epochs, perturbation), rs)| {
            let r2: Vec<f64> = rs.iter().map(|r| r.r2).collect();
            let optional_mean = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Option<f64> {
                let v: Option<Vec<f64>> = rs.iter().map(|r| f(r)).collect();
                v.map(|v| mean(&v))
            };
            Ok(SummaryRow {
                model,
                neurons,
                epochs,
                perturbation,
                n_seeds: rs.len(),
                r2_mean: mean(&r2),
                r2_std: std_dev(&r2),
                r2_lo: quantile_type7(&r2, 0.025)?,
                r2_hi: quantile_type7(&r2, 0.975)?,
                mse_mean: mean(&rs.iter().map(|r| r.mse).collect::<Vec<_>>()),
                tail_mse_p90_mean: optional_mean(&|r| r.tail_mse_p90),
                params: rs[0].param_count,
                flops_total: rs[0].flops_total,
                wall_seconds_mean: mean(&rs.iter().map(|r| r.train_wall_seconds).collect::<Vec<_>>()),
                ks_statistic_mean: optional_mean(&|r| r.ks_statistic),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct ReportRow<'a> {
    model: ModelKind,
    neurons: usize,
    epochs: usize,
    seed: u64,
    perturbation: &'a str,
    r2: f64,
    mse: f64,
    tail_mse_p90: Option<f64>,
    params: usize,
    flops_total: u64,
    wall_seconds: f64,
    ks_statistic: Option<f64>,
    ks_p: Option<f64>,
    energy_joules: Option<f64>,
    n_test: usize,
    n_tail: usize,
    run_key: &'a str,
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

pub fn write_reports_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(ReportRow {
            model: r.model,
            neurons: r.neurons,
            epochs: r.epochs,
            seed: r.seed,
            perturbation: &r.perturbation,
            r2: r.r2,
            mse: r.mse,
            tail_mse_p90: r.tail_mse_p90,
            params: r.param_count,
            flops_total: r.flops_total,
            wall_seconds: r.train_wall_seconds,
            ks_statistic: r.ks_statistic,
            ks_p: r.ks_p,
            energy_joules: r.train_energy_joules,
            n_test: r.n_test,
            n_tail: r.n_tail,
            run_key: &r.run_key,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn sort_reports(reports: &mut [EvalReport]) {
    reports.sort_by(|a, b| {
        (a.model, a.neurons, a.epochs, a.seed, &a.perturbation).cmp(&(b.model, b.neurons, b.epochs, b.seed, &b.perturbation))
    });
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub reports: Vec<EvalReport>,
    pub summary: Vec<SummaryRow>,
    pub trained_groups: usize,
    pub cached_groups: usize,
}

fn run_path(out: &Path, key: &str) -> PathBuf {
    out.join("runs").join(format!("{key}.json"))
}

/// Loads every cached run under `<output_dir>/runs`.
pub fn load_runs(output_dir: &Path) -> Result<Vec<RunRecord>> {
    let dir = output_dir.join("runs");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| crate::io::read_json(p)).collect()
}

/// Writes `reports.csv`, `summary.csv` and `summary.json` into `dir`.
pub fn write_outputs(dir: &Path, reports: &mut [EvalReport]) -> Result<Vec<SummaryRow>> {
    sort_reports(reports);
    let summary = summarize(reports)?;
    write_reports_csv(&dir.join("reports.csv"), reports)?;
    write_summary_csv(&dir.join("summary.csv"), &summary)?;
    crate::io::write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Runs the full grid, reusing cached runs.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    crate::io::write_json(&out.join("config.json"), cfg)?;
    let clean = cfg.build_dataset()?;
    clean.save(&out.join("dataset.json"))?;
    let fingerprint = clean.fingerprint()?;
    let specs = cfg.perturbations.specs();
    let perturbed: Vec<Dataset> = specs.iter().map(|s| perturb_test(&clean, s)).collect::<Result<_>>()?;

    let groups = cfg.groups();
    let cached = |g: &Group| -> Result<Option<Vec<RunRecord>>> {
        let mut found = Vec::new();
        for &b in &g.budgets {
            let key = run_key(&fingerprint, &cfg.train_config(g.kind, g.neurons, b, g.seed), &specs)?;
            let path = run_path(out, &key);
            match crate::io::read_json::<RunRecord>(&path) {
                Ok(r) if r.run_key == key => found.push(r),
                _ => return Ok(None),
            }
        }
        Ok(Some(found))
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<(bool, Vec<RunRecord>)> = pool.install(|| {
        groups
            .par_iter()
            .map(|g| {
                if let Some(hit) = cached(g)? {
                    return Ok((true, hit));
                }
                let base = cfg.train_config(g.kind, g.neurons, g.budgets[0], g.seed);
                let records = train_and_snapshot(&clean, &perturbed, &base, &g.budgets)?;
                for r in &records {
                    crate::io::write_json(&run_path(out, &r.run_key), r)?;
                }
                log::info!("trained {} n={} seed={} to {} epochs", g.kind, g.neurons, g.seed, g.budgets.last().unwrap_or(&0));
                Ok((false, records))
            })
            .collect::<Result<_>>()
    })?;

    let cached_groups = results.iter().filter(|(c, _)| *c).count();
    let mut reports: Vec<EvalReport> = results.into_iter().flat_map(|(_, rs)| rs).flat_map(|r| r.reports).collect();
    let summary = write_outputs(out, &mut reports)?;
    Ok(SweepOutcome {
        reports,
        summary,
        trained_groups: groups.len() - cached_groups,
        cached_groups,
    })
}
