use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ncpwatt::accounting::{import_energy, ledger_for};
use ncpwatt::data::{
    synth_generate, synth_raw_sites, write_raw_csv, Dataset, DriftProfile, KMeansConfig, PreprocessOptions, SynthSpec,
    TEST_FRACTION, TRAIN_FRACTION,
};
use ncpwatt::experiment::{load_runs, run_sweep, write_outputs, ExperimentConfig};
use ncpwatt::metrics::{assemble_report, RunIdent};
use ncpwatt::model::{Checkpoint, ModelKind};
use ncpwatt::robustness::{perturb_test, KsReference, PerturbTarget, PerturbationKind, PerturbationSpec};
use ncpwatt::trainer::{evaluate, train, TrainConfig, TrainTrace, DEFAULT_DT, DEFAULT_LEARNING_RATE, DEFAULT_TRUNCATION};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

/// LTC/NCP and LSTM energy-estimation experiments.
#[derive(Parser)]
#[command(name = "ncpwatt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, or per-site raw CSVs.
    Synth(SynthArgs),
    /// Turn a directory of per-site CSVs (or an unscaled dataset) into a scaled, split dataset.
    Preprocess(PreprocessArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Evaluate(EvaluateArgs),
    /// Perturb a dataset's test split with noise or drift.
    Perturb(PerturbArgs),
    /// Run a configured hyper-parameter grid.
    Sweep(SweepArgs),
    /// Rebuild report and summary tables from a sweep's run cache.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    rows: usize,
    #[arg(long, default_value_t = 6)]
    features: usize,
    #[arg(long, default_value_t = 0.85)]
    noise_ceiling: f64,
    /// `none` or `light`.
    #[arg(long, default_value = "light")]
    drift: String,
    /// Write the dataset without scaling or splitting.
    #[arg(long)]
    unscaled: bool,
    #[arg(long, default_value_t = TRAIN_FRACTION)]
    train_fraction: f64,
    #[arg(long, default_value_t = TEST_FRACTION)]
    test_fraction: f64,
    /// Output dataset file.
    #[arg(long, required_unless_present = "sites_dir")]
    out: Option<PathBuf>,
    /// Write per-site raw CSVs and a cell map here instead.
    #[arg(long)]
    sites_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    sites: usize,
    #[arg(long, default_value_t = 2)]
    units_per_site: usize,
    #[arg(long, default_value_t = 3)]
    cells_per_unit: usize,
    /// Energy level shift per site, in standard deviations, cycled over sites.
    #[arg(long, value_delimiter = ',', default_value = "0,0,0,2,3,4")]
    drift_levels: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    missing_rate: f64,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory of per-site CSV files.
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    input: Option<PathBuf>,
    /// Unscaled dataset file to split and scale.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `cell_id,unit_id` mapping CSV.
    #[arg(long)]
    cell_map: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8")]
    k_candidates: Vec<usize>,
    /// Use this number of clusters instead of silhouette selection.
    #[arg(long)]
    forced_k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    kmeans_seed: u64,
    /// Keep every unit instead of the lowest-drift cluster.
    #[arg(long)]
    all_units: bool,
    #[arg(long, default_value_t = TRAIN_FRACTION)]
    train_fraction: f64,
    #[arg(long, default_value_t = TEST_FRACTION)]
    test_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// `ncp` or `lstm`.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 16)]
    neurons: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_TRUNCATION)]
    truncation: usize,
    /// Gradient-norm limit, or `none`. Defaults to 1.0 for LSTM, none for NCP.
    #[arg(long)]
    clip: Option<String>,
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
    /// Record test R² after each epoch.
    #[arg(long)]
    track_test_r2: bool,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Optional training trace output.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training trace, for wall time.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// `run_id,joules` meter readings; matched on the checkpoint's config hash.
    #[arg(long)]
    energy: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// `noise` or `drift`.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `features` or `label`; defaults to features for noise, label for drift.
    #[arg(long)]
    target: Option<String>,
    /// `clean_test` or `train`.
    #[arg(long, default_value = "clean_test")]
    ks_reference: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `workers` from the config.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Sweep output directory.
    #[arg(long)]
    dir: PathBuf,
    /// `run_id,joules` meter readings keyed by run key.
    #[arg(long)]
    energy: Option<PathBuf>,
}

fn parse<T: std::str::FromStr<Err = ncpwatt::Error>>(field: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|e: ncpwatt::Error| ncpwatt::Error::Config {
            field: field.into(),
            message: e.to_string(),
        })
        .map_err(Into::into)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        seed: a.seed,
        rows: a.rows,
        features: a.features,
        noise_ceiling: a.noise_ceiling,
        drift: parse::<DriftProfile>("drift", &a.drift)?,
    };
    if let Some(dir) = a.sites_dir {
        let recs = synth_raw_sites(&spec, a.sites, a.units_per_site, a.cells_per_unit, &a.drift_levels, a.missing_rate)?;
        let mut map = String::from("cell_id,unit_id\n");
        for s in 0..a.sites {
            let site = format!("site{s:03}");
            let mut mine: Vec<_> = recs.iter().filter(|r| r.site_id == site).cloned().collect();
            for r in &mine {
                if r.timestamp == mine[0].timestamp {
                    map.push_str(&format!("{},{}\n", r.cell_id.as_deref().unwrap_or_default(), r.unit_id));
                }
            }
            // Unit ids come from the map, not the file.
            mine.iter_mut().for_each(|r| r.unit_id.clear());
            write_raw_csv(&dir.join(format!("{site}.csv")), &mine)?;
        }
        let map_path = dir.join("cell_map.csv");
        std::fs::write(&map_path, map).with_context(|| format!("writing {}", map_path.display()))?;
        println!("wrote {} sites to {}", a.sites, dir.display());
    }
    if let Some(out) = a.out {
        let mut ds = synth_generate(&spec)?;
        if !a.unscaled {
            ds = ds.prepare(a.train_fraction, a.test_fraction)?;
        }
        ds.save(&out)?;
        println!("wrote {} rows to {}", ds.len(), out.display());
    }
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let ds = if let Some(path) = a.dataset {
        Dataset::load(&path)?.prepare(a.train_fraction, a.test_fraction)?
    } else {
        let dir = a.input.context("--input is required")?;
        let opts = PreprocessOptions {
            cell_map: a.cell_map,
            train_fraction: a.train_fraction,
            test_fraction: a.test_fraction,
            kmeans: KMeansConfig {
                k_candidates: a.k_candidates,
                seed: a.kmeans_seed,
                ..Default::default()
            },
            forced_k: a.forced_k,
            select_low_drift: !a.all_units,
        };
        let out = ncpwatt::data::preprocess_dir(&dir, &opts)?;
        let units: Vec<serde_json::Value> = out
            .series
            .iter()
            .zip(&out.summaries)
            .enumerate()
            .map(|(i, (s, d))| {
                serde_json::json!({
                    "site_id": s.site_id,
                    "unit_id": s.unit_id,
                    "drift_summary": d,
                    "cluster": out.clustering.as_ref().map(|c| c.assignments[i]),
                    "selected": out.selected.contains(&i),
                })
            })
            .collect();
        print_json(&serde_json::json!({
            "k": out.clustering.as_ref().map(|c| c.k),
            "silhouette": out.clustering.as_ref().and_then(|c| c.silhouette),
            "units": units,
        }))?;
        out.dataset
    };
    ds.save(&a.out)?;
    eprintln!("wrote {} rows to {}", ds.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let kind: ModelKind = parse("model", &a.model)?;
    let mut cfg = TrainConfig::new(kind, a.neurons, a.epochs, a.seed);
    cfg.learning_rate = a.lr;
    cfg.truncation_len = a.truncation;
    cfg.dt = a.dt;
    cfg.track_test_r2 = a.track_test_r2;
    if let Some(c) = a.clip {
        cfg.clip_norm = match c.as_str() {
            "none" | "off" => None,
            v => Some(v.parse().map_err(|_| ncpwatt::Error::Config {
                field: "clip".into(),
                message: format!("`{v}` is not a number or `none`"),
            })?),
        };
    }
    let mut model = cfg.build_model(ds.feature_count())?;
    let trace = train(&mut model, &ds, &cfg)?;
    trace.checkpoint.save(&a.out)?;
    if let Some(t) = a.trace {
        ncpwatt::io::write_json(&t, &trace)?;
    }
    println!(
        "trained {kind} ({} params) for {} epochs: final train loss {:.6}, {:.1}s",
        model.param_count(),
        cfg.epochs,
        trace.train_loss.last().copied().unwrap_or(f64::NAN),
        trace.wall_seconds()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.to_model()?;
    if model.input_dim() != ds.feature_count() {
        bail!("checkpoint expects {} features, dataset has {}", model.input_dim(), ds.feature_count());
    }
    let metrics = evaluate(&model, &ds)?;
    let wall = match &a.trace {
        Some(p) => ncpwatt::io::read_json::<TrainTrace>(p)?.wall_seconds(),
        None => 0.0,
    };
    let mut ledger = ledger_for(&ck.cfg_hash, &model, ds.split()?.train.len(), ck.epochs_trained, wall);
    if let Some(meter) = &a.energy {
        ledger.external_energy_joules = import_energy(meter)?.get(&ck.cfg_hash).copied();
    }
    let ident = RunIdent {
        run_key: ck.cfg_hash.clone(),
        model: ck.kind,
        neurons: ck.neurons,
        epochs: ck.epochs_trained,
        seed: ck.seed,
    };
    let report = assemble_report(&ident, &metrics, &ledger, ds.perturbation.as_ref());
    if let Some(out) = &a.out {
        ncpwatt::io::write_json(out, &report)?;
    }
    print_json(&report)
}

fn cmd_perturb(a: PerturbArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let kind: PerturbationKind = parse("kind", &a.kind)?;
    let mut spec = PerturbationSpec::new(kind, a.epsilon, a.seed);
    if let Some(t) = &a.target {
        spec.target = parse::<PerturbTarget>("target", t)?;
    }
    spec.ks_reference = parse::<KsReference>("ks_reference", &a.ks_reference)?;
    let out = perturb_test(&ds, &spec)?;
    out.save(&a.out)?;
    print_json(&out.perturbation)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    let outcome = run_sweep(&cfg)?;
    println!(
        "{} report rows ({} groups trained, {} cached) in {}",
        outcome.reports.len(),
        outcome.trained_groups,
        outcome.cached_groups,
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let runs = load_runs(&a.dir)?;
    if runs.is_empty() {
        bail!("{}: no cached runs", a.dir.display());
    }
    let energy = a.energy.as_deref().map(import_energy).transpose()?;
    let mut reports: Vec<_> = runs.into_iter().flat_map(|r| r.reports).collect();
    if let Some(readings) = &energy {
        for r in &mut reports {
            r.train_energy_joules = readings.get(&r.run_key).copied();
        }
    }
    let summary = write_outputs(&a.dir, &mut reports)?;
    println!("{} report rows, {} summary rows in {}", reports.len(), summary.len(), a.dir.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<ncpwatt::Error>()) {
        Some(e) if e.is_config_error() => EXIT_CONFIG,
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_RUNTIME,
    }
}

fn check_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(ncpwatt::Error::Config {
            field: what.into(),
            message: format!("{} does not exist", path.display()),
        }
        .into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => {
            if let Some(p) = a.input.as_deref().or(a.dataset.as_deref()) {
                check_exists(p, "input")?;
            }
            cmd_preprocess(a)
        }
        Command::Train(a) => {
            check_exists(&a.dataset, "dataset")?;
            cmd_train(a)
        }
        Command::Evaluate(a) => {
            check_exists(&a.dataset, "dataset")?;
            check_exists(&a.checkpoint, "checkpoint")?;
            cmd_evaluate(a)
        }
        Command::Perturb(a) => {
            check_exists(&a.dataset, "dataset")?;
            cmd_perturb(a)
        }
        Command::Sweep(a) => {
            check_exists(&a.config, "config")?;
            cmd_sweep(a)
        }
        Command::Report(a) => {
            check_exists(&a.dir, "dir")?;
            cmd_report(a)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
