//! Pipeline entry point. Each stage is a subcommand reading and writing the
//! file formats defined in `healthmon-core`; every command overwrites its
//! output files, so re-runs are idempotent. Log level comes from `RUST_LOG`.
//!
//! Exit codes: 0 success; 1 completed with nothing to produce (e.g. `report`
//! found no alerts); 2 usage error; 3 data error; internal panics abort with
//! the standard Rust status.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use healthmon_core::detector::{
    gradient_check, load_model, random_check_batch, save_model, train, train_forecast_stage,
    tune_threshold, ForecastModel, TrainConfig,
};
use healthmon_core::error::Error;
use healthmon_core::evalkit::{
    evaluate, evaluate_external, write_results, Detector, EvalConfig,
};
use healthmon_core::postprocess::{
    decisions_to_records, interval_record, postprocess, read_decision_records,
    series_from_records, write_decision_records, DecisionRecord, FilterConfig, GroupingRule,
};
use healthmon_core::report::{build_bundle, write_report, ImportanceConfig};
use healthmon_core::series::{build_series, read_dataset, write_dataset};
use healthmon_core::stats::{
    aggregate_daily_with, compute_traffic_ratio, model_product_assignment, read_stats,
    write_stats, AggregateOptions, EventReader, StatisticKind,
};
use healthmon_core::synth::{generate_dataset, write_manifest, SynthGrid};

#[derive(Parser)]
#[command(
    name = "healthmon",
    about = "Model-health statistics, anomaly detection, and alerting pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate a scoring-event log into daily statistic rows (CSV).
    Aggregate(AggregateArgs),
    /// Train the two-stage detector on a labeled dataset.
    Train(TrainArgs),
    /// Run rolling detection over a stats file, producing decision records.
    Detect(DetectArgs),
    /// Filter decision records into intervals and model-level alerts.
    Postprocess(PostprocessArgs),
    /// Generate a synthetic labeled benchmark dataset.
    Synth(SynthArgs),
    /// Evaluate a detector (or an external decisions file) on a labeled dataset.
    Eval(EvalArgs),
    /// Render static HTML reports for model alerts.
    Report(ReportArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct AggregateArgs {
    /// Newline-delimited JSON scoring events.
    #[arg(long)]
    events: PathBuf,
    /// Output stats CSV.
    #[arg(long)]
    out: PathBuf,
    /// Value treated as "default" for coverage statistics.
    #[arg(long, default_value_t = 0.0)]
    default_value: f64,
    /// Optional JSON file mapping feature name to its default value.
    #[arg(long)]
    feature_defaults: Option<PathBuf>,
    /// Abort on the first malformed line instead of skipping it.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// History length in days.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), default_value_t = 28)]
    horizon: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Train only the forecasting stage (classifier stays at initialization).
    #[arg(long)]
    forecast_only: bool,
    /// Optional labeled validation dataset for threshold tuning.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Candidate anomaly thresholds to tune over (requires --validation).
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6")]
    tune_grid: Vec<f64>,
}

#[derive(Args)]
struct DetectArgs {
    /// Trained model file; repeat the flag to cover both horizons.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    /// Stats CSV from `aggregate`.
    #[arg(long)]
    stats: PathBuf,
    /// Output decisions file (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Detection threads (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PostprocessArgs {
    /// Decisions file from `detect`.
    #[arg(long)]
    decisions: PathBuf,
    /// Output file: decision records plus interval and alert records.
    #[arg(long)]
    out: PathBuf,
    /// Optional stats CSV supplying traffic ratios for the MTR filter.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Optional JSON filter configuration (flag overrides apply on top).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    duration_threshold: Option<u32>,
    #[arg(long)]
    severity_threshold: Option<f64>,
    /// Enables the concurrency filter with the given threshold.
    #[arg(long)]
    concurrency_threshold: Option<f64>,
    #[arg(long)]
    mtr_threshold: Option<f64>,
    /// Disable all filters (alerts equal raw grouped detections).
    #[arg(long)]
    no_filters: bool,
    /// Restrict alerts to these entities (subset-OR grouping).
    #[arg(long, value_delimiter = ',')]
    entities: Option<Vec<String>>,
}

#[derive(Args)]
struct SynthArgs {
    /// Optional JSON grid configuration; defaults to the standard benchmark grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Series per grid cell.
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for dataset.jsonl and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct EvalArgs {
    /// Labeled dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Trained model file; repeat for both horizons.
    #[arg(long, conflicts_with = "decisions")]
    model: Vec<PathBuf>,
    /// Score an externally produced decisions file instead of a model.
    #[arg(long)]
    decisions: Option<PathBuf>,
    /// Apply the interval filters before matching.
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    filters: Toggle,
    /// Gate anomalies on the classifier probability.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    classifier: Toggle,
    #[arg(long)]
    workers: Option<usize>,
    /// Output results JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Decisions file containing alert records (from `postprocess`).
    #[arg(long)]
    alerts: PathBuf,
    /// Stats CSV for observed values and traffic.
    #[arg(long)]
    stats: PathBuf,
    /// Decisions file for forecast bands.
    #[arg(long)]
    decisions: PathBuf,
    /// Optional importance configuration (JSON).
    #[arg(long)]
    importance: Option<PathBuf>,
    /// Output directory, one HTML file per alert.
    #[arg(long)]
    out: PathBuf,
    /// Timestamp embedded in the reports (default: now, UTC).
    #[arg(long)]
    timestamp: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 14)]
    horizon: usize,
    /// Windows in the check batch.
    #[arg(long, default_value_t = 8)]
    windows: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Aggregate(args) => cmd_aggregate(args),
        Command::Train(args) => cmd_train(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Postprocess(args) => cmd_postprocess(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            log::error!("{err}");
            match err {
                Error::InvalidInput(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

type CmdResult = Result<ExitCode, Error>;

fn cmd_aggregate(args: AggregateArgs) -> CmdResult {
    let mut opts = AggregateOptions {
        default_value: args.default_value,
        per_feature_defaults: BTreeMap::new(),
    };
    if let Some(path) = &args.feature_defaults {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        opts.per_feature_defaults =
            serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))?;
    }

    let mut reader = EventReader::open(&args.events, args.strict)?;
    let mut events = Vec::new();
    for ev in reader.by_ref() {
        events.push(ev?);
    }
    if reader.rejects() > 0 {
        log::warn!("skipped {} malformed event lines", reader.rejects());
    }

    let assignment = model_product_assignment(&events)?;
    let mut rows = aggregate_daily_with(events, &opts);
    rows.extend(compute_traffic_ratio(&rows, &assignment)?);
    write_stats(&args.out, &rows)?;
    log::info!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let dataset = read_dataset(&args.data)?;
    let cfg = TrainConfig {
        horizon: args.horizon as usize,
        batch_size: args.batch_size,
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        lambda: args.lambda,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let mut model = if args.forecast_only {
        train_forecast_stage(&dataset, &cfg)?
    } else {
        train(&dataset, &cfg)?
    };
    if let Some(validation) = &args.validation {
        let val = read_dataset(validation)?;
        let theta = tune_threshold(&model, &val, &args.tune_grid)?;
        log::info!("tuned anomaly threshold: {theta}");
        model.theta_anomaly = theta;
    }
    save_model(&model, &args.out)?;
    log::info!("wrote model (horizon {}) to {}", model.horizon, args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_detector(paths: &[PathBuf]) -> Result<Detector, Error> {
    let models: Vec<ForecastModel> = paths.iter().map(|p| load_model(p)).collect::<Result<_, _>>()?;
    Detector::new(models)
}

fn cmd_detect(args: DetectArgs) -> CmdResult {
    let detector = load_detector(&args.model)?;
    let rows = read_stats(&args.stats)?;
    let series = build_series(&rows)?;
    let workers = args.workers.unwrap_or_else(num_cpus);
    let decisions: Vec<_> = {
        let labeled: Vec<healthmon_core::series::LabeledSeries> = series
            .into_iter()
            .map(healthmon_core::series::LabeledSeries::unlabeled)
            .collect();
        healthmon_core::evalkit::rolling_detect(&labeled, &detector, workers)
    };
    let records = decisions_to_records(&decisions);
    write_decision_records(&args.out, &records)?;
    log::info!("wrote {} decisions to {}", records.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn traffic_ratio_map(stats: &Path) -> Result<BTreeMap<(String, chrono::NaiveDate), f64>, Error> {
    let rows = read_stats(stats)?;
    Ok(rows
        .iter()
        .filter(|r| r.statistic == StatisticKind::TrafficRatio)
        .filter_map(|r| r.value.map(|v| ((r.model_id.clone(), r.date), v)))
        .collect())
}

fn cmd_postprocess(args: PostprocessArgs) -> CmdResult {
    let records = read_decision_records(&args.decisions)?;
    let decisions = series_from_records(&records);

    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<FilterConfig>(&text).map_err(|e| Error::Data(e.to_string()))?
        }
        None => FilterConfig::default(),
    };
    if args.no_filters {
        cfg = FilterConfig::disabled();
    }
    if let Some(v) = args.duration_threshold {
        cfg.duration_enabled = true;
        cfg.duration_threshold = v;
    }
    if let Some(v) = args.severity_threshold {
        cfg.severity_enabled = true;
        cfg.severity_threshold = v;
    }
    if let Some(v) = args.concurrency_threshold {
        cfg.concurrency_enabled = true;
        cfg.concurrency_threshold = v;
    }
    if let Some(v) = args.mtr_threshold {
        cfg.mtr_enabled = true;
        cfg.mtr_threshold = v;
    }

    let traffic = match &args.stats {
        Some(path) => traffic_ratio_map(path)?,
        None => BTreeMap::new(),
    };
    let rule = match &args.entities {
        Some(entities) => GroupingRule::SubsetOr(entities.clone()),
        None => GroupingRule::Or,
    };

    let output = postprocess(&decisions, &cfg, &rule, &traffic)?;
    let mut out_records = decisions_to_records(&decisions);
    out_records.extend(output.intervals.iter().map(interval_record));
    out_records.extend(output.alerts.iter().cloned().map(DecisionRecord::Alert));
    write_decision_records(&args.out, &out_records)?;
    log::info!(
        "{} intervals ({} kept), {} alerts -> {}",
        output.intervals.len(),
        output.intervals.iter().filter(|fi| fi.kept).count(),
        output.alerts.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let grid = match &args.grid {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<SynthGrid>(&text).map_err(|e| Error::Data(e.to_string()))?
        }
        None => SynthGrid::default(),
    };
    let (dataset, manifest) = generate_dataset(&grid, args.n, args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_dataset(&args.out.join("dataset.jsonl"), &dataset)?;
    write_manifest(&args.out.join("manifest.jsonl"), &manifest)?;
    // Flattened stats view of the same series, so `detect` can run on it.
    let rows: Vec<_> = dataset
        .iter()
        .flat_map(|ls| healthmon_core::series::flatten_series(&ls.series))
        .collect();
    write_stats(&args.out.join("stats.csv"), &rows)?;
    log::info!("wrote {} series to {}", dataset.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let dataset = read_dataset(&args.data)?;
    let cfg = EvalConfig {
        filters: (args.filters == Toggle::On).then(FilterConfig::default),
        classifier_enabled: args.classifier == Toggle::On,
        workers: args.workers.unwrap_or_else(num_cpus),
    };
    let result = if let Some(path) = &args.decisions {
        let records = read_decision_records(path)?;
        let decisions = series_from_records(&records);
        evaluate_external(&dataset, &decisions, &cfg)
    } else {
        if args.model.is_empty() {
            return Err(Error::InvalidInput(
                "eval needs --model (repeatable) or --decisions".into(),
            ));
        }
        let detector = load_detector(&args.model)?;
        evaluate(&dataset, &detector, &cfg)
    };
    write_results(&args.out, &result)?;
    log::info!(
        "precision {:.4} recall {:.4} f1 {:.4} ({} decisions, {:.2}s) -> {}",
        result.precision,
        result.recall,
        result.f1,
        result.n_decisions,
        result.wall_time_secs,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> CmdResult {
    let alert_records = read_decision_records(&args.alerts)?;
    let alerts: Vec<_> = alert_records
        .iter()
        .filter_map(|r| match r {
            DecisionRecord::Alert(alert) => Some(alert.clone()),
            _ => None,
        })
        .collect();
    if alerts.is_empty() {
        log::info!("no alerts in {}; nothing to render", args.alerts.display());
        return Ok(ExitCode::from(1));
    }
    let stats = read_stats(&args.stats)?;
    let records = read_decision_records(&args.decisions)?;
    let importance = match &args.importance {
        Some(path) => ImportanceConfig::load(path)?,
        None => ImportanceConfig::default(),
    };
    let timestamp = args
        .timestamp
        .unwrap_or_else(|| chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string());
    for alert in &alerts {
        let bundle = build_bundle(alert, &stats, &records, &importance, &timestamp);
        let path = write_report(&bundle, &args.out)?;
        log::info!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    let model = ForecastModel::fresh(args.horizon, args.seed)?;
    let batch = random_check_batch(args.seed.wrapping_add(1000), args.windows, args.horizon);
    let report = gradient_check(&model, &batch)?;
    println!(
        "max relative gradient error: {:.3e} (forecast stage {:.3e}, classifier stage {:.3e})",
        report.max(),
        report.stage1,
        report.stage2
    );
    Ok(ExitCode::SUCCESS)
}

fn num_cpus() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
