//! Rolling-window evaluation: applying a detector over labeled datasets,
//! interval-wise precision/recall/F1 with 7-day chopping, ablation toggles
//! (filters, classifier), external-decisions scoring, and a timing harness.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{classifier_forward, forecast_forward, ForecastModel};
use crate::error::{Error, Result};
use crate::postprocess::{
    apply_filters, concurrency_snapshot, merge_points_to_intervals, DayDecision, FilterConfig,
    FilterContext, SeriesDecisions,
};
use crate::series::{build_window, DetectionWindow, LabeledSeries, UnivariateSeries};

/// Chopped intervals never exceed this many days.
pub const CHOP_DAYS: i64 = 7;

/// Interval-level confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, other: Self) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }
}

/// Precision/recall/F1 with the zero-denominator-is-zero convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// One evaluation run, as written to the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub fingerprint: String,
    pub counts: MatchCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub wall_time_secs: f64,
    pub n_series: usize,
    pub n_decisions: usize,
    pub filters_enabled: bool,
    pub classifier_enabled: bool,
    pub workers: usize,
}

impl EvalResult {
    /// The deterministic part of a result (everything except timing).
    pub fn deterministic_view(&self) -> (String, MatchCounts, [u64; 3]) {
        (
            self.fingerprint.clone(),
            self.counts,
            [
                self.precision.to_bits(),
                self.recall.to_bits(),
                self.f1.to_bits(),
            ],
        )
    }
}

/// A trained detector: one model per horizon plus ablation switches.
#[derive(Debug, Clone)]
pub struct Detector {
    models: BTreeMap<usize, ForecastModel>,
    /// When false, decisions use the boundary check alone.
    pub classifier_enabled: bool,
}

impl Detector {
    pub fn new(models: impl IntoIterator<Item = ForecastModel>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for model in models {
            model_checked(&model)?;
            if map.insert(model.horizon, model).is_some() {
                return Err(Error::InvalidInput(
                    "two models share the same horizon".into(),
                ));
            }
        }
        if map.is_empty() {
            return Err(Error::InvalidInput("detector needs at least one model".into()));
        }
        Ok(Detector {
            models: map,
            classifier_enabled: true,
        })
    }

    pub fn single(model: ForecastModel) -> Self {
        Detector::new([model]).expect("one valid model")
    }

    pub fn with_classifier(mut self, enabled: bool) -> Self {
        self.classifier_enabled = enabled;
        self
    }

    pub fn model_for(&self, horizon: usize) -> Option<&ForecastModel> {
        self.models.get(&horizon)
    }

    pub fn horizons(&self) -> Vec<usize> {
        self.models.keys().copied().collect()
    }

    /// Decides one window; `None` when the window is invalid or no model
    /// matches its horizon.
    pub fn decide_window(&self, window: &DetectionWindow) -> Option<DayDecision> {
        if !window.is_valid() {
            return None;
        }
        let model = self.models.get(&window.horizon)?;
        let forecast = forecast_forward(window, model).ok()?;
        let observed = window.observed?;
        let out_of_boundary = observed < forecast.lower || observed > forecast.upper;
        let probability = classifier_forward(model, &forecast, observed);
        let is_anomaly = if self.classifier_enabled {
            out_of_boundary && probability >= model.theta_anomaly
        } else {
            out_of_boundary
        };
        let width = (forecast.upper - forecast.lower).max(1e-8);
        Some(DayDecision {
            date: window.target_day,
            observed,
            baseline: forecast.baseline,
            lower: forecast.lower,
            upper: forecast.upper,
            decision: crate::detector::PointDecision {
                probability,
                out_of_boundary,
                is_anomaly,
                severity: (forecast.baseline - observed).abs() / width,
            },
        })
    }

    /// Rolls over every day of a series, skipping days without a valid
    /// window or a matching horizon model.
    pub fn detect_series(&self, series: &UnivariateSeries) -> SeriesDecisions {
        let days = (0..series.len())
            .filter_map(|i| self.decide_window(&build_window(series, i)))
            .collect();
        SeriesDecisions {
            key: series.key.clone(),
            days,
        }
    }
}

fn model_checked(model: &ForecastModel) -> Result<&ForecastModel> {
    if crate::series::select_horizon(model.horizon) != Some(model.horizon) {
        return Err(Error::InvalidInput(format!(
            "model horizon {} is not a selectable horizon",
            model.horizon
        )));
    }
    Ok(model)
}

/// Applies the detector across the dataset, fanning out over `workers`
/// threads. Output order (and content) is independent of the worker count.
pub fn rolling_detect(
    dataset: &[LabeledSeries],
    detector: &Detector,
    workers: usize,
) -> Vec<SeriesDecisions> {
    detect_many(dataset.iter().map(|ls| &ls.series), detector, workers)
}

fn detect_many<'a, I>(series: I, detector: &Detector, workers: usize) -> Vec<SeriesDecisions>
where
    I: Iterator<Item = &'a UnivariateSeries>,
{
    let series: Vec<&UnivariateSeries> = series.collect();
    if workers <= 1 {
        return series.iter().map(|s| detector.detect_series(s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    pool.install(|| {
        use rayon::prelude::*;
        series.par_iter().map(|s| detector.detect_series(s)).collect()
    })
}

/// Splits intervals longer than seven days into greedy left-to-right chunks.
pub fn chop_intervals(intervals: &[(NaiveDate, NaiveDate)]) -> Vec<(NaiveDate, NaiveDate)> {
    let mut out = Vec::new();
    for &(start, end) in intervals {
        let mut cur = start;
        while cur <= end {
            let chunk_end = (cur + Duration::days(CHOP_DAYS - 1)).min(end);
            out.push((cur, chunk_end));
            cur = chunk_end + Duration::days(1);
        }
    }
    out
}

fn overlaps(a: (NaiveDate, NaiveDate), b: (NaiveDate, NaiveDate)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

/// Interval-wise matching: a labeled interval overlapping any prediction is
/// one true positive, an unmatched label one false negative, and a
/// prediction overlapping no label one false positive. Both sides should be
/// pre-chopped. A prediction spanning two labels credits both, but counts
/// itself only once.
pub fn match_intervals(
    predicted: &[(NaiveDate, NaiveDate)],
    labeled: &[(NaiveDate, NaiveDate)],
) -> MatchCounts {
    let mut counts = MatchCounts::default();
    for &label in labeled {
        if predicted.iter().any(|&p| overlaps(p, label)) {
            counts.true_positives += 1;
        } else {
            counts.false_negatives += 1;
        }
    }
    for &p in predicted {
        if !labeled.iter().any(|&label| overlaps(p, label)) {
            counts.false_positives += 1;
        }
    }
    counts
}

/// Standard precision/recall/F1 from interval counts.
pub fn compute_prf(counts: MatchCounts) -> EvalMetrics {
    let tp = counts.true_positives as f64;
    let fp = counts.false_positives as f64;
    let fn_ = counts.false_negatives as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    EvalMetrics {
        precision,
        recall,
        f1,
    }
}

/// Evaluation switches; the fingerprint captures all of them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Interval filters applied before matching (`None` = filters off).
    pub filters: Option<FilterConfig>,
    pub classifier_enabled: bool,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            filters: None,
            classifier_enabled: true,
            workers: 1,
        }
    }
}

/// SHA-256 over a canonical JSON description of the run configuration.
pub fn fingerprint(cfg: &EvalConfig, detector_horizons: &[usize], dataset_len: usize) -> String {
    let descr = serde_json::json!({
        "filters": cfg.filters,
        "classifier_enabled": cfg.classifier_enabled,
        "horizons": detector_horizons,
        "n_series": dataset_len,
    });
    let mut hasher = Sha256::new();
    hasher.update(descr.to_string().as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Scores a decision set against dataset labels: merge to intervals, apply
/// optional filters, chop both sides, and match.
pub fn score_decisions(
    dataset: &[LabeledSeries],
    decisions: &[SeriesDecisions],
    filters: Option<&FilterConfig>,
) -> (MatchCounts, EvalMetrics) {
    let by_key: BTreeMap<_, _> = decisions.iter().map(|sd| (sd.key.clone(), sd)).collect();
    let ctx = FilterContext {
        concurrency: concurrency_snapshot(decisions),
        traffic_ratio: BTreeMap::new(),
    };

    let mut counts = MatchCounts::default();
    for ls in dataset {
        let predicted: Vec<(NaiveDate, NaiveDate)> = match by_key.get(&ls.series.key) {
            Some(sd) => {
                let intervals = merge_points_to_intervals(&sd.key, &sd.points());
                match filters {
                    Some(cfg) => apply_filters(&intervals, cfg, &ctx)
                        .into_iter()
                        .filter(|fi| fi.kept)
                        .map(|fi| (fi.interval.start, fi.interval.end))
                        .collect(),
                    None => intervals.iter().map(|iv| (iv.start, iv.end)).collect(),
                }
            }
            None => Vec::new(),
        };
        let labeled: Vec<(NaiveDate, NaiveDate)> =
            ls.anomalies.iter().map(|iv| (iv.start, iv.end)).collect();
        counts += match_intervals(&chop_intervals(&predicted), &chop_intervals(&labeled));
    }
    (counts, compute_prf(counts))
}

/// Full evaluation: rolling detection (timed) plus interval-wise scoring.
/// The clock starts after the dataset is already in memory, so parsing never
/// counts against the detector.
pub fn evaluate(dataset: &[LabeledSeries], detector: &Detector, cfg: &EvalConfig) -> EvalResult {
    let detector = detector.clone().with_classifier(cfg.classifier_enabled);
    let t0 = Instant::now();
    let decisions = rolling_detect(dataset, &detector, cfg.workers);
    let wall_time_secs = t0.elapsed().as_secs_f64();

    let (counts, metrics) = score_decisions(dataset, &decisions, cfg.filters.as_ref());
    EvalResult {
        fingerprint: fingerprint(cfg, &detector.horizons(), dataset.len()),
        counts,
        precision: metrics.precision,
        recall: metrics.recall,
        f1: metrics.f1,
        wall_time_secs,
        n_series: dataset.len(),
        n_decisions: decisions.iter().map(|sd| sd.days.len()).sum(),
        filters_enabled: cfg.filters.is_some(),
        classifier_enabled: cfg.classifier_enabled,
        workers: cfg.workers,
    }
}

/// Scores an externally produced decisions file against dataset labels.
pub fn evaluate_external(
    dataset: &[LabeledSeries],
    decisions: &[SeriesDecisions],
    cfg: &EvalConfig,
) -> EvalResult {
    let (counts, metrics) = score_decisions(dataset, decisions, cfg.filters.as_ref());
    EvalResult {
        fingerprint: fingerprint(cfg, &[], dataset.len()),
        counts,
        precision: metrics.precision,
        recall: metrics.recall,
        f1: metrics.f1,
        wall_time_secs: 0.0,
        n_series: dataset.len(),
        n_decisions: decisions.iter().map(|sd| sd.days.len()).sum(),
        filters_enabled: cfg.filters.is_some(),
        classifier_enabled: cfg.classifier_enabled,
        workers: cfg.workers,
    }
}

pub fn write_results(path: &Path, result: &EvalResult) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, result).map_err(|e| Error::Data(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Collects every valid, horizon-matched window of a dataset; the prepared
/// input for throughput measurements.
pub fn collect_valid_windows(dataset: &[LabeledSeries], detector: &Detector) -> Vec<DetectionWindow> {
    let mut out = Vec::new();
    for ls in dataset {
        for i in 0..ls.series.len() {
            let w = build_window(&ls.series, i);
            if w.is_valid() && detector.model_for(w.horizon).is_some() {
                out.push(w);
            }
        }
    }
    out
}

/// Wall time per worker count over prepared windows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub windows: usize,
    /// (worker count, median seconds over the measured repetitions).
    pub results: Vec<(usize, f64)>,
}

impl TimingReport {
    pub fn seconds_for(&self, workers: usize) -> Option<f64> {
        self.results.iter().find(|(w, _)| *w == workers).map(|(_, s)| *s)
    }
}

/// Measures detection wall time over prepared windows for each worker count.
/// Each configuration gets one warm-up pass and `reps` measured passes; the
/// median is reported.
pub fn timing_harness(
    detector: &Detector,
    windows: &[DetectionWindow],
    worker_counts: &[usize],
    reps: usize,
) -> TimingReport {
    let run = |workers: usize| -> f64 {
        let t0 = Instant::now();
        if workers <= 1 {
            for w in windows {
                let _ = detector.decide_window(w);
            }
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .expect("thread pool");
            pool.install(|| {
                use rayon::prelude::*;
                windows.par_iter().for_each(|w| {
                    let _ = detector.decide_window(w);
                });
            });
        }
        t0.elapsed().as_secs_f64()
    };

    let mut results = Vec::new();
    for &workers in worker_counts {
        let _warmup = run(workers);
        let mut times: Vec<f64> = (0..reps.max(1)).map(|_| run(workers)).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        results.push((workers, times[times.len() / 2]));
    }
    TimingReport {
        windows: windows.len(),
        results,
    }
}
