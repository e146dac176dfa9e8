//! Daily model-health statistics from scoring-event logs.
//!
//! Parses newline-delimited scoring events and aggregates them into one row
//! per (model, entity, statistic, day): feature value distributions, feature
//! coverage, score distributions, traffic counts, and per-product traffic
//! ratios. Non-scalar features (categorical, vector) are expanded into
//! scalar entities before aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;

/// Entity name used for output-score statistics.
pub const SCORE_ENTITY: &str = "score";
/// Entity name used for model-level statistics (traffic, traffic ratio).
pub const MODEL_ENTITY: &str = "model";

const QUANTILES: [(f64, u8); 5] = [(0.05, 5), (0.25, 25), (0.50, 50), (0.75, 75), (0.95, 95)];

/// One scoring request as logged by a serving pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoringEvent {
    pub model_id: String,
    pub product_id: String,
    /// UTC epoch milliseconds.
    pub timestamp: i64,
    /// Feature name to observed value; absent or `null` means missing.
    #[serde(default)]
    pub features: BTreeMap<String, Option<FeatureValue>>,
    pub score: f64,
}

impl ScoringEvent {
    /// UTC calendar day of the event.
    pub fn day(&self) -> Option<NaiveDate> {
        DateTime::from_timestamp_millis(self.timestamp).map(|dt| dt.date_naive())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.model_id.is_empty() {
            return Err("empty model_id".into());
        }
        if self.product_id.is_empty() {
            return Err("empty product_id".into());
        }
        if self.day().is_none() {
            return Err(format!("timestamp {} out of range", self.timestamp));
        }
        Ok(())
    }
}

/// A feature value observed on a single event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Scalar(f64),
    Categorical(String),
    Vector(Vec<f64>),
}

/// Which statistic a [`DailyStatRow`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum StatisticKind {
    Mean,
    Std,
    P5,
    P25,
    P50,
    P75,
    P95,
    CoverageNondefault,
    CoverageNonmissing,
    ScoreMean,
    ScoreStd,
    ScoreQuantile(u8),
    Traffic,
    TrafficRatio,
}

impl StatisticKind {
    pub fn as_str(&self) -> String {
        match self {
            StatisticKind::Mean => "mean".into(),
            StatisticKind::Std => "std".into(),
            StatisticKind::P5 => "p5".into(),
            StatisticKind::P25 => "p25".into(),
            StatisticKind::P50 => "p50".into(),
            StatisticKind::P75 => "p75".into(),
            StatisticKind::P95 => "p95".into(),
            StatisticKind::CoverageNondefault => "coverage_nondefault".into(),
            StatisticKind::CoverageNonmissing => "coverage_nonmissing".into(),
            StatisticKind::ScoreMean => "score_mean".into(),
            StatisticKind::ScoreStd => "score_std".into(),
            StatisticKind::ScoreQuantile(q) => format!("score_p{q}"),
            StatisticKind::Traffic => "traffic".into(),
            StatisticKind::TrafficRatio => "traffic_ratio".into(),
        }
    }
}

impl std::fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.as_str())
    }
}

impl From<StatisticKind> for String {
    fn from(k: StatisticKind) -> String {
        k.as_str()
    }
}

impl std::str::FromStr for StatisticKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "mean" => StatisticKind::Mean,
            "std" => StatisticKind::Std,
            "p5" => StatisticKind::P5,
            "p25" => StatisticKind::P25,
            "p50" => StatisticKind::P50,
            "p75" => StatisticKind::P75,
            "p95" => StatisticKind::P95,
            "coverage_nondefault" => StatisticKind::CoverageNondefault,
            "coverage_nonmissing" => StatisticKind::CoverageNonmissing,
            "score_mean" => StatisticKind::ScoreMean,
            "score_std" => StatisticKind::ScoreStd,
            "traffic" => StatisticKind::Traffic,
            "traffic_ratio" => StatisticKind::TrafficRatio,
            other => {
                if let Some(q) = other.strip_prefix("score_p") {
                    let q: u8 = q
                        .parse()
                        .map_err(|_| format!("unknown statistic `{other}`"))?;
                    if q == 0 || q >= 100 {
                        return Err(format!("score quantile out of range in `{other}`"));
                    }
                    StatisticKind::ScoreQuantile(q)
                } else {
                    return Err(format!("unknown statistic `{other}`"));
                }
            }
        })
    }
}

impl TryFrom<String> for StatisticKind {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

/// One aggregated statistic value for a (model, entity, day).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyStatRow {
    pub model_id: String,
    pub entity: String,
    pub statistic: StatisticKind,
    pub date: NaiveDate,
    /// `None` encodes a defined-but-missing value (e.g. undefined ratio).
    pub value: Option<f64>,
}

/// Streaming reader over an event-log file.
///
/// In lenient mode malformed lines are counted in [`EventReader::rejects`] and
/// skipped; in strict mode the first malformed line surfaces as an error.
pub struct EventReader<R> {
    lines: std::io::Lines<R>,
    path: String,
    strict: bool,
    rejects: u64,
    line_no: u64,
}

impl EventReader<BufReader<File>> {
    pub fn open(path: &Path, strict: bool) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_reader(
            BufReader::new(file),
            path.display().to_string(),
            strict,
        ))
    }
}

impl<R: BufRead> EventReader<R> {
    pub fn from_reader(reader: R, path: String, strict: bool) -> Self {
        EventReader {
            lines: reader.lines(),
            path,
            strict,
            rejects: 0,
            line_no: 0,
        }
    }

    /// Number of malformed lines skipped so far (lenient mode only).
    pub fn rejects(&self) -> u64 {
        self.rejects
    }
}

impl<R: BufRead> Iterator for EventReader<R> {
    type Item = Result<ScoringEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(self.path.clone(), e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: std::result::Result<ScoringEvent, String> =
                serde_json::from_str::<ScoringEvent>(&line)
                    .map_err(|e| e.to_string())
                    .and_then(|ev| ev.validate().map(|()| ev));
            match parsed {
                Ok(ev) => return Some(Ok(ev)),
                Err(msg) => {
                    if self.strict {
                        return Some(Err(Error::parse(self.path.clone(), self.line_no, msg)));
                    }
                    self.rejects += 1;
                    log::warn!("{}:{}: rejected event: {}", self.path, self.line_no, msg);
                }
            }
        }
    }
}

/// Expands a non-scalar feature observation into `(entity, value)` pairs.
///
/// Categorical values become a single one-hot entry for the observed
/// category; the zeros for other categories seen the same day are filled in
/// by the aggregator, which owns the per-day vocabulary. Vector values
/// become one entry per dimension.
pub fn expand_nonscalar_feature(name: &str, value: &FeatureValue) -> Vec<(String, f64)> {
    match value {
        FeatureValue::Scalar(v) => vec![(name.to_string(), *v)],
        FeatureValue::Categorical(c) => vec![(format!("{name}={c}"), 1.0)],
        FeatureValue::Vector(vs) => vs
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("{name}[{i}]"), *v))
            .collect(),
    }
}

/// Options for [`aggregate_daily_with`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AggregateOptions {
    /// Value treated as "default" for coverage purposes (0.0 unless set).
    pub default_value: f64,
    /// Per-feature overrides of `default_value`, keyed by raw feature name.
    #[serde(default)]
    pub per_feature_defaults: BTreeMap<String, f64>,
}

/// Aggregates events into daily statistic rows with default value 0.0.
pub fn aggregate_daily<I>(events: I, default_value: f64) -> Vec<DailyStatRow>
where
    I: IntoIterator<Item = ScoringEvent>,
{
    aggregate_daily_with(
        events,
        &AggregateOptions {
            default_value,
            per_feature_defaults: BTreeMap::new(),
        },
    )
}

/// Aggregates events into daily statistic rows.
///
/// For each (model, day) bucket: per-entity mean/std/quantiles over present
/// values, coverage fractions over all events in the bucket, score
/// statistics, and a traffic count. Aggregation is a pure fold: the output
/// does not depend on event order.
pub fn aggregate_daily_with<I>(events: I, opts: &AggregateOptions) -> Vec<DailyStatRow>
where
    I: IntoIterator<Item = ScoringEvent>,
{
    let mut buckets: BTreeMap<(String, NaiveDate), Vec<ScoringEvent>> = BTreeMap::new();
    for ev in events {
        let Some(day) = ev.day() else { continue };
        buckets.entry((ev.model_id.clone(), day)).or_default().push(ev);
    }

    let mut rows = Vec::new();
    for ((model_id, date), bucket) in &buckets {
        aggregate_model_day(model_id, *date, bucket, opts, &mut rows);
    }
    rows
}

/// Per-day vocabulary of one raw feature: which expanded entities exist.
#[derive(Default)]
struct FeatureVocab {
    has_scalar: bool,
    categories: BTreeSet<String>,
    max_dims: usize,
}

fn aggregate_model_day(
    model_id: &str,
    date: NaiveDate,
    events: &[ScoringEvent],
    opts: &AggregateOptions,
    rows: &mut Vec<DailyStatRow>,
) {
    let n_events = events.len();

    // Pass 1: discover the day's entity universe.
    let mut vocab: BTreeMap<&str, FeatureVocab> = BTreeMap::new();
    for ev in events {
        for (name, value) in &ev.features {
            let Some(value) = value else { continue };
            let slot = vocab.entry(name.as_str()).or_default();
            match value {
                FeatureValue::Scalar(_) => slot.has_scalar = true,
                FeatureValue::Categorical(c) => {
                    slot.categories.insert(c.clone());
                }
                FeatureValue::Vector(v) => slot.max_dims = slot.max_dims.max(v.len()),
            }
        }
    }

    // Pass 2: per expanded entity, collect one present-or-missing slot per event.
    for (feature, voc) in &vocab {
        let default = opts
            .per_feature_defaults
            .get(*feature)
            .copied()
            .unwrap_or(opts.default_value);

        let mut emit = |entity: String, values: Vec<Option<f64>>| {
            emit_entity_rows(model_id, date, entity, &values, n_events, default, rows);
        };

        if voc.has_scalar {
            let values = events
                .iter()
                .map(|ev| match ev.features.get(*feature) {
                    Some(Some(FeatureValue::Scalar(v))) => Some(*v),
                    _ => None,
                })
                .collect();
            emit(feature.to_string(), values);
        }
        for cat in &voc.categories {
            let values = events
                .iter()
                .map(|ev| match ev.features.get(*feature) {
                    Some(Some(FeatureValue::Categorical(c))) => {
                        Some(if c == cat { 1.0 } else { 0.0 })
                    }
                    _ => None,
                })
                .collect();
            emit(format!("{feature}={cat}"), values);
        }
        for dim in 0..voc.max_dims {
            let values = events
                .iter()
                .map(|ev| match ev.features.get(*feature) {
                    Some(Some(FeatureValue::Vector(v))) => v.get(dim).copied(),
                    _ => None,
                })
                .collect();
            emit(format!("{feature}[{dim}]"), values);
        }
    }

    // Score statistics and traffic.
    let mut scores: Vec<f64> = events.iter().map(|ev| ev.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("non-finite score"));
    let mu = numeric::mean(&scores);
    let sd = numeric::population_std(&scores, mu);
    let mut push = |entity: &str, statistic, value| {
        rows.push(DailyStatRow {
            model_id: model_id.to_string(),
            entity: entity.to_string(),
            statistic,
            date,
            value: Some(value),
        });
    };
    push(SCORE_ENTITY, StatisticKind::ScoreMean, mu);
    push(SCORE_ENTITY, StatisticKind::ScoreStd, sd);
    for (q, tag) in QUANTILES {
        push(
            SCORE_ENTITY,
            StatisticKind::ScoreQuantile(tag),
            numeric::nearest_rank_sorted(&scores, q),
        );
    }
    push(MODEL_ENTITY, StatisticKind::Traffic, n_events as f64);
}

fn emit_entity_rows(
    model_id: &str,
    date: NaiveDate,
    entity: String,
    values: &[Option<f64>],
    n_events: usize,
    default: f64,
    rows: &mut Vec<DailyStatRow>,
) {
    let mut present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        // Cannot happen for entities in the day's vocabulary, but stay safe.
        return;
    }
    present.sort_by(|a, b| a.partial_cmp(b).expect("non-finite feature value"));

    let n_present = present.len();
    let n_nondefault = present.iter().filter(|v| **v != default).count();
    let mu = numeric::mean(&present);
    let sd = numeric::population_std(&present, mu);

    let mut push = |statistic, value: f64| {
        rows.push(DailyStatRow {
            model_id: model_id.to_string(),
            entity: entity.clone(),
            statistic,
            date,
            value: Some(value),
        });
    };
    push(StatisticKind::Mean, mu);
    push(StatisticKind::Std, sd);
    for (q, tag) in QUANTILES {
        let kind = match tag {
            5 => StatisticKind::P5,
            25 => StatisticKind::P25,
            50 => StatisticKind::P50,
            75 => StatisticKind::P75,
            _ => StatisticKind::P95,
        };
        push(kind, numeric::nearest_rank_sorted(&present, q));
    }
    push(
        StatisticKind::CoverageNondefault,
        n_nondefault as f64 / n_events as f64,
    );
    push(
        StatisticKind::CoverageNonmissing,
        n_present as f64 / n_events as f64,
    );
}

/// Computes per-(product, day) traffic ratios from aggregated traffic rows.
///
/// `model_product` maps each model to its owning product. Product-days whose
/// total traffic is zero yield missing ratios.
pub fn compute_traffic_ratio(
    rows: &[DailyStatRow],
    model_product: &BTreeMap<String, String>,
) -> Result<Vec<DailyStatRow>> {
    let mut traffic: BTreeMap<(&str, NaiveDate), f64> = BTreeMap::new();
    for row in rows {
        if row.statistic == StatisticKind::Traffic {
            let t = row.value.unwrap_or(0.0);
            traffic.insert((row.model_id.as_str(), row.date), t);
        }
    }

    let mut totals: BTreeMap<(&str, NaiveDate), f64> = BTreeMap::new();
    for ((model, date), t) in &traffic {
        let product = model_product
            .get(*model)
            .ok_or_else(|| Error::Data(format!("model `{model}` has no product assignment")))?;
        *totals.entry((product.as_str(), *date)).or_insert(0.0) += t;
    }

    let mut out = Vec::new();
    for ((model, date), t) in &traffic {
        let product = &model_product[*model];
        let total = totals[&(product.as_str(), *date)];
        out.push(DailyStatRow {
            model_id: model.to_string(),
            entity: MODEL_ENTITY.to_string(),
            statistic: StatisticKind::TrafficRatio,
            date: *date,
            value: (total > 0.0).then(|| t / total),
        });
    }
    Ok(out)
}

/// Extracts the model-to-product assignment observed in an event stream.
///
/// Errors if a model appears under two different products.
pub fn model_product_assignment<'a, I>(events: I) -> Result<BTreeMap<String, String>>
where
    I: IntoIterator<Item = &'a ScoringEvent>,
{
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for ev in events {
        match map.get(&ev.model_id) {
            None => {
                map.insert(ev.model_id.clone(), ev.product_id.clone());
            }
            Some(p) if *p == ev.product_id => {}
            Some(p) => {
                return Err(Error::Data(format!(
                    "model `{}` assigned to products `{}` and `{}`",
                    ev.model_id, p, ev.product_id
                )));
            }
        }
    }
    Ok(map)
}

/// Writes statistic rows as CSV with header `model_id,entity,statistic,date,value`.
pub fn write_stats(path: &Path, rows: &[DailyStatRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a stats CSV produced by [`write_stats`].
pub fn read_stats(path: &Path) -> Result<Vec<DailyStatRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<DailyStatRow>().enumerate() {
        let row = rec.map_err(|e| Error::parse(path.display().to_string(), i as u64 + 2, e.to_string()))?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(model: &str, day_offset: i64, features: &[(&str, FeatureValue)], score: f64) -> ScoringEvent {
        ScoringEvent {
            model_id: model.into(),
            product_id: "prod".into(),
            // 2024-01-01T12:00:00Z plus day offset
            timestamp: 1_704_110_400_000 + day_offset * 86_400_000,
            features: features
                .iter()
                .map(|(k, v)| (k.to_string(), Some(v.clone())))
                .collect(),
            score,
        }
    }

    fn scalar(v: f64) -> FeatureValue {
        FeatureValue::Scalar(v)
    }

    fn find(rows: &[DailyStatRow], entity: &str, stat: StatisticKind) -> Option<f64> {
        rows.iter()
            .find(|r| r.entity == entity && r.statistic == stat)
            .and_then(|r| r.value)
    }

    #[test]
    fn parses_valid_lines_and_counts_rejects() {
        let log = concat!(
            r#"{"model_id":"m1","product_id":"p","timestamp":1704110400000,"features":{"a":1.0,"b":2.0,"c":3.0},"score":0.7}"#,
            "\n",
            r#"{"model_id":"m1","product_id":"p","timestamp":1704110400000,"features":{}}"#,
            "\n",
        );
        let mut reader =
            EventReader::from_reader(std::io::Cursor::new(log), "test".into(), false);
        let events: Vec<_> = reader.by_ref().collect::<Result<Vec<_>>>().unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].features.len(), 3);
        assert_eq!(events[0].score, 0.7);
        assert_eq!(reader.rejects(), 1);
    }

    #[test]
    fn strict_mode_aborts_on_malformed_line() {
        let log = "not json\n";
        let mut reader =
            EventReader::from_reader(std::io::Cursor::new(log), "test".into(), true);
        assert!(reader.next().unwrap().is_err());
    }

    #[test]
    fn empty_file_yields_empty_stream() {
        let mut reader =
            EventReader::from_reader(std::io::Cursor::new(""), "test".into(), false);
        assert!(reader.next().is_none());
        assert_eq!(reader.rejects(), 0);
    }

    #[test]
    fn expands_categorical_and_vector_features() {
        assert_eq!(
            expand_nonscalar_feature("country", &FeatureValue::Categorical("US".into())),
            vec![("country=US".to_string(), 1.0)]
        );
        assert_eq!(
            expand_nonscalar_feature("emb", &FeatureValue::Vector(vec![0.1, 0.2])),
            vec![("emb[0]".to_string(), 0.1), ("emb[1]".to_string(), 0.2)]
        );
        assert!(expand_nonscalar_feature("emb", &FeatureValue::Vector(vec![])).is_empty());
    }

    #[test]
    fn coverage_and_mean_over_present_values() {
        // f = [0, 0, 2, missing] over four events
        let mut events = vec![
            event("m1", 0, &[("f", scalar(0.0))], 0.5),
            event("m1", 0, &[("f", scalar(0.0))], 0.5),
            event("m1", 0, &[("f", scalar(2.0))], 0.5),
            event("m1", 0, &[], 0.5),
        ];
        // the missing-feature event still carries the key with null sometimes
        events[3].features.insert("f".into(), None);

        let rows = aggregate_daily(events, 0.0);
        assert_eq!(find(&rows, "f", StatisticKind::CoverageNondefault), Some(0.25));
        assert_eq!(find(&rows, "f", StatisticKind::CoverageNonmissing), Some(0.75));
        let mean = find(&rows, "f", StatisticKind::Mean).unwrap();
        assert!((mean - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_score_stats() {
        let rows = aggregate_daily(vec![event("m1", 0, &[], 0.5)], 0.0);
        assert_eq!(find(&rows, SCORE_ENTITY, StatisticKind::ScoreMean), Some(0.5));
        assert_eq!(find(&rows, SCORE_ENTITY, StatisticKind::ScoreStd), Some(0.0));
        assert_eq!(find(&rows, MODEL_ENTITY, StatisticKind::Traffic), Some(1.0));
    }

    #[test]
    fn constant_values_have_zero_std_and_flat_quantiles() {
        let events: Vec<_> = (0..10)
            .map(|_| event("m1", 0, &[("f", scalar(3.0))], 0.1))
            .collect();
        let rows = aggregate_daily(events, 0.0);
        assert_eq!(find(&rows, "f", StatisticKind::Mean), Some(3.0));
        assert_eq!(find(&rows, "f", StatisticKind::Std), Some(0.0));
        assert_eq!(find(&rows, "f", StatisticKind::P5), Some(3.0));
        assert_eq!(find(&rows, "f", StatisticKind::P95), Some(3.0));
    }

    #[test]
    fn categorical_one_hot_uses_day_vocabulary() {
        let events = vec![
            event("m1", 0, &[("country", FeatureValue::Categorical("US".into()))], 0.1),
            event("m1", 0, &[("country", FeatureValue::Categorical("CA".into()))], 0.1),
            event("m1", 0, &[("country", FeatureValue::Categorical("US".into()))], 0.1),
        ];
        let rows = aggregate_daily(events, 0.0);
        // country=US: values [1, 0, 1] -> mean 2/3, nondefault 2/3, nonmissing 1
        let mean = find(&rows, "country=US", StatisticKind::Mean).unwrap();
        assert!((mean - 2.0 / 3.0).abs() < 1e-12);
        let nd = find(&rows, "country=US", StatisticKind::CoverageNondefault).unwrap();
        assert!((nd - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(find(&rows, "country=US", StatisticKind::CoverageNonmissing), Some(1.0));
    }

    #[test]
    fn ragged_vectors_emit_all_dims_seen() {
        let events = vec![
            event("m1", 0, &[("emb", FeatureValue::Vector(vec![1.0, 2.0, 3.0]))], 0.1),
            event("m1", 0, &[("emb", FeatureValue::Vector(vec![4.0]))], 0.1),
        ];
        let rows = aggregate_daily(events, 0.0);
        assert_eq!(find(&rows, "emb[2]", StatisticKind::CoverageNonmissing), Some(0.5));
        assert_eq!(find(&rows, "emb[0]", StatisticKind::CoverageNonmissing), Some(1.0));
        assert_eq!(find(&rows, "emb[2]", StatisticKind::Mean), Some(3.0));
    }

    #[test]
    fn aggregation_is_order_independent() {
        let mut events = vec![
            event("m1", 0, &[("f", scalar(1.0))], 0.2),
            event("m1", 0, &[("f", scalar(5.0))], 0.9),
            event("m2", 1, &[("f", scalar(2.0))], 0.4),
            event("m1", 1, &[("g", scalar(0.0))], 0.6),
        ];
        let forward = aggregate_daily(events.clone(), 0.0);
        events.reverse();
        let backward = aggregate_daily(events, 0.0);
        assert_eq!(forward, backward);
    }

    #[test]
    fn coverage_nonmissing_bounds_nondefault() {
        // randomized check over seeded value patterns
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let events: Vec<_> = (0..20)
                .map(|_| {
                    let mut ev = event("m", 0, &[], rng.gen());
                    if rng.gen_bool(0.7) {
                        let v = if rng.gen_bool(0.4) { 0.0 } else { rng.gen::<f64>() };
                        ev.features.insert("f".into(), Some(scalar(v)));
                    }
                    ev
                })
                .collect();
            let rows = aggregate_daily(events, 0.0);
            if let (Some(nd), Some(nm)) = (
                find(&rows, "f", StatisticKind::CoverageNondefault),
                find(&rows, "f", StatisticKind::CoverageNonmissing),
            ) {
                assert!(nm >= nd);
                assert!((0.0..=1.0).contains(&nd) && (0.0..=1.0).contains(&nm));
            }
        }
    }

    #[test]
    fn quantiles_are_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let events: Vec<_> = (0..n)
                .map(|_| event("m", 0, &[("f", scalar(rng.gen_range(-5.0..5.0)))], 0.5))
                .collect();
            let rows = aggregate_daily(events, 0.0);
            let q: Vec<f64> = [
                StatisticKind::P5,
                StatisticKind::P25,
                StatisticKind::P50,
                StatisticKind::P75,
                StatisticKind::P95,
            ]
            .iter()
            .map(|s| find(&rows, "f", *s).unwrap())
            .collect();
            assert!(q.windows(2).all(|w| w[0] <= w[1]), "quantiles not monotone: {q:?}");
        }
    }

    #[test]
    fn traffic_ratio_examples() {
        let mk = |model: &str, t: f64| DailyStatRow {
            model_id: model.into(),
            entity: MODEL_ENTITY.into(),
            statistic: StatisticKind::Traffic,
            date: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            value: Some(t),
        };
        let assign: BTreeMap<String, String> = [("a", "p"), ("b", "p")]
            .iter()
            .map(|(m, p)| (m.to_string(), p.to_string()))
            .collect();

        let ratios = compute_traffic_ratio(&[mk("a", 50.0), mk("b", 950.0)], &assign).unwrap();
        let get = |m: &str| ratios.iter().find(|r| r.model_id == m).unwrap().value;
        assert_eq!(get("a"), Some(0.05));
        assert_eq!(get("b"), Some(0.95));
        let total: f64 = ratios.iter().map(|r| r.value.unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);

        let single = compute_traffic_ratio(&[mk("a", 10.0)], &assign).unwrap();
        assert_eq!(single[0].value, Some(1.0));

        let degenerate =
            compute_traffic_ratio(&[mk("a", 0.0), mk("b", 0.0)], &assign).unwrap();
        assert!(degenerate.iter().all(|r| r.value.is_none()));
    }

    #[test]
    fn stats_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.csv");
        let rows = vec![
            DailyStatRow {
                model_id: "m".into(),
                entity: "f".into(),
                statistic: StatisticKind::P95,
                date: NaiveDate::from_ymd_opt(2024, 3, 5).unwrap(),
                value: Some(1.25),
            },
            DailyStatRow {
                model_id: "m".into(),
                entity: MODEL_ENTITY.into(),
                statistic: StatisticKind::TrafficRatio,
                date: NaiveDate::from_ymd_opt(2024, 3, 5).unwrap(),
                value: None,
            },
        ];
        write_stats(&path, &rows).unwrap();
        let back = read_stats(&path).unwrap();
        assert_eq!(rows, back);
    }
}
