//! Anomaly post-processing: merging pointwise decisions into intervals,
//! duration/severity/concurrency/traffic-ratio filtering, anomaly-pattern
//! classification, and grouping surviving intervals into model-level alerts.
//!
//! This module also owns the decisions file format: newline-delimited JSON
//! records tagged `decision`, `interval`, or `alert`. The filter stage reads
//! decision records and appends interval and alert records.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::detector::PointDecision;
use crate::error::{Error, Result};
use crate::series::SeriesKey;
use crate::stats::StatisticKind;

/// Observed shape of an anomalous interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyPattern {
    /// Short excursion that recovered within about three days.
    Spike,
    /// Persistent change of level (longer than three days).
    LevelShift,
    /// Short excursion still open at the end of the observed data.
    Ongoing,
}

impl std::fmt::Display for AnomalyPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AnomalyPattern::Spike => "spike",
            AnomalyPattern::LevelShift => "level_shift",
            AnomalyPattern::Ongoing => "ongoing",
        })
    }
}

/// Days a spike may last before an interval counts as a level shift.
pub const SPIKE_MAX_DAYS: i64 = 3;

/// A maximal run of consecutive anomalous days on one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyInterval {
    pub key: SeriesKey,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub duration: u32,
    pub max_severity: f64,
    pub pattern: AnomalyPattern,
    /// Severity of each day in `[start, end]`.
    pub daily_severities: Vec<f64>,
}

/// Thresholds and enable flags for the four anomaly filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub duration_enabled: bool,
    pub duration_threshold: u32,
    pub severity_enabled: bool,
    pub severity_threshold: f64,
    pub concurrency_enabled: bool,
    pub concurrency_threshold: f64,
    pub mtr_enabled: bool,
    pub mtr_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            duration_enabled: true,
            duration_threshold: 2,
            severity_enabled: true,
            severity_threshold: 1.3,
            concurrency_enabled: false,
            concurrency_threshold: 0.5,
            mtr_enabled: true,
            mtr_threshold: 0.03,
        }
    }
}

impl FilterConfig {
    /// Everything off; alerts equal raw grouped detections.
    pub fn disabled() -> Self {
        FilterConfig {
            duration_enabled: false,
            severity_enabled: false,
            concurrency_enabled: false,
            mtr_enabled: false,
            ..FilterConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity_threshold < 0.0
            || self.concurrency_threshold < 0.0
            || self.mtr_threshold < 0.0
        {
            return Err(Error::InvalidInput("filter thresholds must be non-negative".into()));
        }
        Ok(())
    }
}

/// One filter evaluation on one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCheck {
    pub filter: String,
    pub passed: bool,
}

/// An interval with its filter trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredInterval {
    pub interval: AnomalyInterval,
    pub checks: Vec<FilterCheck>,
    pub kept: bool,
}

/// Model-level alert bundling overlapping surviving intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAlert {
    pub model_id: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Traffic ratio of the model on the alert (end) day, when known.
    pub traffic_ratio: Option<f64>,
    pub rule: String,
    pub intervals: Vec<FilteredInterval>,
}

/// How univariate anomalies aggregate to the model level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingRule {
    /// Any surviving interval triggers an alert.
    Or,
    /// Only intervals on the listed entities trigger alerts.
    SubsetOr(Vec<String>),
}

impl GroupingRule {
    fn name(&self) -> &'static str {
        match self {
            GroupingRule::Or => "or",
            GroupingRule::SubsetOr(_) => "subset_or",
        }
    }
}

/// Per-day model context needed by the concurrency and traffic filters.
#[derive(Debug, Clone, Default)]
pub struct FilterContext {
    /// (model, day) -> (anomalous statistics, monitored statistics).
    pub concurrency: BTreeMap<(String, NaiveDate), (usize, usize)>,
    /// (model, day) -> traffic ratio.
    pub traffic_ratio: BTreeMap<(String, NaiveDate), f64>,
}

/// One day's decision with the forecast context needed downstream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayDecision {
    pub date: NaiveDate,
    pub observed: f64,
    pub baseline: f64,
    pub lower: f64,
    pub upper: f64,
    #[serde(flatten)]
    pub decision: PointDecision,
}

/// All decided days of one series, in date order.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDecisions {
    pub key: SeriesKey,
    pub days: Vec<DayDecision>,
}

impl SeriesDecisions {
    pub fn points(&self) -> Vec<(NaiveDate, PointDecision)> {
        self.days.iter().map(|d| (d.date, d.decision)).collect()
    }
}

/// Merges day decisions into maximal runs of consecutive anomalous days.
/// Days without a decision break contiguity. Each interval's pattern is
/// classified from the decisions that follow it.
pub fn merge_points_to_intervals(
    key: &SeriesKey,
    decisions: &[(NaiveDate, PointDecision)],
) -> Vec<AnomalyInterval> {
    let mut sorted: Vec<&(NaiveDate, PointDecision)> = decisions.iter().collect();
    sorted.sort_by_key(|(date, _)| *date);

    let mut intervals: Vec<AnomalyInterval> = Vec::new();
    let mut run: Vec<(NaiveDate, f64)> = Vec::new();
    let close_run = |run: &mut Vec<(NaiveDate, f64)>, intervals: &mut Vec<AnomalyInterval>| {
        if run.is_empty() {
            return;
        }
        let severities: Vec<f64> = run.iter().map(|(_, s)| *s).collect();
        intervals.push(AnomalyInterval {
            key: key.clone(),
            start: run[0].0,
            end: run[run.len() - 1].0,
            duration: run.len() as u32,
            max_severity: severities.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            pattern: AnomalyPattern::Ongoing,
            daily_severities: severities,
        });
        run.clear();
    };

    for (date, decision) in &sorted {
        let contiguous = run
            .last()
            .is_none_or(|(prev, _)| *date - *prev == Duration::days(1));
        if !contiguous {
            close_run(&mut run, &mut intervals);
        }
        if decision.is_anomaly {
            run.push((*date, decision.severity));
        } else {
            close_run(&mut run, &mut intervals);
        }
    }
    close_run(&mut run, &mut intervals);

    // Classify each interval against the decisions that follow it.
    for interval in &mut intervals {
        let post: Vec<(NaiveDate, PointDecision)> = sorted
            .iter()
            .filter(|(d, _)| *d > interval.end)
            .map(|(d, p)| (*d, *p))
            .collect();
        interval.pattern = classify_pattern(interval, &post);
    }
    intervals
}

/// Pattern classification: more than three days is a level shift; up to
/// three days is a spike once a later non-anomalous decision is observed,
/// and ongoing while nothing after the interval has been decided yet.
pub fn classify_pattern(
    interval: &AnomalyInterval,
    post_window: &[(NaiveDate, PointDecision)],
) -> AnomalyPattern {
    if i64::from(interval.duration) > SPIKE_MAX_DAYS {
        return AnomalyPattern::LevelShift;
    }
    if post_window.iter().any(|(_, d)| !d.is_anomaly) {
        AnomalyPattern::Spike
    } else {
        AnomalyPattern::Ongoing
    }
}

/// Keep an interval when it lasted at least `threshold` days.
pub fn duration_filter(interval: &AnomalyInterval, threshold: u32) -> bool {
    interval.duration >= threshold
}

/// Keep an interval when any of its days reached severity `threshold`.
pub fn severity_filter(interval: &AnomalyInterval, threshold: f64) -> bool {
    interval.max_severity >= threshold
}

/// Keep when at least `threshold` of the model's monitored statistics were
/// anomalous in the same snapshot.
pub fn concurrency_filter(abnormal: usize, total: usize, threshold: f64) -> bool {
    debug_assert!(total > 0, "concurrency filter needs a non-empty statistic universe");
    if total == 0 {
        return true;
    }
    abnormal as f64 / total as f64 >= threshold
}

/// Keep when the model served at least `threshold` of its product's traffic.
/// A missing ratio fails open.
pub fn mtr_filter(traffic_ratio: Option<f64>, threshold: f64) -> bool {
    traffic_ratio.is_none_or(|r| r >= threshold)
}

/// Builds the per-(model, day) concurrency snapshot from a decision set.
pub fn concurrency_snapshot(decisions: &[SeriesDecisions]) -> BTreeMap<(String, NaiveDate), (usize, usize)> {
    let mut snap: BTreeMap<(String, NaiveDate), (usize, usize)> = BTreeMap::new();
    for sd in decisions {
        for day in &sd.days {
            let slot = snap
                .entry((sd.key.model_id.clone(), day.date))
                .or_insert((0, 0));
            slot.1 += 1;
            if day.decision.is_anomaly {
                slot.0 += 1;
            }
        }
    }
    snap
}

/// Runs all enabled filters over each interval, recording a full trace.
pub fn apply_filters(
    intervals: &[AnomalyInterval],
    cfg: &FilterConfig,
    ctx: &FilterContext,
) -> Vec<FilteredInterval> {
    intervals
        .iter()
        .map(|interval| {
            let mut checks = Vec::new();
            let mut kept = true;
            if cfg.duration_enabled {
                let passed = duration_filter(interval, cfg.duration_threshold);
                checks.push(FilterCheck { filter: "duration".into(), passed });
                kept &= passed;
            }
            if cfg.severity_enabled {
                let passed = severity_filter(interval, cfg.severity_threshold);
                checks.push(FilterCheck { filter: "severity".into(), passed });
                kept &= passed;
            }
            if cfg.concurrency_enabled {
                // Highest concurrency observed on any day of the interval.
                let passed = (0..interval.duration as i64).any(|offset| {
                    let day = interval.start + Duration::days(offset);
                    ctx.concurrency
                        .get(&(interval.key.model_id.clone(), day))
                        .is_some_and(|(abnormal, total)| {
                            *total > 0 && concurrency_filter(*abnormal, *total, cfg.concurrency_threshold)
                        })
                });
                checks.push(FilterCheck { filter: "concurrency".into(), passed });
                kept &= passed;
            }
            if cfg.mtr_enabled {
                let ratio = ctx
                    .traffic_ratio
                    .get(&(interval.key.model_id.clone(), interval.end))
                    .copied();
                let passed = mtr_filter(ratio, cfg.mtr_threshold);
                checks.push(FilterCheck { filter: "traffic_ratio".into(), passed });
                kept &= passed;
            }
            FilteredInterval {
                interval: interval.clone(),
                checks,
                kept,
            }
        })
        .collect()
}

/// Bundles a model's surviving intervals into alerts: intervals whose date
/// ranges overlap merge into one alert; disjoint clusters alert separately.
pub fn group_to_model(
    survivors: &[FilteredInterval],
    rule: &GroupingRule,
    traffic_ratio: &BTreeMap<(String, NaiveDate), f64>,
) -> Vec<ModelAlert> {
    let mut eligible: Vec<&FilteredInterval> = survivors
        .iter()
        .filter(|fi| fi.kept)
        .filter(|fi| match rule {
            GroupingRule::Or => true,
            GroupingRule::SubsetOr(entities) => entities.contains(&fi.interval.key.entity),
        })
        .collect();
    eligible.sort_by(|a, b| {
        (&a.interval.key.model_id, a.interval.start, a.interval.end, &a.interval.key.entity).cmp(&(
            &b.interval.key.model_id,
            b.interval.start,
            b.interval.end,
            &b.interval.key.entity,
        ))
    });

    let mut alerts: Vec<ModelAlert> = Vec::new();
    for fi in eligible {
        let joined = alerts.last_mut().is_some_and(|alert| {
            alert.model_id == fi.interval.key.model_id && fi.interval.start <= alert.end
        });
        if joined {
            let alert = alerts.last_mut().unwrap();
            alert.end = alert.end.max(fi.interval.end);
            alert.intervals.push(fi.clone());
        } else {
            alerts.push(ModelAlert {
                model_id: fi.interval.key.model_id.clone(),
                start: fi.interval.start,
                end: fi.interval.end,
                traffic_ratio: None,
                rule: rule.name().into(),
                intervals: vec![fi.clone()],
            });
        }
    }
    for alert in &mut alerts {
        alert.traffic_ratio = traffic_ratio
            .get(&(alert.model_id.clone(), alert.end))
            .copied();
    }
    alerts
}

/// Output of the full post-processing pipeline.
#[derive(Debug, Clone)]
pub struct PostprocessOutput {
    pub intervals: Vec<FilteredInterval>,
    pub alerts: Vec<ModelAlert>,
}

/// Merge, classify, filter, and group a full decision set.
pub fn postprocess(
    decisions: &[SeriesDecisions],
    cfg: &FilterConfig,
    rule: &GroupingRule,
    traffic_ratio: &BTreeMap<(String, NaiveDate), f64>,
) -> Result<PostprocessOutput> {
    cfg.validate()?;
    let ctx = FilterContext {
        concurrency: concurrency_snapshot(decisions),
        traffic_ratio: traffic_ratio.clone(),
    };
    let mut filtered = Vec::new();
    for sd in decisions {
        let intervals = merge_points_to_intervals(&sd.key, &sd.points());
        filtered.extend(apply_filters(&intervals, cfg, &ctx));
    }
    let alerts = group_to_model(&filtered, rule, traffic_ratio);
    Ok(PostprocessOutput {
        intervals: filtered,
        alerts,
    })
}

/// One line of the decisions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DecisionRecord {
    Decision {
        model_id: String,
        entity: String,
        statistic: StatisticKind,
        date: NaiveDate,
        observed: f64,
        baseline: f64,
        lower: f64,
        upper: f64,
        probability: f64,
        severity: f64,
        out_of_boundary: bool,
        is_anomaly: bool,
    },
    Interval {
        model_id: String,
        entity: String,
        statistic: StatisticKind,
        start: NaiveDate,
        end: NaiveDate,
        duration: u32,
        max_severity: f64,
        pattern: AnomalyPattern,
        kept: bool,
        filters: Vec<FilterCheck>,
    },
    Alert(ModelAlert),
}

/// Flattens series decisions to file records.
pub fn decisions_to_records(decisions: &[SeriesDecisions]) -> Vec<DecisionRecord> {
    decisions
        .iter()
        .flat_map(|sd| {
            sd.days.iter().map(|day| DecisionRecord::Decision {
                model_id: sd.key.model_id.clone(),
                entity: sd.key.entity.clone(),
                statistic: sd.key.statistic,
                date: day.date,
                observed: day.observed,
                baseline: day.baseline,
                lower: day.lower,
                upper: day.upper,
                probability: day.decision.probability,
                severity: day.decision.severity,
                out_of_boundary: day.decision.out_of_boundary,
                is_anomaly: day.decision.is_anomaly,
            })
        })
        .collect()
}

pub fn interval_record(fi: &FilteredInterval) -> DecisionRecord {
    DecisionRecord::Interval {
        model_id: fi.interval.key.model_id.clone(),
        entity: fi.interval.key.entity.clone(),
        statistic: fi.interval.key.statistic,
        start: fi.interval.start,
        end: fi.interval.end,
        duration: fi.interval.duration,
        max_severity: fi.interval.max_severity,
        pattern: fi.interval.pattern,
        kept: fi.kept,
        filters: fi.checks.clone(),
    }
}

/// Regroups decision records into per-series decision lists (date-sorted).
pub fn series_from_records(records: &[DecisionRecord]) -> Vec<SeriesDecisions> {
    let mut grouped: BTreeMap<SeriesKey, Vec<DayDecision>> = BTreeMap::new();
    for rec in records {
        if let DecisionRecord::Decision {
            model_id,
            entity,
            statistic,
            date,
            observed,
            baseline,
            lower,
            upper,
            probability,
            severity,
            out_of_boundary,
            is_anomaly,
        } = rec
        {
            grouped
                .entry(SeriesKey::new(model_id.clone(), entity.clone(), *statistic))
                .or_default()
                .push(DayDecision {
                    date: *date,
                    observed: *observed,
                    baseline: *baseline,
                    lower: *lower,
                    upper: *upper,
                    decision: PointDecision {
                        probability: *probability,
                        out_of_boundary: *out_of_boundary,
                        is_anomaly: *is_anomaly,
                        severity: *severity,
                    },
                });
        }
    }
    grouped
        .into_iter()
        .map(|(key, mut days)| {
            days.sort_by_key(|d| d.date);
            SeriesDecisions { key, days }
        })
        .collect()
}

pub fn write_decision_records(path: &Path, records: &[DecisionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_decision_records(path: &Path) -> Result<Vec<DecisionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| {
                Error::parse(path.display().to_string(), i as u64 + 1, e.to_string())
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 1, day).unwrap()
    }

    fn key() -> SeriesKey {
        SeriesKey::new("m", "f", StatisticKind::Mean)
    }

    fn point(anomaly: bool, severity: f64) -> PointDecision {
        PointDecision {
            probability: if anomaly { 0.9 } else { 0.05 },
            out_of_boundary: anomaly,
            is_anomaly: anomaly,
            severity,
        }
    }

    fn interval(start: u32, end: u32, max_severity: f64) -> AnomalyInterval {
        let duration = end - start + 1;
        AnomalyInterval {
            key: key(),
            start: d(start),
            end: d(end),
            duration,
            max_severity,
            pattern: AnomalyPattern::Spike,
            daily_severities: vec![max_severity; duration as usize],
        }
    }

    #[test]
    fn merges_consecutive_anomalous_days() {
        let decisions: Vec<(NaiveDate, PointDecision)> = (1..=12)
            .map(|day| {
                let anom = [5, 6, 7, 10].contains(&day);
                (d(day), point(anom, if anom { 2.0 } else { 0.1 }))
            })
            .collect();
        let intervals = merge_points_to_intervals(&key(), &decisions);
        assert_eq!(intervals.len(), 2);
        assert_eq!((intervals[0].start, intervals[0].end, intervals[0].duration), (d(5), d(7), 3));
        assert_eq!((intervals[1].start, intervals[1].end, intervals[1].duration), (d(10), d(10), 1));
        assert_eq!(intervals[0].max_severity, 2.0);
    }

    #[test]
    fn no_anomalies_no_intervals() {
        let decisions: Vec<_> = (1..=5).map(|day| (d(day), point(false, 0.0))).collect();
        assert!(merge_points_to_intervals(&key(), &decisions).is_empty());
    }

    #[test]
    fn skipped_day_breaks_contiguity() {
        // anomalous on days 5 and 7; day 6 has no decision at all
        let decisions = vec![(d(5), point(true, 1.0)), (d(7), point(true, 1.0))];
        let intervals = merge_points_to_intervals(&key(), &decisions);
        assert_eq!(intervals.len(), 2);
        assert_eq!((intervals[0].start, intervals[0].end), (d(5), d(5)));
        assert_eq!((intervals[1].start, intervals[1].end), (d(7), d(7)));
    }

    #[test]
    fn merge_partitions_anomalous_days_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let mut decisions = Vec::new();
            let mut anomalous_days = Vec::new();
            for day in 1..=28 {
                if rng.gen_bool(0.8) {
                    let anom = rng.gen_bool(0.3);
                    decisions.push((d(day), point(anom, 1.0)));
                    if anom {
                        anomalous_days.push(d(day));
                    }
                }
            }
            let intervals = merge_points_to_intervals(&key(), &decisions);
            let mut covered = Vec::new();
            for iv in &intervals {
                let mut cur = iv.start;
                while cur <= iv.end {
                    covered.push(cur);
                    cur += Duration::days(1);
                }
            }
            covered.sort();
            assert_eq!(covered, anomalous_days);
        }
    }

    #[test]
    fn duration_filter_boundaries() {
        assert!(!duration_filter(&interval(1, 1, 9.0), 2));
        assert!(duration_filter(&interval(1, 2, 9.0), 2));
        assert!(duration_filter(&interval(1, 1, 9.0), 0));
    }

    #[test]
    fn severity_filter_boundaries() {
        let mut iv = interval(1, 2, 1.5);
        iv.daily_severities = vec![0.5, 1.5];
        assert!(severity_filter(&iv, 1.3));
        let mut low = interval(1, 2, 1.2);
        low.daily_severities = vec![1.0, 1.2];
        assert!(!severity_filter(&low, 1.3));
        assert!(severity_filter(&interval(1, 1, 1.3), 1.3));
    }

    #[test]
    fn concurrency_filter_fraction() {
        assert!(concurrency_filter(3, 10, 0.25));
        assert!(!concurrency_filter(1, 10, 0.25));
    }

    #[test]
    fn mtr_filter_fails_open() {
        assert!(mtr_filter(Some(0.05), 0.03));
        assert!(!mtr_filter(Some(0.01), 0.03));
        assert!(mtr_filter(None, 0.03));
    }

    #[test]
    fn disabled_filters_keep_everything() {
        let intervals = vec![interval(1, 1, 0.01)];
        let out = apply_filters(&intervals, &FilterConfig::disabled(), &FilterContext::default());
        assert!(out[0].kept);
        assert!(out[0].checks.is_empty());
    }

    #[test]
    fn pattern_classification() {
        // 2-day anomaly followed by a normal day: spike
        let iv = interval(5, 6, 2.0);
        let post = vec![(d(7), point(false, 0.1))];
        assert_eq!(classify_pattern(&iv, &post), AnomalyPattern::Spike);
        // 6-day anomaly: level shift regardless of what follows
        assert_eq!(classify_pattern(&interval(5, 10, 2.0), &post), AnomalyPattern::LevelShift);
        // 2-day anomaly at the end of the data: ongoing
        assert_eq!(classify_pattern(&iv, &[]), AnomalyPattern::Ongoing);
    }

    #[test]
    fn grouping_bundles_overlaps() {
        let survive = |iv: AnomalyInterval| FilteredInterval {
            interval: iv,
            checks: vec![],
            kept: true,
        };
        let mut iv2 = interval(3, 6, 2.0);
        iv2.key.entity = "g".into();

        let alerts = group_to_model(
            &[survive(interval(1, 4, 2.0)), survive(iv2)],
            &GroupingRule::Or,
            &BTreeMap::new(),
        );
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].intervals.len(), 2);
        assert_eq!((alerts[0].start, alerts[0].end), (d(1), d(6)));

        // disjoint ranges -> separate alerts
        let alerts = group_to_model(
            &[survive(interval(1, 2, 2.0)), survive(interval(10, 11, 2.0))],
            &GroupingRule::Or,
            &BTreeMap::new(),
        );
        assert_eq!(alerts.len(), 2);

        // nothing survives -> no alerts
        let dropped = FilteredInterval {
            interval: interval(1, 2, 2.0),
            checks: vec![],
            kept: false,
        };
        assert!(group_to_model(&[dropped], &GroupingRule::Or, &BTreeMap::new()).is_empty());
    }

    #[test]
    fn subset_rule_restricts_entities() {
        let survive = |entity: &str| {
            let mut iv = interval(1, 2, 2.0);
            iv.key.entity = entity.into();
            FilteredInterval {
                interval: iv,
                checks: vec![],
                kept: true,
            }
        };
        let alerts = group_to_model(
            &[survive("f"), survive("g")],
            &GroupingRule::SubsetOr(vec!["g".into()]),
            &BTreeMap::new(),
        );
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].intervals[0].interval.key.entity, "g");
    }

    #[test]
    fn raising_thresholds_never_keeps_more() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let intervals: Vec<AnomalyInterval> = (0..10)
                .map(|i| {
                    let start = 1 + i * 3;
                    let mut iv = interval(start, start + rng.gen_range(0..3), 0.0);
                    iv.max_severity = rng.gen_range(0.0..3.0);
                    iv
                })
                .collect();
            let base = FilterConfig::default();
            let raised = FilterConfig {
                duration_threshold: base.duration_threshold + rng.gen_range(0..2),
                severity_threshold: base.severity_threshold + rng.gen_range(0.0..1.0),
                ..base.clone()
            };
            let ctx = FilterContext::default();
            let kept_base: Vec<bool> =
                apply_filters(&intervals, &base, &ctx).iter().map(|f| f.kept).collect();
            let kept_raised: Vec<bool> =
                apply_filters(&intervals, &raised, &ctx).iter().map(|f| f.kept).collect();
            for (b, r) in kept_base.iter().zip(&kept_raised) {
                assert!(!r | b, "raised thresholds kept an interval the base dropped");
            }
        }
    }

    #[test]
    fn decision_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decisions.jsonl");
        let sd = SeriesDecisions {
            key: key(),
            days: vec![
                DayDecision {
                    date: d(20),
                    observed: 5.0,
                    baseline: 4.0,
                    lower: 3.0,
                    upper: 4.5,
                    decision: point(true, 2.0),
                },
                DayDecision {
                    date: d(21),
                    observed: 4.1,
                    baseline: 4.0,
                    lower: 3.0,
                    upper: 4.5,
                    decision: point(false, 0.1),
                },
            ],
        };
        let mut records = decisions_to_records(std::slice::from_ref(&sd));
        let out = postprocess(std::slice::from_ref(&sd), &FilterConfig::disabled(), &GroupingRule::Or, &BTreeMap::new())
            .unwrap();
        records.extend(out.intervals.iter().map(interval_record));
        records.extend(out.alerts.iter().cloned().map(DecisionRecord::Alert));
        write_decision_records(&path, &records).unwrap();
        let back = read_decision_records(&path).unwrap();
        assert_eq!(back, records);
        let regrouped = series_from_records(&back);
        assert_eq!(regrouped, vec![sd]);
    }
}
