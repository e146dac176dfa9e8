//! Univariate daily series and the rolling detection-window protocol.
//!
//! Statistic rows are assembled into densely-indexed daily series (gaps stay
//! as missing slots). A detection window for day `t` carries the preceding
//! `H`-day history, the day-of-week one-hot, and the observed value; windows
//! with short or gapped history are invalid with a reason rather than an
//! error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{DailyStatRow, StatisticKind};

/// Short detection horizon, used once 14 days of history exist.
pub const SHORT_HORIZON: usize = 14;
/// Long detection horizon, used once 28 days of history exist.
pub const LONG_HORIZON: usize = 28;

/// Identifies one monitored univariate series.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesKey {
    pub model_id: String,
    pub entity: String,
    pub statistic: StatisticKind,
}

impl SeriesKey {
    pub fn new(model_id: impl Into<String>, entity: impl Into<String>, statistic: StatisticKind) -> Self {
        SeriesKey {
            model_id: model_id.into(),
            entity: entity.into(),
            statistic,
        }
    }
}

impl std::fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.model_id, self.entity, self.statistic)
    }
}

/// A daily series with one slot per consecutive calendar day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateSeries {
    pub key: SeriesKey,
    pub start_date: NaiveDate,
    pub values: Vec<Option<f64>>,
}

impl UnivariateSeries {
    pub fn new(key: SeriesKey, start_date: NaiveDate, values: Vec<Option<f64>>) -> Self {
        UnivariateSeries {
            key,
            start_date,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn date_at(&self, index: usize) -> NaiveDate {
        self.start_date + Duration::days(index as i64)
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let offset = (date - self.start_date).num_days();
        (0..self.values.len() as i64)
            .contains(&offset)
            .then_some(offset as usize)
    }

    pub fn end_date(&self) -> NaiveDate {
        self.date_at(self.values.len().saturating_sub(1))
    }
}

/// A labeled anomalous span, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelInterval {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl LabelInterval {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if start > end {
            return Err(Error::InvalidInput(format!(
                "label interval start {start} after end {end}"
            )));
        }
        Ok(LabelInterval { start, end })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    pub fn days(&self) -> i64 {
        (self.end - self.start).num_days() + 1
    }
}

/// A series plus its anomaly labels; the unit of training and evaluation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSeries {
    #[serde(flatten)]
    pub series: UnivariateSeries,
    #[serde(default)]
    pub anomalies: Vec<LabelInterval>,
}

impl LabeledSeries {
    pub fn unlabeled(series: UnivariateSeries) -> Self {
        LabeledSeries {
            series,
            anomalies: Vec::new(),
        }
    }

    pub fn is_anomalous_on(&self, date: NaiveDate) -> bool {
        self.anomalies.iter().any(|iv| iv.contains(date))
    }
}

/// Why a window is unusable, if it is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowValidity {
    Valid,
    InsufficientHistory,
    MissingInWindow,
    MissingObserved,
}

impl WindowValidity {
    pub fn reason(&self) -> &'static str {
        match self {
            WindowValidity::Valid => "valid",
            WindowValidity::InsufficientHistory => "insufficient history",
            WindowValidity::MissingInWindow => "missing in window",
            WindowValidity::MissingObserved => "missing observed value",
        }
    }
}

/// Inputs for one detection decision on one day.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionWindow {
    pub key: SeriesKey,
    pub target_day: NaiveDate,
    /// Selected history length; 0 when history is insufficient.
    pub horizon: usize,
    /// The `horizon` values preceding the target day (empty unless valid).
    pub history: Vec<f64>,
    pub seasonality: [f64; 7],
    pub observed: Option<f64>,
    pub validity: WindowValidity,
}

impl DetectionWindow {
    pub fn is_valid(&self) -> bool {
        self.validity == WindowValidity::Valid
    }
}

/// Horizon choice from the amount of history before the detection day:
/// under 14 days skips detection, 14-27 days uses the short horizon, 28 or
/// more the long one.
pub fn select_horizon(history_len: usize) -> Option<usize> {
    if history_len < SHORT_HORIZON {
        None
    } else if history_len < LONG_HORIZON {
        Some(SHORT_HORIZON)
    } else {
        Some(LONG_HORIZON)
    }
}

/// Day-of-week one-hot with Monday at index 0.
pub fn day_of_week_onehot(date: NaiveDate) -> [f64; 7] {
    let mut v = [0.0; 7];
    v[date.weekday().num_days_from_monday() as usize] = 1.0;
    v
}

/// Builds the detection window targeting `series[index]`.
///
/// Panics if `index` is out of range; invalid windows (short history, gaps,
/// missing observation) are returned as values with the reason set.
pub fn build_window(series: &UnivariateSeries, index: usize) -> DetectionWindow {
    assert!(index < series.len(), "window index {index} out of range");
    let target_day = series.date_at(index);
    let seasonality = day_of_week_onehot(target_day);
    let observed = series.values[index];

    let mut window = DetectionWindow {
        key: series.key.clone(),
        target_day,
        horizon: 0,
        history: Vec::new(),
        seasonality,
        observed,
        validity: WindowValidity::Valid,
    };

    let Some(horizon) = select_horizon(index) else {
        window.validity = WindowValidity::InsufficientHistory;
        return window;
    };
    window.horizon = horizon;

    let slice = &series.values[index - horizon..index];
    if slice.iter().any(|v| v.is_none()) {
        window.validity = WindowValidity::MissingInWindow;
        return window;
    }
    if observed.is_none() {
        window.validity = WindowValidity::MissingObserved;
        return window;
    }
    window.history = slice.iter().map(|v| v.unwrap()).collect();
    window
}

/// Groups statistic rows into densely-indexed series, one per distinct key.
///
/// Duplicate (key, date) rows with equal values collapse; conflicting
/// duplicates are an error naming the key.
pub fn build_series(rows: &[DailyStatRow]) -> Result<Vec<UnivariateSeries>> {
    let mut grouped: BTreeMap<SeriesKey, BTreeMap<NaiveDate, Option<f64>>> = BTreeMap::new();
    for row in rows {
        let key = SeriesKey::new(&row.model_id, &row.entity, row.statistic);
        let by_date = grouped.entry(key.clone()).or_default();
        match by_date.get(&row.date) {
            None => {
                by_date.insert(row.date, row.value);
            }
            Some(existing) if *existing == row.value => {}
            Some(_) => {
                return Err(Error::ConflictingDuplicate {
                    key: key.to_string(),
                    date: row.date.to_string(),
                });
            }
        }
    }

    let mut out = Vec::with_capacity(grouped.len());
    for (key, by_date) in grouped {
        let start = *by_date.keys().next().expect("non-empty group");
        let end = *by_date.keys().next_back().expect("non-empty group");
        let len = (end - start).num_days() as usize + 1;
        let mut values = vec![None; len];
        for (date, value) in by_date {
            values[(date - start).num_days() as usize] = value;
        }
        out.push(UnivariateSeries::new(key, start, values));
    }
    Ok(out)
}

/// Flattens a series back into statistic rows, one per slot (missing slots
/// become rows with a missing value).
pub fn flatten_series(series: &UnivariateSeries) -> Vec<DailyStatRow> {
    series
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| DailyStatRow {
            model_id: series.key.model_id.clone(),
            entity: series.key.entity.clone(),
            statistic: series.key.statistic,
            date: series.date_at(i),
            value: *v,
        })
        .collect()
}

/// Writes labeled series as one JSON record per line.
pub fn write_dataset(path: &Path, dataset: &[LabeledSeries]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ls in dataset {
        serde_json::to_writer(&mut w, ls).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a labeled dataset written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Vec<LabeledSeries>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ls: LabeledSeries = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path.display().to_string(), i as u64 + 1, e.to_string()))?;
        for iv in &ls.anomalies {
            if iv.start > iv.end {
                return Err(Error::parse(
                    path.display().to_string(),
                    i as u64 + 1,
                    format!("label interval start {} after end {}", iv.start, iv.end),
                ));
            }
        }
        out.push(ls);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 1, day).unwrap()
    }

    fn row(day: u32, value: Option<f64>) -> DailyStatRow {
        DailyStatRow {
            model_id: "m".into(),
            entity: "f".into(),
            statistic: StatisticKind::Mean,
            date: d(day),
            value,
        }
    }

    fn dense_series(len: usize) -> UnivariateSeries {
        UnivariateSeries::new(
            SeriesKey::new("m", "f", StatisticKind::Mean),
            d(1),
            (0..len).map(|i| Some(i as f64)).collect(),
        )
    }

    #[test]
    fn densifies_gaps() {
        let rows = vec![row(1, Some(1.0)), row(2, Some(2.0)), row(4, Some(4.0))];
        let series = build_series(&rows).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].values, vec![Some(1.0), Some(2.0), None, Some(4.0)]);
    }

    #[test]
    fn singleton_series() {
        let series = build_series(&[row(7, Some(3.0))]).unwrap();
        assert_eq!(series[0].len(), 1);
        assert_eq!(series[0].start_date, d(7));
    }

    #[test]
    fn conflicting_duplicates_error_names_key() {
        let rows = vec![row(1, Some(1.0)), row(1, Some(2.0))];
        let err = build_series(&rows).unwrap_err();
        assert!(err.to_string().contains("m/f/mean"));
    }

    #[test]
    fn equal_duplicates_collapse() {
        let rows = vec![row(1, Some(1.0)), row(1, Some(1.0))];
        assert_eq!(build_series(&rows).unwrap()[0].len(), 1);
    }

    #[test]
    fn horizon_selection() {
        assert_eq!(select_horizon(13), None);
        assert_eq!(select_horizon(14), Some(14));
        assert_eq!(select_horizon(20), Some(14));
        assert_eq!(select_horizon(27), Some(14));
        assert_eq!(select_horizon(28), Some(28));
        assert_eq!(select_horizon(100), Some(28));
    }

    #[test]
    fn complete_30_day_series_uses_long_horizon() {
        let s = dense_series(30);
        let w = build_window(&s, 29);
        assert!(w.is_valid());
        assert_eq!(w.horizon, 28);
        assert_eq!(w.history.len(), 28);
        assert_eq!(w.observed, Some(29.0));
    }

    #[test]
    fn missing_value_in_window_invalidates() {
        let mut s = dense_series(30);
        s.values[26] = None; // t-3 for t = 29
        let w = build_window(&s, 29);
        assert_eq!(w.validity, WindowValidity::MissingInWindow);
        assert!(!w.is_valid());
    }

    #[test]
    fn short_series_has_insufficient_history() {
        let s = dense_series(10);
        let w = build_window(&s, 9);
        assert_eq!(w.validity, WindowValidity::InsufficientHistory);
        assert_eq!(w.horizon, 0);
    }

    #[test]
    fn missing_observed_invalidates() {
        let mut s = dense_series(30);
        s.values[29] = None;
        let w = build_window(&s, 29);
        assert_eq!(w.validity, WindowValidity::MissingObserved);
    }

    #[test]
    fn onehot_weekdays() {
        // 2024-01-01 is a Monday, 2024-01-07 a Sunday.
        assert_eq!(day_of_week_onehot(d(1)), [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(day_of_week_onehot(d(7)), [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(day_of_week_onehot(d(1)), day_of_week_onehot(d(8)));
        let onehot = day_of_week_onehot(d(17));
        assert_eq!(onehot.iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(onehot.iter().filter(|v| **v == 0.0).count(), 6);
    }

    #[test]
    fn window_history_matches_naive_slice() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let len = rng.gen_range(14..80);
            let values: Vec<Option<f64>> = (0..len)
                .map(|_| rng.gen_bool(0.9).then(|| rng.gen_range(-10.0..10.0)))
                .collect();
            let s = UnivariateSeries::new(SeriesKey::new("m", "f", StatisticKind::Mean), d(1), values);
            for i in 0..s.len() {
                let w = build_window(&s, i);
                if w.is_valid() {
                    let expect: Vec<f64> =
                        s.values[i - w.horizon..i].iter().map(|v| v.unwrap()).collect();
                    assert_eq!(w.history, expect);
                }
            }
        }
    }

    #[test]
    fn build_series_of_flatten_is_identity() {
        let mut s = dense_series(20);
        s.values[5] = None;
        s.values[12] = None;
        let rows = flatten_series(&s);
        let rebuilt = build_series(&rows).unwrap();
        assert_eq!(rebuilt, vec![s]);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut s = dense_series(16);
        s.values[3] = None;
        let labeled = LabeledSeries {
            series: s,
            anomalies: vec![LabelInterval::new(d(10), d(12)).unwrap()],
        };
        write_dataset(&path, std::slice::from_ref(&labeled)).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, vec![labeled]);
    }
}
