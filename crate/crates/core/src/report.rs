//! Static alert reports: one self-contained HTML file per model alert, with
//! embedded SVG plots (observed values, forecast baseline, shaded confidence
//! band, anomalous days), a feature-importance table, a traffic panel, and
//! the filter trace of every bundled interval.
//!
//! Rendering is pure: the same bundle and timestamp produce byte-identical
//! output. Every number shown comes from a stats or decisions file field.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{DecisionRecord, ModelAlert};
use crate::series::SeriesKey;
use crate::stats::{DailyStatRow, StatisticKind, MODEL_ENTITY};

/// Days of context drawn before an alert starts and after it ends.
const CONTEXT_BEFORE: i64 = 21;
const CONTEXT_AFTER: i64 = 7;

/// Per-model, per-entity importance scores supplied by configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ImportanceConfig(pub BTreeMap<String, BTreeMap<String, f64>>);

impl ImportanceConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ImportanceConfig =
            serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))?;
        for scores in cfg.0.values() {
            if scores.values().any(|s| !s.is_finite()) {
                return Err(Error::Data("importance scores must be finite".into()));
            }
        }
        Ok(cfg)
    }

    pub fn score(&self, model_id: &str, entity: &str) -> Option<f64> {
        self.0.get(model_id).and_then(|m| m.get(entity)).copied()
    }
}

/// One plotted series: the observed slice plus per-day forecasts.
#[derive(Debug, Clone)]
pub struct EntityPanel {
    pub key: SeriesKey,
    pub dates: Vec<NaiveDate>,
    pub observed: Vec<Option<f64>>,
    /// (baseline, lower, upper) for days that had a decision.
    pub forecasts: Vec<Option<(f64, f64, f64)>>,
    pub anomalous: Vec<NaiveDate>,
    pub patterns: Vec<String>,
}

/// Everything needed to render one alert report.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub alert: ModelAlert,
    pub panels: Vec<EntityPanel>,
    /// (entity, score); sorted descending, unknown scores last.
    pub importance: Vec<(String, Option<f64>)>,
    /// (date, traffic, traffic_ratio) for the alert's model.
    pub traffic: Vec<(NaiveDate, Option<f64>, Option<f64>)>,
    /// Render timestamp, injected by the caller so output is reproducible.
    pub generated_at: String,
}

/// Assembles the plot slices, importance table, and traffic panel behind one
/// alert from the stats and decisions files.
pub fn build_bundle(
    alert: &ModelAlert,
    stats: &[DailyStatRow],
    records: &[DecisionRecord],
    importance: &ImportanceConfig,
    generated_at: &str,
) -> ReportBundle {
    let from = alert.start - Duration::days(CONTEXT_BEFORE);
    let to = alert.end + Duration::days(CONTEXT_AFTER);
    let dates: Vec<NaiveDate> = {
        let mut v = Vec::new();
        let mut cur = from;
        while cur <= to {
            v.push(cur);
            cur += Duration::days(1);
        }
        v
    };

    let mut keys: Vec<SeriesKey> = alert
        .intervals
        .iter()
        .map(|fi| fi.interval.key.clone())
        .collect();
    keys.sort();
    keys.dedup();

    let mut observed_by_key: BTreeMap<(&SeriesKey, NaiveDate), f64> = BTreeMap::new();
    for key in &keys {
        for row in stats {
            if row.model_id == key.model_id
                && row.entity == key.entity
                && row.statistic == key.statistic
                && row.date >= from
                && row.date <= to
            {
                if let Some(v) = row.value {
                    observed_by_key.insert((key, row.date), v);
                }
            }
        }
    }

    let mut forecast_by_key: BTreeMap<(&SeriesKey, NaiveDate), (f64, f64, f64)> = BTreeMap::new();
    let mut observed_from_records: BTreeMap<(&SeriesKey, NaiveDate), f64> = BTreeMap::new();
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
            ..
        } = rec
        {
            if *date < from || *date > to {
                continue;
            }
            if let Some(key) = keys
                .iter()
                .find(|k| k.model_id == *model_id && k.entity == *entity && k.statistic == *statistic)
            {
                forecast_by_key.insert((key, *date), (*baseline, *lower, *upper));
                observed_from_records.insert((key, *date), *observed);
            }
        }
    }

    let panels: Vec<EntityPanel> = keys
        .iter()
        .map(|key| {
            let observed = dates
                .iter()
                .map(|d| {
                    observed_by_key
                        .get(&(key, *d))
                        .or_else(|| observed_from_records.get(&(key, *d)))
                        .copied()
                })
                .collect();
            let forecasts = dates
                .iter()
                .map(|d| forecast_by_key.get(&(key, *d)).copied())
                .collect();
            let mut anomalous = Vec::new();
            let mut patterns = Vec::new();
            for fi in &alert.intervals {
                if fi.interval.key == *key {
                    patterns.push(fi.interval.pattern.to_string());
                    let mut cur = fi.interval.start;
                    while cur <= fi.interval.end {
                        anomalous.push(cur);
                        cur += Duration::days(1);
                    }
                }
            }
            patterns.dedup();
            EntityPanel {
                key: key.clone(),
                dates: dates.clone(),
                observed,
                forecasts,
                anomalous,
                patterns,
            }
        })
        .collect();

    let mut importance_rows: Vec<(String, Option<f64>)> = keys
        .iter()
        .map(|k| k.entity.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(|entity| {
            let score = importance.score(&alert.model_id, &entity);
            (entity, score)
        })
        .collect();
    importance_rows.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => y.partial_cmp(&x).unwrap().then(a.0.cmp(&b.0)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(&b.0),
    });

    let traffic = dates
        .iter()
        .map(|d| {
            let find = |stat: StatisticKind| {
                stats
                    .iter()
                    .find(|r| {
                        r.model_id == alert.model_id
                            && r.entity == MODEL_ENTITY
                            && r.statistic == stat
                            && r.date == *d
                    })
                    .and_then(|r| r.value)
            };
            (*d, find(StatisticKind::Traffic), find(StatisticKind::TrafficRatio))
        })
        .collect();

    ReportBundle {
        alert: alert.clone(),
        panels,
        importance: importance_rows,
        traffic,
        generated_at: generated_at.to_string(),
    }
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 220.0;
const MARGIN_L: f64 = 54.0;
const MARGIN_R: f64 = 12.0;
const MARGIN_T: f64 = 12.0;
const MARGIN_B: f64 = 28.0;

/// Vertical axis range with a fixed 5% padding; degenerate (flat) data pads
/// by 5% of the magnitude so the polyline never sits on the frame.
pub(crate) fn axis_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.05 * hi.abs().max(1.0) };
    (lo - pad, hi + pad)
}

fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

/// Renders one series slice as an SVG fragment: shaded band over the days
/// that have forecasts, dashed baseline, solid observed polyline, and a
/// marker on each anomalous day. Deterministic for identical inputs.
pub fn plot_series_svg(
    dates: &[NaiveDate],
    observed: &[Option<f64>],
    forecasts: &[Option<(f64, f64, f64)>],
    anomalous: &[NaiveDate],
) -> String {
    assert!(!dates.is_empty(), "plot needs at least one day");
    assert_eq!(dates.len(), observed.len());
    assert_eq!(dates.len(), forecasts.len());

    let mut all_values: Vec<f64> = observed.iter().flatten().copied().collect();
    for f in forecasts.iter().flatten() {
        all_values.extend([f.0, f.1, f.2]);
    }
    if all_values.is_empty() {
        all_values.push(0.0);
    }
    let (y_min, y_max) = axis_range(&all_values);

    let n = dates.len();
    let x_of = |i: usize| {
        let span = (n.max(2) - 1) as f64;
        MARGIN_L + (PLOT_W - MARGIN_L - MARGIN_R) * i as f64 / span
    };
    let y_of = |v: f64| {
        let t = (v - y_min) / (y_max - y_min);
        PLOT_H - MARGIN_B - (PLOT_H - MARGIN_T - MARGIN_B) * t
    };

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {PLOT_W} {PLOT_H}" width="{PLOT_W}" height="{PLOT_H}">"#
    );
    let _ = write!(
        svg,
        r#"<rect x="0" y="0" width="{PLOT_W}" height="{PLOT_H}" fill="white"/>"#
    );

    // Confidence band over contiguous runs of forecast days.
    let mut i = 0;
    while i < n {
        if forecasts[i].is_none() {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && forecasts[i].is_some() {
            i += 1;
        }
        let run = start..i;
        let mut points = String::new();
        for j in run.clone() {
            let (_, _, upper) = forecasts[j].unwrap();
            let _ = write!(points, "{},{} ", fmt2(x_of(j)), fmt2(y_of(upper)));
        }
        for j in run.rev() {
            let (_, lower, _) = forecasts[j].unwrap();
            let _ = write!(points, "{},{} ", fmt2(x_of(j)), fmt2(y_of(lower)));
        }
        let _ = write!(
            svg,
            r##"<polygon class="band" points="{}" fill="#9ecae1" fill-opacity="0.4" stroke="none"/>"##,
            points.trim_end()
        );
    }

    // Baseline (dashed) over forecast runs.
    let mut i = 0;
    while i < n {
        if forecasts[i].is_none() {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && forecasts[i].is_some() {
            i += 1;
        }
        let points: Vec<String> = (start..i)
            .map(|j| format!("{},{}", fmt2(x_of(j)), fmt2(y_of(forecasts[j].unwrap().0))))
            .collect();
        let _ = write!(
            svg,
            r##"<polyline class="baseline" points="{}" fill="none" stroke="#2b5d8c" stroke-width="1" stroke-dasharray="4 3"/>"##,
            points.join(" ")
        );
    }

    // Observed values over present runs.
    let mut i = 0;
    while i < n {
        if observed[i].is_none() {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && observed[i].is_some() {
            i += 1;
        }
        let points: Vec<String> = (start..i)
            .map(|j| format!("{},{}", fmt2(x_of(j)), fmt2(y_of(observed[j].unwrap()))))
            .collect();
        let _ = write!(
            svg,
            r##"<polyline class="observed" points="{}" fill="none" stroke="#222222" stroke-width="1.5"/>"##,
            points.join(" ")
        );
    }

    // Anomalous day markers.
    for (j, date) in dates.iter().enumerate() {
        if anomalous.contains(date) {
            if let Some(v) = observed[j] {
                let _ = write!(
                    svg,
                    r##"<circle class="anomaly" cx="{}" cy="{}" r="3.5" fill="#d62728"/>"##,
                    fmt2(x_of(j)),
                    fmt2(y_of(v))
                );
            }
        }
    }

    // Frame and sparse labels.
    let _ = write!(
        svg,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#999999" stroke-width="0.5"/>"##,
        fmt2(MARGIN_L),
        fmt2(MARGIN_T),
        fmt2(PLOT_W - MARGIN_L - MARGIN_R),
        fmt2(PLOT_H - MARGIN_T - MARGIN_B)
    );
    let _ = write!(
        svg,
        r##"<text x="4" y="{}" font-size="9" fill="#555555">{}</text>"##,
        fmt2(y_of(y_max) + 4.0),
        fmt2(y_max)
    );
    let _ = write!(
        svg,
        r##"<text x="4" y="{}" font-size="9" fill="#555555">{}</text>"##,
        fmt2(y_of(y_min)),
        fmt2(y_min)
    );
    let _ = write!(
        svg,
        r##"<text x="{}" y="{}" font-size="9" fill="#555555">{}</text>"##,
        fmt2(MARGIN_L),
        fmt2(PLOT_H - 8.0),
        dates[0]
    );
    let _ = write!(
        svg,
        r##"<text x="{}" y="{}" font-size="9" fill="#555555" text-anchor="end">{}</text>"##,
        fmt2(PLOT_W - MARGIN_R),
        fmt2(PLOT_H - 8.0),
        dates[n - 1]
    );
    svg.push_str("</svg>");
    svg
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the full report document.
pub fn render_report(bundle: &ReportBundle) -> String {
    let alert = &bundle.alert;
    let mut html = String::new();
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">\
         <title>Model alert: {model}</title>\
         <style>body{{font-family:sans-serif;max-width:720px;margin:2em auto;color:#222}}\
         table{{border-collapse:collapse}}td,th{{border:1px solid #ccc;padding:4px 8px;font-size:13px}}\
         h2{{border-bottom:1px solid #ddd;padding-bottom:4px}}\
         .muted{{color:#777;font-size:12px}}</style></head><body>\n",
        model = html_escape(&alert.model_id)
    );

    // Summary.
    let patterns: Vec<String> = {
        let mut p: Vec<String> = alert
            .intervals
            .iter()
            .map(|fi| fi.interval.pattern.to_string())
            .collect();
        p.sort();
        p.dedup();
        p
    };
    let _ = write!(
        html,
        "<h1>Model alert: {}</h1>\n<p>Anomalous from <b>{}</b> to <b>{}</b> \
         ({} interval{}), pattern: <b>{}</b>. Traffic ratio at alert time: <b>{}</b>. \
         Grouping rule: {}.</p>\n",
        html_escape(&alert.model_id),
        alert.start,
        alert.end,
        alert.intervals.len(),
        if alert.intervals.len() == 1 { "" } else { "s" },
        patterns.join(", "),
        alert
            .traffic_ratio
            .map_or("unknown".to_string(), |r| format!("{:.1}%", r * 100.0)),
        html_escape(&alert.rule),
    );

    // Per-entity plots.
    for panel in &bundle.panels {
        let _ = write!(
            html,
            "<h2 class=\"entity\">{} / {}</h2>\n<p class=\"muted\">pattern: {}; {} anomalous day{}</p>\n{}\n",
            html_escape(&panel.key.entity),
            panel.key.statistic,
            if panel.patterns.is_empty() { "-".to_string() } else { panel.patterns.join(", ") },
            panel.anomalous.len(),
            if panel.anomalous.len() == 1 { "" } else { "s" },
            plot_series_svg(&panel.dates, &panel.observed, &panel.forecasts, &panel.anomalous)
        );
    }

    // Importance table.
    html.push_str("<h2>Feature importance</h2>\n<table><tr><th>entity</th><th>importance</th></tr>\n");
    for (entity, score) in &bundle.importance {
        let _ = writeln!(
            html,
            "<tr><td>{}</td><td>{}</td></tr>",
            html_escape(entity),
            score.map_or("unknown importance".to_string(), |s| format!("{s}")),
        );
    }
    html.push_str("</table>\n");

    // Traffic panel.
    html.push_str("<h2>Traffic</h2>\n<table><tr><th>date</th><th>traffic</th><th>traffic ratio</th></tr>\n");
    for (date, traffic, ratio) in &bundle.traffic {
        if traffic.is_none() && ratio.is_none() {
            continue;
        }
        let _ = writeln!(
            html,
            "<tr><td>{}</td><td>{}</td><td>{}</td></tr>",
            date,
            traffic.map_or(String::new(), |t| format!("{t}")),
            ratio.map_or(String::new(), |r| format!("{:.2}%", r * 100.0)),
        );
    }
    html.push_str("</table>\n");

    // Filter trace.
    html.push_str("<h2>Filter trace</h2>\n<table><tr><th>series</th><th>interval</th><th>severity</th><th>filters passed</th></tr>\n");
    for fi in &alert.intervals {
        let checks: Vec<String> = fi
            .checks
            .iter()
            .map(|c| format!("{}:{}", c.filter, if c.passed { "pass" } else { "fail" }))
            .collect();
        let _ = writeln!(
            html,
            "<tr><td>{}</td><td>{} .. {}</td><td>{:.2}</td><td>{}</td></tr>",
            html_escape(&fi.interval.key.to_string()),
            fi.interval.start,
            fi.interval.end,
            fi.interval.max_severity,
            if checks.is_empty() { "(no filters enabled)".to_string() } else { checks.join(", ") },
        );
    }
    html.push_str("</table>\n");

    let _ = write!(
        html,
        "<p class=\"muted\">generated at {}</p>\n</body></html>\n",
        html_escape(&bundle.generated_at)
    );
    html
}

/// Writes one report file per bundle into `out_dir`, named by model and
/// alert start day. Returns the written path.
pub fn write_report(bundle: &ReportBundle, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let safe_model: String = bundle
        .alert
        .model_id
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let path = out_dir.join(format!("{}_{}.html", safe_model, bundle.alert.start));
    std::fs::write(&path, render_report(bundle)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
