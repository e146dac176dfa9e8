//! Synthetic benchmark generation: sine, square, or constant base series
//! with Gaussian noise, plus one injected anomaly per series (short spike or
//! persistent level shift) with configurable intensity and duration, and the
//! exact ground-truth label interval.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{LabelInterval, LabeledSeries, SeriesKey, UnivariateSeries};
use crate::stats::StatisticKind;

/// Base waveform of a synthetic series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sine,
    Square,
    Constant,
}

/// Injected anomaly family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthPattern {
    Spike,
    LevelShift,
}

/// Every injected anomaly leaves at least this many clean leading days.
pub const MIN_CLEAN_PREFIX: usize = 28;

/// Longest duration still considered a spike.
pub const SPIKE_MAX_DURATION: usize = 3;

/// What to inject into a base series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub pattern: SynthPattern,
    /// Shift magnitude in multiples of the noise level.
    pub intensity: f64,
    pub duration: usize,
}

impl AnomalySpec {
    pub fn validate(&self) -> Result<()> {
        if self.duration < 1 {
            return Err(Error::InvalidInput("anomaly duration must be at least 1".into()));
        }
        if self.pattern == SynthPattern::Spike && self.duration > SPIKE_MAX_DURATION {
            return Err(Error::InvalidInput(format!(
                "spike duration {} exceeds {SPIKE_MAX_DURATION} days",
                self.duration
            )));
        }
        Ok(())
    }
}

/// Full recipe for one synthetic series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub shape: Shape,
    pub length: usize,
    pub period: usize,
    pub amplitude: f64,
    pub base_level: f64,
    pub noise_std: f64,
    pub anomaly: Option<AnomalySpec>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length < 42 {
            return Err(Error::InvalidInput(format!(
                "series length {} too short (need at least 42 days)",
                self.length
            )));
        }
        if self.shape != Shape::Constant && self.period < 2 {
            return Err(Error::InvalidInput("period must be at least 2 days".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidInput("noise_std must be non-negative".into()));
        }
        if let Some(spec) = &self.anomaly {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Noiseless value of a shape at day `t`. The phase is reduced modulo the
/// period first, so periodicity is exact in floating point.
pub fn shape_value(shape: Shape, t: usize, period: usize, amplitude: f64, base_level: f64) -> f64 {
    match shape {
        Shape::Constant => base_level,
        Shape::Sine => {
            let phase = (t % period) as f64 / period as f64;
            base_level + amplitude * (2.0 * std::f64::consts::PI * phase).sin()
        }
        Shape::Square => {
            let phase = (t % period) as f64 / period as f64;
            let s = (2.0 * std::f64::consts::PI * phase).sin();
            base_level + amplitude * if s >= 0.0 { 1.0 } else { -1.0 }
        }
    }
}

/// Magnitude of an injected shift: `intensity` noise units, or a tenth of
/// the amplitude per unit when the series is noiseless.
pub fn resolve_magnitude(intensity: f64, noise_std: f64, amplitude: f64) -> f64 {
    let unit = if noise_std > 0.0 { noise_std } else { 0.1 * amplitude };
    intensity * unit
}

/// Deterministic base series: shape plus i.i.d. Gaussian noise from the seed.
pub fn generate_base_series(cfg: &SynthConfig, key: SeriesKey, start_date: NaiveDate) -> Result<UnivariateSeries> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let values = noisy_values(cfg, &mut rng);
    Ok(UnivariateSeries::new(key, start_date, values))
}

fn noisy_values(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Option<f64>> {
    let noise = (cfg.noise_std > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_std).expect("validated noise_std"));
    (0..cfg.length)
        .map(|t| {
            let clean = shape_value(cfg.shape, t, cfg.period, cfg.amplitude, cfg.base_level);
            let eps = noise.map_or(0.0, |n| n.sample(rng));
            Some(clean + eps)
        })
        .collect()
}

/// Adds an anomaly of the given magnitude starting at `location`.
///
/// Spikes elevate `duration` days and revert. Level shifts persist through
/// the end of the data: the series is truncated right after the labeled
/// interval, so the configured duration is exact and the shifted level is
/// the last thing observed. Returns the modified series and the label
/// covering exactly the modified days.
pub fn inject_anomaly(
    series: &UnivariateSeries,
    spec: &AnomalySpec,
    magnitude: f64,
    location: usize,
) -> Result<(UnivariateSeries, LabelInterval)> {
    spec.validate()?;
    if location < MIN_CLEAN_PREFIX {
        return Err(Error::InvalidInput(format!(
            "anomaly location {location} inside the {MIN_CLEAN_PREFIX}-day clean prefix"
        )));
    }
    if location + spec.duration > series.len() {
        return Err(Error::InvalidInput(format!(
            "series of {} days too short for an anomaly of {} days at {location}",
            series.len(),
            spec.duration
        )));
    }
    let mut out = series.clone();
    let end = location + spec.duration - 1;
    for i in location..=end {
        if let Some(v) = out.values[i].as_mut() {
            *v += magnitude;
        }
    }
    if spec.pattern == SynthPattern::LevelShift {
        out.values.truncate(end + 1);
    }
    let label = LabelInterval::new(series.date_at(location), series.date_at(end))?;
    Ok((out, label))
}

/// Generates one labeled series from a full config; the location of the
/// anomaly is drawn from the same seeded stream as the noise.
pub fn generate_series(cfg: &SynthConfig, key: SeriesKey, start_date: NaiveDate) -> Result<LabeledSeries> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = UnivariateSeries::new(key, start_date, noisy_values(cfg, &mut rng));

    let Some(spec) = &cfg.anomaly else {
        return Ok(LabeledSeries::unlabeled(base));
    };
    // Spikes keep at least one post-anomaly day so recovery is observable.
    let last_start = match spec.pattern {
        SynthPattern::Spike => cfg.length.checked_sub(spec.duration + 1),
        SynthPattern::LevelShift => cfg.length.checked_sub(spec.duration),
    };
    let last_start = last_start.filter(|l| *l >= MIN_CLEAN_PREFIX).ok_or_else(|| {
        Error::InvalidInput(format!(
            "length {} cannot fit a {}-day anomaly after {MIN_CLEAN_PREFIX} clean days",
            cfg.length, spec.duration
        ))
    })?;
    let location = rng.gen_range(MIN_CLEAN_PREFIX..=last_start);
    // Anomalies deviate in either direction; the sign comes from the same
    // seeded stream as the location.
    let magnitude = resolve_magnitude(spec.intensity, cfg.noise_std, cfg.amplitude);
    let magnitude = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
    let (series, label) = inject_anomaly(&base, spec, magnitude, location)?;
    Ok(LabeledSeries {
        series,
        anomalies: vec![label],
    })
}

/// Cell grid for benchmark datasets: the cross product of shapes, noise
/// levels, intensities, and durations. Durations longer than
/// [`SPIKE_MAX_DURATION`] become level shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthGrid {
    pub shapes: Vec<Shape>,
    pub noise_stds: Vec<f64>,
    pub intensities: Vec<f64>,
    pub durations: Vec<usize>,
    pub length: usize,
    pub period: usize,
    pub amplitude: f64,
    pub base_level: f64,
    pub start_date: NaiveDate,
}

impl Default for SynthGrid {
    fn default() -> Self {
        SynthGrid {
            shapes: vec![Shape::Sine, Shape::Square, Shape::Constant],
            noise_stds: vec![0.05, 0.1],
            intensities: vec![3.0, 5.0],
            durations: vec![2, 5],
            length: 56,
            period: 7,
            amplitude: 1.0,
            base_level: 5.0,
            start_date: default_start_date(),
        }
    }
}

/// Monday, 2024-01-01; keeps day-of-week phases aligned across series.
pub fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date")
}

/// Manifest line mapping a generated series to its recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub series_id: String,
    pub config: SynthConfig,
}

/// Expands the grid, generating `n_per_cell` series per cell with seeds
/// derived deterministically from `seed`.
pub fn generate_dataset(
    grid: &SynthGrid,
    n_per_cell: usize,
    seed: u64,
) -> Result<(Vec<LabeledSeries>, Vec<ManifestEntry>)> {
    if grid.shapes.is_empty()
        || grid.noise_stds.is_empty()
        || grid.intensities.is_empty()
        || grid.durations.is_empty()
    {
        return Err(Error::InvalidInput("synthetic grid has an empty dimension".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut dataset = Vec::new();
    let mut manifest = Vec::new();
    let mut idx = 0usize;
    for &shape in &grid.shapes {
        for &noise_std in &grid.noise_stds {
            for &intensity in &grid.intensities {
                for &duration in &grid.durations {
                    let pattern = if duration <= SPIKE_MAX_DURATION {
                        SynthPattern::Spike
                    } else {
                        SynthPattern::LevelShift
                    };
                    for _ in 0..n_per_cell {
                        let cfg = SynthConfig {
                            shape,
                            length: grid.length,
                            period: grid.period,
                            amplitude: grid.amplitude,
                            base_level: grid.base_level,
                            noise_std,
                            anomaly: Some(AnomalySpec {
                                pattern,
                                intensity,
                                duration,
                            }),
                            seed: master.gen(),
                        };
                        let series_id = format!("synth-{idx:05}");
                        let key = SeriesKey::new(series_id.clone(), "value", StatisticKind::Mean);
                        dataset.push(generate_series(&cfg, key, grid.start_date)?);
                        manifest.push(ManifestEntry { series_id, config: cfg });
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok((dataset, manifest))
}

/// Fraction of labeled-anomalous day slots across a dataset.
pub fn abnormal_day_fraction(dataset: &[LabeledSeries]) -> f64 {
    let total: i64 = dataset.iter().map(|ls| ls.series.len() as i64).sum();
    if total == 0 {
        return 0.0;
    }
    let abnormal: i64 = dataset
        .iter()
        .flat_map(|ls| &ls.anomalies)
        .map(LabelInterval::days)
        .sum();
    abnormal as f64 / total as f64
}

pub fn write_manifest(path: &std::path::Path, entries: &[ManifestEntry]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for entry in entries {
        serde_json::to_writer(&mut w, entry).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> SeriesKey {
        SeriesKey::new("s", "value", StatisticKind::Mean)
    }

    fn cfg(shape: Shape, noise_std: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            shape,
            length: 56,
            period: 7,
            amplitude: 1.0,
            base_level: 5.0,
            noise_std,
            anomaly: None,
            seed,
        }
    }

    #[test]
    fn noiseless_constant_is_exact() {
        let series = generate_base_series(&cfg(Shape::Constant, 0.0, 1), key(), default_start_date()).unwrap();
        assert!(series.values.iter().all(|v| *v == Some(5.0)));
    }

    #[test]
    fn noiseless_periodic_shapes_repeat_exactly() {
        for shape in [Shape::Sine, Shape::Square] {
            let series = generate_base_series(&cfg(shape, 0.0, 2), key(), default_start_date()).unwrap();
            for t in 0..series.len() - 7 {
                assert_eq!(series.values[t], series.values[t + 7], "shape {shape:?} day {t}");
            }
        }
    }

    #[test]
    fn noiseless_weekly_series_has_zero_wow_iqr() {
        let series = generate_base_series(&cfg(Shape::Sine, 0.0, 3), key(), default_start_date()).unwrap();
        let window: Vec<f64> = series.values[..28].iter().map(|v| v.unwrap()).collect();
        assert_eq!(crate::detector::week_over_week_iqr(&window), 0.0);
    }

    #[test]
    fn noise_level_matches_configuration() {
        let mut c = cfg(Shape::Sine, 0.1, 4);
        c.length = 1000;
        let noisy = generate_base_series(&c, key(), default_start_date()).unwrap();
        let residuals: Vec<f64> = noisy
            .values
            .iter()
            .enumerate()
            .map(|(t, v)| v.unwrap() - shape_value(c.shape, t, c.period, c.amplitude, c.base_level))
            .collect();
        let mu = residuals.iter().sum::<f64>() / residuals.len() as f64;
        let std =
            (residuals.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / residuals.len() as f64).sqrt();
        assert!((0.07..=0.13).contains(&std), "sample std {std}");
    }

    #[test]
    fn spike_injection_reverts_and_labels_exactly() {
        let base = generate_base_series(&cfg(Shape::Sine, 0.05, 5), key(), default_start_date()).unwrap();
        let spec = AnomalySpec {
            pattern: SynthPattern::Spike,
            intensity: 5.0,
            duration: 2,
        };
        let (modified, label) = inject_anomaly(&base, &spec, 0.25, 39).unwrap();
        assert_eq!(label.start, base.date_at(39));
        assert_eq!(label.end, base.date_at(40));
        for i in 0..base.len() {
            let delta = modified.values[i].unwrap() - base.values[i].unwrap();
            if (39..=40).contains(&i) {
                assert!((delta - 0.25).abs() < 1e-12);
            } else {
                assert_eq!(delta, 0.0, "day {i} modified outside the label");
            }
        }
    }

    #[test]
    fn level_shift_persists_to_series_end() {
        let base = generate_base_series(&cfg(Shape::Constant, 0.1, 6), key(), default_start_date()).unwrap();
        let spec = AnomalySpec {
            pattern: SynthPattern::LevelShift,
            intensity: 5.0,
            duration: 5,
        };
        let (modified, label) = inject_anomaly(&base, &spec, 0.5, 40).unwrap();
        assert_eq!(modified.len(), 45);
        assert_eq!(label.start, base.date_at(40));
        assert_eq!(label.end, base.date_at(44));
        assert_eq!(label.end, modified.end_date());
        for i in 40..45 {
            let delta = modified.values[i].unwrap() - base.values[i].unwrap();
            assert!((delta - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_intensity_leaves_series_unchanged() {
        let base = generate_base_series(&cfg(Shape::Square, 0.1, 7), key(), default_start_date()).unwrap();
        let spec = AnomalySpec {
            pattern: SynthPattern::Spike,
            intensity: 0.0,
            duration: 2,
        };
        let (modified, label) = inject_anomaly(&base, &spec, 0.0, 30).unwrap();
        assert_eq!(modified, base);
        assert_eq!(label.days(), 2);
    }

    #[test]
    fn injection_respects_clean_prefix_and_length() {
        let base = generate_base_series(&cfg(Shape::Constant, 0.1, 8), key(), default_start_date()).unwrap();
        let spec = AnomalySpec {
            pattern: SynthPattern::Spike,
            intensity: 3.0,
            duration: 2,
        };
        assert!(inject_anomaly(&base, &spec, 0.1, 27).is_err());
        assert!(inject_anomaly(&base, &spec, 0.1, 55).is_err());
        assert!(AnomalySpec {
            pattern: SynthPattern::Spike,
            intensity: 3.0,
            duration: 4
        }
        .validate()
        .is_err());
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let grid = SynthGrid {
            shapes: vec![Shape::Sine],
            noise_stds: vec![0.1],
            intensities: vec![5.0],
            durations: vec![2],
            ..SynthGrid::default()
        };
        let (a, manifest) = generate_dataset(&grid, 10, 42).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(manifest.len(), 10);
        assert!(a.iter().all(|ls| ls.anomalies.len() == 1));

        let (b, _) = generate_dataset(&grid, 10, 42).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate_dataset(&grid, 10, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_cover_exactly_the_modified_days() {
        // twin-series oracle: compare against the same seed without anomaly
        let grid = SynthGrid::default();
        let (dataset, manifest) = generate_dataset(&grid, 2, 7).unwrap();
        for (ls, entry) in dataset.iter().zip(&manifest) {
            let mut clean_cfg = entry.config.clone();
            clean_cfg.anomaly = None;
            let twin =
                generate_base_series(&clean_cfg, ls.series.key.clone(), grid.start_date).unwrap();
            let label = ls.anomalies[0];
            for i in 0..ls.series.len() {
                let differs = ls.series.values[i] != twin.values[i];
                let labeled = label.contains(ls.series.date_at(i));
                let zero_magnitude = entry.config.anomaly.unwrap().intensity == 0.0;
                assert_eq!(differs, labeled && !zero_magnitude, "day {i} of {}", ls.series.key);
            }
        }
    }

    #[test]
    fn abnormal_day_fraction_counts_label_days() {
        let grid = SynthGrid {
            shapes: vec![Shape::Constant],
            noise_stds: vec![0.1],
            intensities: vec![5.0],
            durations: vec![2],
            length: 50,
            ..SynthGrid::default()
        };
        let (dataset, _) = generate_dataset(&grid, 5, 9).unwrap();
        let fraction = abnormal_day_fraction(&dataset);
        // spikes keep full length: 2 labeled days per 50-day series
        assert!((fraction - 2.0 / 50.0).abs() < 1e-12);
    }
}
