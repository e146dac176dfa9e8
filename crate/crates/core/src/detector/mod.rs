//! Two-stage anomaly detector over detection windows.
//!
//! Stage 1 forecasts a baseline and quantile boundaries for the target day
//! from the window-normalized history and the day-of-week one-hot, with the
//! boundary offsets scaled by a learned irregularity score derived from the
//! IQR of week-over-week differences. Stage 2 turns the normalized
//! deviations between the observation and the three forecasts into an
//! anomaly probability. A day is anomalous only when the observation falls
//! outside the boundaries *and* the probability clears the threshold.
//!
//! Everything runs in per-window normalized space and is mapped back through
//! the window's own (mean, std), which makes decisions invariant to positive
//! affine rescaling of the input series.

mod net;
mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;
use crate::series::DetectionWindow;

pub(crate) use net::{ClassifierNet, ForecastNet};
pub use train::{
    gradient_check, random_check_batch, train, train_forecast_stage, tune_threshold,
    GradientCheckReport, TrainConfig,
};

/// Current weight-file format version.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Smallest allowed normalization scale; constant windows are pinned here.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Per-window normalization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub mu: f64,
    pub sigma: f64,
}

/// Stage-1 output for one window, in raw (un-normalized) space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub baseline: f64,
    pub lower: f64,
    pub upper: f64,
    pub irregularity: f64,
    pub norm: NormParams,
}

/// Final per-day verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointDecision {
    pub probability: f64,
    pub out_of_boundary: bool,
    pub is_anomaly: bool,
    /// |baseline - observed| / boundary width (width floored at 1e-8).
    pub severity: f64,
}

/// All trainable weights of both stages plus the hyperparameters needed to
/// reproduce the input pipeline. Serializable with a bit-exact round trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub horizon: usize,
    pub recent_omit: usize,
    pub tau_lower: f64,
    pub tau_upper: f64,
    pub lambda: f64,
    pub theta_anomaly: f64,
    pub(crate) forecast_net: ForecastNet,
    pub(crate) classifier: ClassifierNet,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    model: ForecastModel,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

impl ForecastModel {
    /// Freshly initialized (untrained) model with default hyperparameters;
    /// the starting point of training and the subject of gradient checks.
    pub fn fresh(horizon: usize, seed: u64) -> Result<Self> {
        train::fresh_model_for(horizon, seed)
    }

    /// Width of the stage-1 input: omitted history plus the 7 seasonality slots.
    pub fn input_dim(&self) -> usize {
        self.horizon - self.recent_omit + 7
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.recent_omit >= self.horizon {
            return Err(Error::InvalidInput(format!(
                "recent_omit {} must be smaller than horizon {}",
                self.recent_omit, self.horizon
            )));
        }
        if !(self.theta_anomaly > 0.0 && self.theta_anomaly < 1.0) {
            return Err(Error::InvalidInput(format!(
                "theta_anomaly {} outside (0, 1)",
                self.theta_anomaly
            )));
        }
        if !(0.0 < self.tau_lower && self.tau_lower < self.tau_upper && self.tau_upper < 1.0) {
            return Err(Error::InvalidInput(format!(
                "quantile levels ({}, {}) must satisfy 0 < lower < upper < 1",
                self.tau_lower, self.tau_upper
            )));
        }
        if self.forecast_net.input_dim() != self.input_dim() || !self.forecast_net.shapes_ok() {
            return Err(Error::InvalidInput(
                "forecast network shape inconsistent with horizon".into(),
            ));
        }
        if !self.classifier.shapes_ok() {
            return Err(Error::InvalidInput("classifier shape invalid".into()));
        }
        let finite = |p: &[f64]| p.iter().all(|v| v.is_finite());
        if !finite(&self.forecast_net.params()) || !finite(&self.classifier.params()) {
            return Err(Error::Data("model contains non-finite weights".into()));
        }
        Ok(())
    }
}

/// Z-scores a window by its own mean and population std.
///
/// Sub-epsilon variation (including exactly constant windows) normalizes to
/// all zeros with the scale pinned at [`SIGMA_FLOOR`], so the inverse map is
/// still defined.
pub fn layer_normalize(history: &[f64]) -> (Vec<f64>, NormParams) {
    assert!(!history.is_empty(), "cannot normalize an empty window");
    let mu = numeric::mean(history);
    let sigma = numeric::population_std(history, mu);
    if sigma < SIGMA_FLOOR {
        return (
            vec![0.0; history.len()],
            NormParams {
                mu,
                sigma: SIGMA_FLOOR,
            },
        );
    }
    let z = history.iter().map(|x| (x - mu) / sigma).collect();
    (z, NormParams { mu, sigma })
}

/// Maps a normalized value back to raw space.
pub fn inverse_normalize(y: f64, norm: &NormParams) -> f64 {
    y * norm.sigma + norm.mu
}

/// Drops the most recent `k` days from a window (the last `k` entries).
pub fn recent_omit(history: &[f64], k: usize) -> Result<Vec<f64>> {
    if k >= history.len() {
        return Err(Error::InvalidInput(format!(
            "recent-omit {} must be smaller than window length {}",
            k,
            history.len()
        )));
    }
    Ok(history[..history.len() - k].to_vec())
}

/// IQR (25%/75% nearest-rank) of the week-over-week differences of a window.
pub fn week_over_week_iqr(window: &[f64]) -> f64 {
    assert!(window.len() >= 8, "window too short for week-over-week differences");
    let deltas: Vec<f64> = (0..window.len() - 7).map(|i| window[i] - window[i + 7]).collect();
    numeric::nearest_rank(&deltas, 0.75) - numeric::nearest_rank(&deltas, 0.25)
}

/// Irregularity score `2*sigmoid(w*iqr + b)` of a normalized window; the
/// zero-initialized layer yields exactly 1 (no boundary change).
pub fn irregularity_score(window_norm: &[f64], weight: f64, bias: f64) -> f64 {
    2.0 * net::sigmoid(weight * week_over_week_iqr(window_norm) + bias)
}

/// Normalized stage-1 inputs derived from one valid window.
pub(crate) struct PreparedInput {
    /// Omitted normalized history concatenated with the seasonality one-hot.
    pub input: Vec<f64>,
    pub iqr: f64,
    pub norm: NormParams,
    /// Observed value in normalized space.
    pub target: f64,
}

pub(crate) fn prepare_input(window: &DetectionWindow, k: usize) -> Result<PreparedInput> {
    if !window.is_valid() {
        return Err(Error::InvalidInput(format!(
            "invalid window: {}",
            window.validity.reason()
        )));
    }
    let (z, norm) = layer_normalize(&window.history);
    let iqr = week_over_week_iqr(&z);
    let mut input = recent_omit(&z, k)?;
    input.extend_from_slice(&window.seasonality);
    let observed = window.observed.expect("valid window has an observation");
    Ok(PreparedInput {
        input,
        iqr,
        norm,
        target: (observed - norm.mu) / norm.sigma,
    })
}

/// Runs stage 1 on a valid window: normalize, drop recent days, concatenate
/// seasonality, forecast, amplify boundaries by the irregularity score,
/// enforce boundary ordering, and map back to raw space.
pub fn forecast_forward(window: &DetectionWindow, model: &ForecastModel) -> Result<Forecast> {
    if window.is_valid() && window.horizon != model.horizon {
        return Err(Error::InvalidInput(format!(
            "window horizon {} does not match model horizon {}",
            window.horizon, model.horizon
        )));
    }
    let prep = prepare_input(window, model.recent_omit)?;
    let pass = model.forecast_net.forward(&prep.input, prep.iqr);
    // Ordering is enforced by clamping the boundaries to the baseline.
    let lower = pass.y_lower.min(pass.y_base);
    let upper = pass.y_upper.max(pass.y_base);
    Ok(Forecast {
        baseline: inverse_normalize(pass.y_base, &prep.norm),
        lower: inverse_normalize(lower, &prep.norm),
        upper: inverse_normalize(upper, &prep.norm),
        irregularity: pass.s_irr,
        norm: prep.norm,
    })
}

/// Runs stage 2: normalized deviations of the observation from the three
/// forecasts, through the classifier, to an anomaly probability.
pub fn classifier_forward(model: &ForecastModel, forecast: &Forecast, observed: f64) -> f64 {
    let s = forecast.norm.sigma;
    let features = [
        (observed - forecast.baseline) / s,
        (observed - forecast.lower) / s,
        (observed - forecast.upper) / s,
    ];
    model.classifier.probability(&features)
}

/// Full two-stage decision for one valid window.
pub fn detect_point(window: &DetectionWindow, model: &ForecastModel) -> Result<PointDecision> {
    let forecast = forecast_forward(window, model)?;
    let observed = window.observed.expect("valid window has an observation");
    let out_of_boundary = observed < forecast.lower || observed > forecast.upper;
    let probability = classifier_forward(model, &forecast, observed);
    let width = (forecast.upper - forecast.lower).max(1e-8);
    Ok(PointDecision {
        probability,
        out_of_boundary,
        is_anomaly: out_of_boundary && probability >= model.theta_anomaly,
        severity: (forecast.baseline - observed).abs() / width,
    })
}

/// Writes a model as versioned JSON. The float encoding is shortest
/// round-trip, so save/load reproduces every weight bit-exactly.
pub fn save_model(model: &ForecastModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(
        &mut w,
        &ModelFile {
            version: MODEL_FORMAT_VERSION,
            model: model.clone(),
        },
    )
    .map_err(|e| Error::Data(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a model, checking the format version before the payload.
pub fn load_model(path: &Path) -> Result<ForecastModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut content = String::new();
    use std::io::Read;
    BufReader::new(file)
        .read_to_string(&mut content)
        .map_err(|e| Error::io(path, e))?;
    let probe: VersionProbe = serde_json::from_str(&content)
        .map_err(|e| Error::parse(path.display().to_string(), 1, e.to_string()))?;
    if probe.version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelVersion {
            found: probe.version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let parsed: ModelFile = serde_json::from_str(&content)
        .map_err(|e| Error::parse(path.display().to_string(), 1, e.to_string()))?;
    parsed.model.validate()?;
    Ok(parsed.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::{DetectionWindow, SeriesKey, WindowValidity};
    use crate::stats::StatisticKind;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn key() -> SeriesKey {
        SeriesKey::new("m", "f", StatisticKind::Mean)
    }

    pub(super) fn window_from_history(history: Vec<f64>, observed: f64) -> DetectionWindow {
        let target = NaiveDate::from_ymd_opt(2024, 3, 14).unwrap();
        DetectionWindow {
            key: key(),
            target_day: target,
            horizon: history.len(),
            history,
            seasonality: crate::series::day_of_week_onehot(target),
            observed: Some(observed),
            validity: WindowValidity::Valid,
        }
    }

    fn test_model(horizon: usize, seed: u64) -> ForecastModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ForecastModel {
            horizon,
            recent_omit: 3,
            tau_lower: 0.025,
            tau_upper: 0.975,
            lambda: 1.0,
            theta_anomaly: 0.2,
            forecast_net: ForecastNet::init(horizon - 3 + 7, &mut rng),
            classifier: ClassifierNet::init(&mut rng),
        }
    }

    #[test]
    fn layer_normalize_matches_hand_computation() {
        let (z, norm) = layer_normalize(&[1.0, 2.0, 3.0]);
        assert!((norm.mu - 2.0).abs() < 1e-15);
        assert!((norm.sigma - 0.816496580927726).abs() < 1e-12);
        assert!((z[0] + 1.224744871391589).abs() < 1e-12);
        assert!(z[1].abs() < 1e-15);
        assert!((z[2] - 1.224744871391589).abs() < 1e-12);
    }

    #[test]
    fn layer_normalize_constant_window() {
        let (z, norm) = layer_normalize(&[5.0, 5.0, 5.0, 5.0]);
        assert_eq!(z, vec![0.0; 4]);
        assert_eq!(norm.mu, 5.0);
        assert_eq!(norm.sigma, SIGMA_FLOOR);
    }

    #[test]
    fn layer_normalize_is_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h: Vec<f64> = (0..28).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let (z, _) = layer_normalize(&h);
        let transformed: Vec<f64> = h.iter().map(|x| 3.5 * x - 2.0).collect();
        let (z2, _) = layer_normalize(&transformed);
        for (a, b) in z.iter().zip(&z2) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_output_has_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h: Vec<f64> = (0..28).map(|_| rng.gen_range(0.0..100.0)).collect();
        let (z, _) = layer_normalize(&h);
        let mu = crate::numeric::mean(&z);
        let sd = crate::numeric::population_std(&z, mu);
        assert!(mu.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inverse_normalize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h: Vec<f64> = (0..28).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let (z, norm) = layer_normalize(&h);
        for (orig, zi) in h.iter().zip(&z) {
            assert!((inverse_normalize(*zi, &norm) - orig).abs() < 1e-9);
        }
        assert_eq!(inverse_normalize(0.0, &NormParams { mu: 2.0, sigma: 0.8165 }), 2.0);
        assert_eq!(inverse_normalize(1.0, &NormParams { mu: 0.0, sigma: 1.0 }), 1.0);
    }

    #[test]
    fn recent_omit_drops_latest_days() {
        let h: Vec<f64> = (0..14).map(|i| i as f64).collect();
        let kept = recent_omit(&h, 3).unwrap();
        assert_eq!(kept.len(), 11);
        assert_eq!(*kept.last().unwrap(), 10.0);
        assert_eq!(recent_omit(&h, 0).unwrap(), h);
        assert!(recent_omit(&h, 14).is_err());
    }

    #[test]
    fn week_over_week_iqr_on_periodic_and_step_windows() {
        // 7-periodic window: all deltas zero.
        let periodic: Vec<f64> = (0..28).map(|i| ((i % 7) as f64).sin()).collect();
        assert_eq!(week_over_week_iqr(&periodic), 0.0);

        // Step window [0;7] then [1;7]: deltas all -1, IQR 0.
        let mut step = vec![0.0; 7];
        step.extend(vec![1.0; 7]);
        let deltas: Vec<f64> = (0..7).map(|i| step[i] - step[i + 7]).collect();
        assert_eq!(deltas, vec![-1.0; 7]);
        assert_eq!(week_over_week_iqr(&step), 0.0);
    }

    #[test]
    fn irregularity_is_one_at_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w: Vec<f64> = (0..28).map(|_| rng.gen_range(-2.0..2.0)).collect();
        assert_eq!(irregularity_score(&w, 0.0, 0.0), 1.0);
        // periodic window: S = 2*sigmoid(bias)
        let periodic: Vec<f64> = (0..28).map(|i| (i % 7) as f64).collect();
        let s = irregularity_score(&periodic, 1.3, -0.4);
        assert!((s - 2.0 * net::sigmoid(-0.4)).abs() < 1e-12);
    }

    #[test]
    fn forecast_enforces_boundary_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..20 {
            let model = test_model(14, seed);
            let history: Vec<f64> = (0..14).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let observed = rng.gen_range(-3.0..3.0);
            let w = window_from_history(history, observed);
            let f = forecast_forward(&w, &model).unwrap();
            assert!(f.lower <= f.baseline && f.baseline <= f.upper);
        }
    }

    #[test]
    fn forecast_rejects_invalid_window_and_wrong_horizon() {
        let model = test_model(14, 1);
        let mut w = window_from_history((0..14).map(|i| i as f64).collect(), 1.0);
        w.validity = WindowValidity::MissingInWindow;
        assert!(forecast_forward(&w, &model).is_err());

        let w28 = window_from_history((0..28).map(|i| i as f64).collect(), 1.0);
        let err = forecast_forward(&w28, &model).unwrap_err();
        assert!(err.to_string().contains("horizon"));
    }

    #[test]
    fn identical_normalized_deviations_give_identical_probability() {
        let model = test_model(14, 2);
        let f1 = Forecast {
            baseline: 10.0,
            lower: 8.0,
            upper: 12.0,
            irregularity: 1.0,
            norm: NormParams { mu: 10.0, sigma: 2.0 },
        };
        // Same geometry scaled by 100x.
        let f2 = Forecast {
            baseline: 1000.0,
            lower: 800.0,
            upper: 1200.0,
            irregularity: 1.0,
            norm: NormParams { mu: 1000.0, sigma: 200.0 },
        };
        let p1 = classifier_forward(&model, &f1, 13.0);
        let p2 = classifier_forward(&model, &f2, 1300.0);
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn zero_deviation_probability_is_deterministic() {
        let model = test_model(14, 3);
        let f = Forecast {
            baseline: 4.0,
            lower: 4.0,
            upper: 4.0,
            irregularity: 1.0,
            norm: NormParams { mu: 4.0, sigma: 1.0 },
        };
        let p1 = classifier_forward(&model, &f, 4.0);
        let p2 = classifier_forward(&model, &f, 4.0);
        assert_eq!(p1, p2);
        assert!(p1 > 0.0 && p1 < 1.0);
    }

    #[test]
    fn decision_requires_both_conditions() {
        // Drive the conjunction directly through its components.
        let model = test_model(14, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut saw_out = false;
        let mut saw_in = false;
        for _ in 0..200 {
            let history: Vec<f64> = (0..14).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let observed = rng.gen_range(-6.0..6.0);
            let w = window_from_history(history, observed);
            let f = forecast_forward(&w, &model).unwrap();
            let d = detect_point(&w, &model).unwrap();
            let out = observed < f.lower || observed > f.upper;
            assert_eq!(d.out_of_boundary, out);
            assert_eq!(d.is_anomaly, out && d.probability >= model.theta_anomaly);
            if d.is_anomaly {
                assert!(d.out_of_boundary);
            }
            saw_out |= out;
            saw_in |= !out;
        }
        assert!(saw_out && saw_in, "test should exercise both branches");
    }

    #[test]
    fn severity_is_deviation_over_width() {
        // baseline 10, observed 16, bounds [8, 12] -> severity 1.5
        let f = Forecast {
            baseline: 10.0,
            lower: 8.0,
            upper: 12.0,
            irregularity: 1.0,
            norm: NormParams { mu: 10.0, sigma: 1.0 },
        };
        let width = (f.upper - f.lower).max(1e-8);
        assert_eq!((f.baseline - 16.0f64).abs() / width, 1.5);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = test_model(28, 5);
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, model);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let history: Vec<f64> = (0..28).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let observed = rng.gen_range(-5.0..5.0);
            let w = window_from_history(history, observed);
            let a = forecast_forward(&w, &model).unwrap();
            let b = forecast_forward(&w, &loaded).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn load_rejects_truncated_and_wrong_version_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = test_model(14, 6);
        save_model(&model, &path).unwrap();

        let full = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &full[..full.len() / 2]).unwrap();
        assert!(load_model(&path).is_err());

        let bumped = full.replacen("\"version\":1", "\"version\":99", 1);
        std::fs::write(&path, bumped).unwrap();
        match load_model(&path) {
            Err(Error::ModelVersion { found: 99, expected: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
