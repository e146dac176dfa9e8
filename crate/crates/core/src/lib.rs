//! Model-health monitoring pipeline: daily statistics aggregation from scoring
//! events, a two-stage neural anomaly detector over univariate daily series,
//! anomaly filtering and model-level grouping, synthetic benchmark generation,
//! interval-wise evaluation, and static alert reports.
//!
//! The stages are plain functions over owned data; each module also defines the
//! file format it reads or writes so the stages compose on disk as well as in
//! memory.

pub mod detector;
pub mod error;
pub mod evalkit;
mod numeric;
pub mod postprocess;
pub mod report;
pub mod series;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use series::{DetectionWindow, LabelInterval, LabeledSeries, SeriesKey, UnivariateSeries};
pub use stats::{DailyStatRow, ScoringEvent, StatisticKind};
