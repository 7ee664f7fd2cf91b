//! Context-aware transmission of buffered vehicular sensor data.
//!
//! Sensor data is buffered on the vehicle and the whole buffer is sent when a
//! per-tick transmission probability, driven by a channel-quality metric, fires.
//! The crate provides the pieces needed to evaluate that idea offline:
//!
//! - [`trace`]: context snapshots (LTE indicators + mobility), CSV ingestion, resampling
//! - [`synth`]: deterministic synthetic drives with engineered connectivity hotspots
//! - [`metrics`]: the normalized transmission metric (single, weighted, predicted rate)
//! - [`predictor`]: M5-style regression tree for data-rate prediction
//! - [`geomap`]: grid aggregation of observed link quality
//! - [`cat`]: the buffering / transmission decision engine
//! - [`sim`]: trace-driven replay and scheme comparison
//! - [`cli`]: the `catsim` command-line front end

pub mod cat;
pub mod cli;
pub mod geo;
pub mod geomap;
pub mod metrics;
pub mod predictor;
pub mod rng;
pub mod sim;
pub mod synth;
pub mod trace;

pub use cat::{BufferState, CatParams, TransmissionPolicy, TransmissionRecord};
pub use geomap::GridMap;
pub use metrics::{Indicator, MetricSpec, MetricValue};
pub use predictor::{RegressionTree, TrainingSet, TreeParams};
pub use sim::{GainReport, SimConfig, SimReport};
pub use synth::Scenario;
pub use trace::{ContextSnapshot, GeoPosition, Trace};
