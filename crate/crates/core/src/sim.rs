//! Trace-driven replay of a transmission policy and scheme comparison.
//!
//! A run walks the trace tick by tick. The first snapshot marks the start
//! (empty buffer, nothing elapsed); every later snapshot is one engine step.
//! Transmissions are executed at the snapshot's ground-truth `rate_mbps`.
//!
//! The headline KPI is the arithmetic mean of per-transmission rates. For a
//! fair comparison the periodic baseline uses the channel-aware run's realized
//! mean gap as its interval ([`run_paired`]).

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cat::{self, BufferState, CatError, TransmissionPolicy, TransmissionRecord, DEFAULT_SENSOR_RATE_BPS};
use crate::geomap::GridMap;
use crate::metrics::{MetricBounds, MetricDeps, MetricError};
use crate::predictor::RegressionTree;
use crate::rng;
use crate::trace::{resample, Trace, TraceError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("trace has no rate_mbps ground truth")]
    NoGroundTruth,
    #[error("invalid simulation config: {0}")]
    Invalid(String),
    #[error("cannot compare: {0} report has no transmissions")]
    EmptyReport(&'static str),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Cat(#[from] CatError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub tick_s: f64,
    #[serde(default = "default_sensor_rate")]
    pub sensor_rate_bps: f64,
    #[serde(default)]
    pub seed: u64,
    pub policy: TransmissionPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<MetricBounds>,
}

fn default_sensor_rate() -> f64 {
    DEFAULT_SENSOR_RATE_BPS
}

impl SimConfig {
    pub fn new(policy: TransmissionPolicy, tick_s: f64, seed: u64) -> Self {
        Self {
            tick_s,
            sensor_rate_bps: DEFAULT_SENSOR_RATE_BPS,
            seed,
            policy,
            bounds: None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.tick_s.is_finite() && self.tick_s > 0.0) {
            return Err(SimError::Invalid(format!(
                "tick_s must be positive, got {}",
                self.tick_s
            )));
        }
        if !(self.sensor_rate_bps.is_finite() && self.sensor_rate_bps > 0.0) {
            return Err(SimError::Invalid(format!(
                "sensor_rate_bps must be positive, got {}",
                self.sensor_rate_bps
            )));
        }
        if let Some(b) = &self.bounds {
            b.validate()?;
        }
        self.policy.validate()?;
        Ok(())
    }
}

/// Model and map a run may need.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimDeps<'a> {
    pub predictor: Option<&'a RegressionTree>,
    pub geomap: Option<&'a GridMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: TransmissionPolicy,
    pub seed: u64,
    pub tick_s: f64,
    pub sensor_rate_bps: f64,
    pub trace_duration_s: f64,
    pub tx_count: usize,
    /// Arithmetic mean of per-transmission rates.
    pub mean_tx_rate_mbps: Option<f64>,
    /// Bytes sent over total transmission time.
    pub time_avg_rate_mbps: Option<f64>,
    pub mean_buffer_age_s: Option<f64>,
    pub max_buffer_age_s: Option<f64>,
    /// Mean interval between transmissions (the first measured from trace start).
    pub mean_gap_s: Option<f64>,
    pub deadline_tx_count: usize,
    pub generated_bytes: u64,
    pub transmitted_bytes: u64,
    pub final_buffer_bytes: u64,
    pub transmissions: Vec<TransmissionRecord>,
}

impl SimReport {
    fn from_run(trace: &Trace, config: &SimConfig, transmissions: Vec<TransmissionRecord>, state: BufferState) -> Self {
        let n = transmissions.len();
        let mean =
            |f: fn(&TransmissionRecord) -> f64| (n > 0).then(|| transmissions.iter().map(f).sum::<f64>() / n as f64);
        let transmitted_bytes: u64 = transmissions.iter().map(|r| r.payload_bytes).sum();
        let total_duration: f64 = transmissions.iter().map(|r| r.duration_s).sum();
        let deadline_tx_count = match &config.policy {
            TransmissionPolicy::Cat { params, .. } => {
                transmissions.iter().filter(|r| r.elapsed_s >= params.t_max_s).count()
            }
            TransmissionPolicy::Periodic { .. } => 0,
        };
        Self {
            policy: config.policy.clone(),
            seed: config.seed,
            tick_s: config.tick_s,
            sensor_rate_bps: config.sensor_rate_bps,
            trace_duration_s: trace.duration_s(),
            tx_count: n,
            mean_tx_rate_mbps: mean(|r| r.rate_mbps),
            time_avg_rate_mbps: (total_duration > 0.0).then(|| transmitted_bytes as f64 * 8.0 / total_duration / 1e6),
            mean_buffer_age_s: mean(|r| r.mean_buffer_age_s),
            max_buffer_age_s: transmissions
                .iter()
                .map(TransmissionRecord::max_item_age_s)
                .reduce(f64::max),
            mean_gap_s: mean(|r| r.elapsed_s),
            deadline_tx_count,
            generated_bytes: state.generated_bytes,
            transmitted_bytes,
            final_buffer_bytes: state.bytes,
            transmissions,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn write_tx_csv<W: Write>(&self, out: W) -> Result<(), CatError> {
        cat::write_tx_log(&self.transmissions, out)
    }

    /// `transmitted + final buffer == generated`, exactly.
    pub fn conserves_bytes(&self) -> bool {
        self.transmitted_bytes + self.final_buffer_bytes == self.generated_bytes
    }
}

/// Replays `trace` under `config.policy`.
pub fn run(trace: &Trace, config: &SimConfig, deps: SimDeps<'_>) -> Result<SimReport, SimError> {
    config.validate()?;
    if config.policy_needs_predictor() && deps.predictor.is_none() {
        return Err(MetricError::MissingPredictor.into());
    }
    if !trace.has_rate() {
        return Err(SimError::NoGroundTruth);
    }
    let resampled;
    let trace = if trace.tick_s() == Some(config.tick_s) {
        trace
    } else {
        resampled = resample(trace, config.tick_s)?;
        &resampled
    };

    let metric_deps = MetricDeps {
        predictor: deps.predictor,
        geomap: deps.geomap,
        bounds: config.bounds.as_ref(),
    };
    let mut rng = rng::substream(config.seed, rng::CAT_DECISIONS);
    let mut state = BufferState::default();
    let mut transmissions = Vec::new();
    for snap in &trace.snapshots()[1..] {
        let (next, trigger) = cat::step(
            &config.policy,
            &state,
            snap,
            config.tick_s,
            config.sensor_rate_bps,
            &mut rng,
            &metric_deps,
        )?;
        state = next;
        if let Some(t) = trigger {
            transmissions.push(cat::execute_transmission(t.payload_bytes, snap, t.elapsed_s, t.phi)?);
        }
    }
    Ok(SimReport::from_run(trace, config, transmissions, state))
}

impl SimConfig {
    fn policy_needs_predictor(&self) -> bool {
        matches!(&self.policy, TransmissionPolicy::Cat { metric, .. } if metric.needs_predictor())
    }
}

/// Runs several configurations in parallel; results keep the input order.
pub fn run_grid(trace: &Trace, configs: &[SimConfig], deps: SimDeps<'_>) -> Vec<Result<SimReport, SimError>> {
    configs.par_iter().map(|c| run(trace, c, deps)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    /// `100 · (candidate / baseline − 1)` on mean per-transmission rate.
    pub rate_gain_pct: f64,
    pub tx_count_ratio: f64,
    pub age_ratio: f64,
    pub baseline_mean_rate_mbps: f64,
    pub candidate_mean_rate_mbps: f64,
    pub baseline_mean_gap_s: f64,
    pub candidate_mean_gap_s: f64,
}

impl GainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("gain report serializes")
    }
}

/// Candidate relative to baseline. Negative gains are reported as they are.
pub fn compare(baseline: &SimReport, candidate: &SimReport) -> Result<GainReport, SimError> {
    let stats = |r: &SimReport, side| match (r.mean_tx_rate_mbps, r.mean_buffer_age_s, r.mean_gap_s) {
        (Some(rate), Some(age), Some(gap)) if r.tx_count > 0 => Ok((rate, age, gap)),
        _ => Err(SimError::EmptyReport(side)),
    };
    let (b_rate, b_age, b_gap) = stats(baseline, "baseline")?;
    let (c_rate, c_age, c_gap) = stats(candidate, "candidate")?;
    Ok(GainReport {
        rate_gain_pct: 100.0 * (c_rate / b_rate - 1.0),
        tx_count_ratio: candidate.tx_count as f64 / baseline.tx_count as f64,
        age_ratio: c_age / b_age,
        baseline_mean_rate_mbps: b_rate,
        candidate_mean_rate_mbps: c_rate,
        baseline_mean_gap_s: b_gap,
        candidate_mean_gap_s: c_gap,
    })
}

/// A channel-aware run, its periodic baseline and their comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub candidate: SimReport,
    pub baseline: SimReport,
    pub gain: GainReport,
}

/// Runs `config`, then the periodic baseline whose interval equals the
/// candidate's realized mean gap, on the same trace and seed.
pub fn run_paired(trace: &Trace, config: &SimConfig, deps: SimDeps<'_>) -> Result<PairedRun, SimError> {
    let candidate = run(trace, config, deps)?;
    let interval_s = candidate.mean_gap_s.ok_or(SimError::EmptyReport("candidate"))?;
    let base_cfg = SimConfig {
        policy: TransmissionPolicy::Periodic { interval_s },
        ..config.clone()
    };
    let baseline = run(trace, &base_cfg, deps)?;
    let gain = compare(&baseline, &candidate)?;
    Ok(PairedRun {
        candidate,
        baseline,
        gain,
    })
}
