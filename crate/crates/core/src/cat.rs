//! Buffering and the per-tick transmission decision.
//!
//! Sensor data accrues into a local buffer at a constant rate. Every tick the
//! policy decides whether to send the whole buffer. The periodic baseline
//! sends once `interval_s` has elapsed. The channel-aware policy draws
//! `u ~ U[0, 1)` and sends when `u < p`, with
//!
//! ```text
//! p = 0          if elapsed < t_min
//! p = Φ^α        if t_min <= elapsed < t_max
//! p = 1          if elapsed >= t_max
//! ```
//!
//! Transmissions complete within the tick that triggers them; their duration
//! shows up in the KPIs but does not hold back later ticks.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{evaluate_metric, MetricDeps, MetricError, MetricSpec, MetricValue};
use crate::trace::ContextSnapshot;

pub const DEFAULT_SENSOR_RATE_BPS: f64 = 10_000.0;

#[derive(Debug, Error)]
pub enum CatError {
    #[error("snapshot at t = {t} s has no rate_mbps; cannot execute a transmission")]
    MissingRate { t: f64 },
    #[error("invalid policy: {0}")]
    Invalid(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("transmission log row {row}: {msg}")]
    BadLog { row: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatParams {
    pub alpha: f64,
    pub t_min_s: f64,
    pub t_max_s: f64,
}

impl Default for CatParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            t_min_s: 10.0,
            t_max_s: 120.0,
        }
    }
}

impl CatParams {
    pub fn validate(&self) -> Result<(), CatError> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(CatError::Invalid(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.t_min_s.is_finite() && self.t_min_s >= 0.0) {
            return Err(CatError::Invalid(format!("t_min_s must be >= 0, got {}", self.t_min_s)));
        }
        if !(self.t_max_s.is_finite() && self.t_max_s > self.t_min_s) {
            return Err(CatError::Invalid(format!(
                "t_max_s ({}) must exceed t_min_s ({})",
                self.t_max_s, self.t_min_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransmissionPolicy {
    Periodic {
        interval_s: f64,
    },
    Cat {
        metric: MetricSpec,
        #[serde(default)]
        params: CatParams,
    },
}

impl TransmissionPolicy {
    pub fn validate(&self) -> Result<(), CatError> {
        match self {
            Self::Periodic { interval_s } => {
                if interval_s.is_finite() && *interval_s > 0.0 {
                    Ok(())
                } else {
                    Err(CatError::Invalid(format!(
                        "interval_s must be positive, got {interval_s}"
                    )))
                }
            }
            Self::Cat { metric, params } => {
                metric.validate()?;
                params.validate()
            }
        }
    }
}

/// Buffer contents and timing since the last transmission.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BufferState {
    pub bytes: u64,
    pub elapsed_since_last_tx_s: f64,
    /// Ticks since the last transmission; `elapsed` is derived from it so that
    /// it stays an exact multiple of the tick.
    pub ticks_since_last_tx: u64,
    /// Cumulative sensor bytes generated.
    pub generated_bytes: u64,
    /// Fractional byte carried to the next tick.
    pub carry_bytes: f64,
}

impl BufferState {
    /// With constant accrual the oldest buffered byte is as old as the
    /// interval since the last transmission.
    pub fn oldest_item_age_s(&self) -> f64 {
        if self.bytes == 0 {
            0.0
        } else {
            self.elapsed_since_last_tx_s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    Periodic,
    Probabilistic,
    Deadline,
}

/// A decision to send the whole buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trigger {
    pub kind: TriggerKind,
    pub payload_bytes: u64,
    pub elapsed_s: f64,
    pub phi: Option<MetricValue>,
    pub probability: f64,
}

pub fn tx_probability(phi: MetricValue, elapsed_s: f64, params: &CatParams) -> f64 {
    if elapsed_s < params.t_min_s {
        0.0
    } else if elapsed_s >= params.t_max_s {
        1.0
    } else {
        phi.phi().powf(params.alpha).clamp(0.0, 1.0)
    }
}

/// Advances one tick: accrue sensor data, then decide.
///
/// One uniform draw is taken from `rng` on every tick of a channel-aware
/// policy, whether or not it is needed, so the stream position depends only
/// on the tick count.
pub fn step<R: Rng + ?Sized>(
    policy: &TransmissionPolicy,
    state: &BufferState,
    snapshot: &ContextSnapshot,
    tick_s: f64,
    sensor_rate_bps: f64,
    rng: &mut R,
    deps: &MetricDeps<'_>,
) -> Result<(BufferState, Option<Trigger>), CatError> {
    let mut next = *state;
    let accrued = next.carry_bytes + sensor_rate_bps * tick_s;
    let whole = accrued.floor();
    next.carry_bytes = accrued - whole;
    next.bytes += whole as u64;
    next.generated_bytes += whole as u64;
    next.ticks_since_last_tx += 1;
    next.elapsed_since_last_tx_s = next.ticks_since_last_tx as f64 * tick_s;
    let elapsed = next.elapsed_since_last_tx_s;

    let trigger = match policy {
        TransmissionPolicy::Periodic { interval_s } => (elapsed >= *interval_s && next.bytes > 0).then_some(Trigger {
            kind: TriggerKind::Periodic,
            payload_bytes: next.bytes,
            elapsed_s: elapsed,
            phi: None,
            probability: 1.0,
        }),
        TransmissionPolicy::Cat { metric, params } => {
            let phi = evaluate_metric(metric, snapshot, next.bytes, deps)?;
            let p = tx_probability(phi, elapsed, params);
            let u: f64 = rng.random();
            (u < p && next.bytes > 0).then_some(Trigger {
                kind: if elapsed >= params.t_max_s {
                    TriggerKind::Deadline
                } else {
                    TriggerKind::Probabilistic
                },
                payload_bytes: next.bytes,
                elapsed_s: elapsed,
                phi: Some(phi),
                probability: p,
            })
        }
    };
    if trigger.is_some() {
        next.bytes = 0;
        next.ticks_since_last_tx = 0;
        next.elapsed_since_last_tx_s = 0.0;
    }
    Ok((next, trigger))
}

/// One executed transmission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionRecord {
    pub t_start_s: f64,
    pub payload_bytes: u64,
    pub rate_mbps: f64,
    /// `payload_bytes · 8 / (rate_mbps · 10^6)`
    pub duration_s: f64,
    /// Mean age of the delivered bytes: half the accrual interval plus the
    /// transmission duration.
    pub mean_buffer_age_s: f64,
    /// Φ at decision time; absent for the periodic policy.
    pub phi: Option<f64>,
    /// Time since the previous transmission (or trace start).
    pub elapsed_s: f64,
}

impl TransmissionRecord {
    /// Age of the oldest delivered byte at the end of the transmission.
    pub fn max_item_age_s(&self) -> f64 {
        self.elapsed_s + self.duration_s
    }
}

pub fn transmission_duration_s(payload_bytes: u64, rate_mbps: f64) -> f64 {
    payload_bytes as f64 * 8.0 / (rate_mbps * 1e6)
}

/// Sends `payload_bytes` at the snapshot's ground-truth rate.
pub fn execute_transmission(
    payload_bytes: u64,
    snapshot: &ContextSnapshot,
    elapsed_s: f64,
    phi: Option<MetricValue>,
) -> Result<TransmissionRecord, CatError> {
    let rate_mbps = snapshot.rate_mbps.ok_or(CatError::MissingRate { t: snapshot.t })?;
    let duration_s = transmission_duration_s(payload_bytes, rate_mbps);
    Ok(TransmissionRecord {
        t_start_s: snapshot.t,
        payload_bytes,
        rate_mbps,
        duration_s,
        mean_buffer_age_s: elapsed_s / 2.0 + duration_s,
        phi: phi.map(MetricValue::phi),
        elapsed_s,
    })
}

const LOG_HEADER: [&str; 6] = [
    "t_start_s",
    "payload_bytes",
    "rate_mbps",
    "duration_s",
    "mean_buffer_age_s",
    "phi",
];

/// Transmission log CSV; `phi` is empty for periodic transmissions.
pub fn write_tx_log<W: Write>(records: &[TransmissionRecord], out: W) -> Result<(), CatError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(LOG_HEADER)?;
    for r in records {
        w.write_record([
            r.t_start_s.to_string(),
            r.payload_bytes.to_string(),
            r.rate_mbps.to_string(),
            r.duration_s.to_string(),
            r.mean_buffer_age_s.to_string(),
            r.phi.map(|p| p.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a transmission log. `elapsed_s` is not stored in the file and is
/// recovered from the age formula.
pub fn read_tx_log<R: Read>(input: R) -> Result<Vec<TransmissionRecord>, CatError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = reader.headers()?.clone();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| CatError::BadLog {
            row: 0,
            msg: format!("missing column {name}"),
        })
    };
    let idx: Vec<usize> = LOG_HEADER.iter().map(|n| col(n)).collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let num = |k: usize| -> Result<f64, CatError> {
            let raw = rec.get(idx[k]).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CatError::BadLog {
                    row,
                    msg: format!("{} `{raw}` is not a number", LOG_HEADER[k]),
                })
        };
        let payload_raw = rec.get(idx[1]).unwrap_or("");
        let payload_bytes: u64 = payload_raw.parse().map_err(|_| CatError::BadLog {
            row,
            msg: format!("payload_bytes `{payload_raw}` is not an integer"),
        })?;
        let rate_mbps = num(2)?;
        if rate_mbps <= 0.0 {
            return Err(CatError::BadLog {
                row,
                msg: "rate_mbps must be positive".into(),
            });
        }
        let duration_s = num(3)?;
        let mean_buffer_age_s = num(4)?;
        let phi = match rec.get(idx[5]).unwrap_or("") {
            "" => None,
            _ => Some(num(5)?),
        };
        out.push(TransmissionRecord {
            t_start_s: num(0)?,
            payload_bytes,
            rate_mbps,
            duration_s,
            mean_buffer_age_s,
            phi,
            elapsed_s: (2.0 * (mean_buffer_age_s - duration_s)).max(0.0),
        });
    }
    Ok(out)
}
