//! Context traces: timestamped LTE link indicators plus mobility samples.
//!
//! Traces are ingested from CSV through a [`ColumnMap`], so any export with one
//! row per sample can be read as long as its columns can be named. The
//! canonical on-disk layout is
//!
//! ```text
//! t_s,lat_deg,lon_deg,speed_mps,heading_deg,rsrp_dbm,rsrq_db,snr_db,cqi,cell_id,rate_mbps
//! ```
//!
//! where `rate_mbps` (the measured or achievable data rate) is optional.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::wrap_degrees;

pub const RSRP_RANGE_DBM: (f64, f64) = (-140.0, -44.0);
pub const RSRQ_RANGE_DB: (f64, f64) = (-19.5, -3.0);
pub const SNR_RANGE_DB: (f64, f64) = (-10.0, 30.0);
pub const CQI_MAX: u8 = 15;

const CANONICAL_HEADER: [&str; 10] = [
    "t_s",
    "lat_deg",
    "lon_deg",
    "speed_mps",
    "heading_deg",
    "rsrp_dbm",
    "rsrq_db",
    "snr_db",
    "cqi",
    "cell_id",
];
const RATE_COLUMN: &str = "rate_mbps";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("missing column `{column}` (mapped for {field})")]
    MissingColumn { field: &'static str, column: String },
    #[error("row {row}: {field} value `{value}` is not a valid number")]
    NonNumeric {
        row: usize,
        field: &'static str,
        value: String,
    },
    #[error("row {row}: {field} value {value} outside [{lo}, {hi}]")]
    OutOfRange {
        row: usize,
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("row {row}: timestamp {t} is not after the previous one ({prev})")]
    NonIncreasing { row: usize, t: f64, prev: f64 },
    #[error("trace is empty")]
    Empty,
    #[error("tick must be positive and finite, got {0}")]
    NonPositiveTick(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPosition {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPosition {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

/// Serving-cell downlink indicators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelIndicators {
    pub rsrp: f64,
    pub rsrq: f64,
    pub snr: f64,
    pub cqi: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilitySample {
    pub position: GeoPosition,
    /// m/s
    pub speed: f64,
    /// Degrees clockwise from north, in [0, 360).
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    /// Seconds since trace start.
    pub t: f64,
    pub channel: ChannelIndicators,
    pub mobility: MobilitySample,
    pub cell_id: String,
    /// Achievable (or measured) data rate in Mbit/s.
    pub rate_mbps: Option<f64>,
}

/// One of the four LTE downlink quality indicators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Indicator {
    Rsrp,
    Rsrq,
    Snr,
    Cqi,
}

impl Indicator {
    pub const ALL: [Indicator; 4] = [Self::Rsrp, Self::Rsrq, Self::Snr, Self::Cqi];

    /// Reporting range accepted by the parser.
    pub fn valid_range(self) -> (f64, f64) {
        match self {
            Self::Rsrp => RSRP_RANGE_DBM,
            Self::Rsrq => RSRQ_RANGE_DB,
            Self::Snr => SNR_RANGE_DB,
            Self::Cqi => (0.0, f64::from(CQI_MAX)),
        }
    }

    pub fn of(self, c: &ChannelIndicators) -> f64 {
        match self {
            Self::Rsrp => c.rsrp,
            Self::Rsrq => c.rsrq,
            Self::Snr => c.snr,
            Self::Cqi => f64::from(c.cqi),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rsrp => "rsrp",
            Self::Rsrq => "rsrq",
            Self::Snr => "snr",
            Self::Cqi => "cqi",
        }
    }
}

impl std::fmt::Display for Indicator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered, non-empty sequence of snapshots with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    snapshots: Vec<ContextSnapshot>,
    tick_s: Option<f64>,
}

impl Trace {
    /// Builds a trace, checking ordering and per-snapshot validity.
    ///
    /// The nominal tick is inferred when the timestamps are exactly
    /// `k * t[1]` starting from zero, which is what [`resample`] produces.
    pub fn new(snapshots: Vec<ContextSnapshot>) -> Result<Self, TraceError> {
        if snapshots.is_empty() {
            return Err(TraceError::Empty);
        }
        for (i, s) in snapshots.iter().enumerate() {
            validate_snapshot(i + 1, s)?;
            if i > 0 && s.t <= snapshots[i - 1].t {
                return Err(TraceError::NonIncreasing {
                    row: i + 1,
                    t: s.t,
                    prev: snapshots[i - 1].t,
                });
            }
        }
        let tick_s = infer_tick(&snapshots);
        Ok(Self { snapshots, tick_s })
    }

    pub fn snapshots(&self) -> &[ContextSnapshot] {
        &self.snapshots
    }

    pub fn into_snapshots(self) -> Vec<ContextSnapshot> {
        self.snapshots
    }

    /// Nominal sampling period when the timestamps sit on a uniform grid from zero.
    pub fn tick_s(&self) -> Option<f64> {
        self.tick_s
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.snapshots.last().map_or(0.0, |s| s.t) - self.snapshots[0].t
    }

    pub fn has_rate(&self) -> bool {
        self.snapshots.iter().any(|s| s.rate_mbps.is_some())
    }
}

fn infer_tick(snapshots: &[ContextSnapshot]) -> Option<f64> {
    if snapshots.len() < 2 || snapshots[0].t != 0.0 {
        return None;
    }
    let tick = snapshots[1].t;
    snapshots
        .iter()
        .enumerate()
        .all(|(k, s)| s.t == k as f64 * tick)
        .then_some(tick)
}

fn check_range(row: usize, field: &'static str, v: f64, (lo, hi): (f64, f64)) -> Result<(), TraceError> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(TraceError::OutOfRange {
            row,
            field,
            value: v,
            lo,
            hi,
        })
    }
}

fn validate_snapshot(row: usize, s: &ContextSnapshot) -> Result<(), TraceError> {
    check_range(row, "t", s.t, (0.0, f64::MAX))?;
    check_range(row, "lat", s.mobility.position.lat, (-90.0, 90.0))?;
    check_range(row, "lon", s.mobility.position.lon, (-180.0, 180.0))?;
    check_range(row, "speed", s.mobility.speed, (0.0, f64::MAX))?;
    let h = s.mobility.heading;
    if !(h.is_finite() && (0.0..360.0).contains(&h)) {
        return Err(TraceError::OutOfRange {
            row,
            field: "heading",
            value: h,
            lo: 0.0,
            hi: 360.0,
        });
    }
    for ind in Indicator::ALL {
        check_range(row, ind.name(), ind.of(&s.channel), ind.valid_range())?;
    }
    if let Some(r) = s.rate_mbps {
        if !(r.is_finite() && r > 0.0) {
            return Err(TraceError::OutOfRange {
                row,
                field: "rate",
                value: r,
                lo: 0.0,
                hi: f64::MAX,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    #[default]
    S,
    Ms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedUnit {
    #[default]
    Mps,
    Kmh,
}

/// Maps canonical field names to the header names of a source CSV.
///
/// Written as TOML, every key is optional and defaults to the canonical name:
///
/// ```toml
/// t = "timestamp"
/// rsrp = "RSRP"
/// speed = "velocity"
/// speed_unit = "kmh"
/// datetime_format = "%Y-%m-%d %H:%M:%S%.f"
/// rate = "throughput"
/// ```
///
/// `cell_id` and `rate` are optional columns; when the named column is not in
/// the header the field is left empty. Timestamps are either numbers in
/// `time_unit` or, with `datetime_format` set, wall-clock strings parsed with
/// that chrono format. Wall-clock times and `normalize_time = true` shift the
/// first row to t = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub t: String,
    pub lat: String,
    pub lon: String,
    pub speed: String,
    pub heading: String,
    pub rsrp: String,
    pub rsrq: String,
    pub snr: String,
    pub cqi: String,
    pub cell_id: String,
    pub rate: String,
    pub time_unit: TimeUnit,
    pub speed_unit: SpeedUnit,
    pub datetime_format: Option<String>,
    pub normalize_time: bool,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            t: "t_s".into(),
            lat: "lat_deg".into(),
            lon: "lon_deg".into(),
            speed: "speed_mps".into(),
            heading: "heading_deg".into(),
            rsrp: "rsrp_dbm".into(),
            rsrq: "rsrq_db".into(),
            snr: "snr_db".into(),
            cqi: "cqi".into(),
            cell_id: "cell_id".into(),
            rate: RATE_COLUMN.into(),
            time_unit: TimeUnit::S,
            speed_unit: SpeedUnit::Mps,
            datetime_format: None,
            normalize_time: false,
        }
    }
}

impl ColumnMap {
    /// The identity mapping for canonical trace files.
    pub fn canonical() -> Self {
        Self::default()
    }

    pub fn from_toml_str(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }
}

struct ColumnIndex {
    t: usize,
    lat: usize,
    lon: usize,
    speed: usize,
    heading: usize,
    rsrp: usize,
    rsrq: usize,
    snr: usize,
    cqi: usize,
    cell_id: Option<usize>,
    rate: Option<usize>,
}

impl ColumnIndex {
    fn resolve(header: &csv::StringRecord, map: &ColumnMap) -> Result<Self, TraceError> {
        let find = |name: &str| header.iter().position(|h| h == name);
        let need = |field: &'static str, name: &str| {
            find(name).ok_or_else(|| TraceError::MissingColumn {
                field,
                column: name.to_string(),
            })
        };
        Ok(Self {
            t: need("t", &map.t)?,
            lat: need("lat", &map.lat)?,
            lon: need("lon", &map.lon)?,
            speed: need("speed", &map.speed)?,
            heading: need("heading", &map.heading)?,
            rsrp: need("rsrp", &map.rsrp)?,
            rsrq: need("rsrq", &map.rsrq)?,
            snr: need("snr", &map.snr)?,
            cqi: need("cqi", &map.cqi)?,
            cell_id: find(&map.cell_id),
            rate: find(&map.rate),
        })
    }
}

fn number(row: usize, field: &'static str, raw: &str) -> Result<f64, TraceError> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| TraceError::NonNumeric {
            row,
            field,
            value: raw.to_string(),
        })
}

/// Strict mode rejects out-of-range values, lenient mode clamps them.
fn bounded(row: usize, field: &'static str, v: f64, (lo, hi): (f64, f64), lenient: bool) -> Result<f64, TraceError> {
    if (lo..=hi).contains(&v) {
        Ok(v)
    } else if lenient {
        Ok(v.clamp(lo, hi))
    } else {
        Err(TraceError::OutOfRange {
            row,
            field,
            value: v,
            lo,
            hi,
        })
    }
}

/// Reads a trace from CSV.
///
/// `row` in errors is the 1-based data row (the header is not counted).
pub fn parse_trace<R: Read>(raw_csv: R, map: &ColumnMap, lenient: bool) -> Result<Trace, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::Headers)
        .from_reader(raw_csv);
    let cols = ColumnIndex::resolve(reader.headers()?, map)?;

    let mut snapshots: Vec<ContextSnapshot> = Vec::new();
    let mut t_origin: Option<f64> = None;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let field = |idx: usize| record.get(idx).unwrap_or("");

        let raw_t = field(cols.t);
        let mut t = match &map.datetime_format {
            Some(fmt) => {
                chrono::NaiveDateTime::parse_from_str(raw_t.trim(), fmt)
                    .map_err(|_| TraceError::NonNumeric {
                        row,
                        field: "t",
                        value: raw_t.to_string(),
                    })?
                    .and_utc()
                    .timestamp_micros() as f64
                    / 1e6
            }
            None => match map.time_unit {
                TimeUnit::S => number(row, "t", raw_t)?,
                TimeUnit::Ms => number(row, "t", raw_t)? / 1e3,
            },
        };
        if map.normalize_time || map.datetime_format.is_some() {
            let origin = *t_origin.get_or_insert(t);
            t -= origin;
        }
        if t < 0.0 {
            return Err(TraceError::OutOfRange {
                row,
                field: "t",
                value: t,
                lo: 0.0,
                hi: f64::MAX,
            });
        }
        if let Some(prev) = snapshots.last() {
            if t <= prev.t {
                return Err(TraceError::NonIncreasing { row, t, prev: prev.t });
            }
        }

        let lat = bounded(row, "lat", number(row, "lat", field(cols.lat))?, (-90.0, 90.0), lenient)?;
        let lon = bounded(
            row,
            "lon",
            number(row, "lon", field(cols.lon))?,
            (-180.0, 180.0),
            lenient,
        )?;
        let mut speed = number(row, "speed", field(cols.speed))?;
        if map.speed_unit == SpeedUnit::Kmh {
            speed /= 3.6;
        }
        let speed = bounded(row, "speed", speed, (0.0, f64::MAX), lenient)?;
        let heading = wrap_degrees(number(row, "heading", field(cols.heading))?);

        let rsrp = bounded(
            row,
            "rsrp",
            number(row, "rsrp", field(cols.rsrp))?,
            RSRP_RANGE_DBM,
            lenient,
        )?;
        let rsrq = bounded(
            row,
            "rsrq",
            number(row, "rsrq", field(cols.rsrq))?,
            RSRQ_RANGE_DB,
            lenient,
        )?;
        let snr = bounded(row, "snr", number(row, "snr", field(cols.snr))?, SNR_RANGE_DB, lenient)?;
        let cqi_raw = number(row, "cqi", field(cols.cqi))?;
        let cqi = if lenient {
            cqi_raw.round().clamp(0.0, f64::from(CQI_MAX))
        } else if cqi_raw.fract() != 0.0 {
            return Err(TraceError::NonNumeric {
                row,
                field: "cqi",
                value: field(cols.cqi).to_string(),
            });
        } else {
            bounded(row, "cqi", cqi_raw, Indicator::Cqi.valid_range(), false)?
        } as u8;

        let cell_id = cols.cell_id.map(|c| field(c).trim().to_string()).unwrap_or_default();
        let rate_mbps = match cols.rate.map(field).map(str::trim) {
            None | Some("") => None,
            Some(raw) => {
                let r = number(row, "rate", raw)?;
                if r > 0.0 {
                    Some(r)
                } else if lenient {
                    None
                } else {
                    return Err(TraceError::OutOfRange {
                        row,
                        field: "rate",
                        value: r,
                        lo: 0.0,
                        hi: f64::MAX,
                    });
                }
            }
        };

        snapshots.push(ContextSnapshot {
            t,
            channel: ChannelIndicators { rsrp, rsrq, snr, cqi },
            mobility: MobilitySample {
                position: GeoPosition { lat, lon },
                speed,
                heading,
            },
            cell_id,
            rate_mbps,
        });
    }
    Trace::new(snapshots)
}

/// Writes the canonical CSV form. The `rate_mbps` column is present only
/// when at least one snapshot carries a rate.
pub fn write_trace<W: Write>(trace: &Trace, out: W) -> Result<(), TraceError> {
    let with_rate = trace.has_rate();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header: Vec<&str> = CANONICAL_HEADER.to_vec();
    if with_rate {
        header.push(RATE_COLUMN);
    }
    w.write_record(&header)?;
    for s in trace.snapshots() {
        let mut rec = vec![
            s.t.to_string(),
            s.mobility.position.lat.to_string(),
            s.mobility.position.lon.to_string(),
            s.mobility.speed.to_string(),
            s.mobility.heading.to_string(),
            s.channel.rsrp.to_string(),
            s.channel.rsrq.to_string(),
            s.channel.snr.to_string(),
            s.channel.cqi.to_string(),
            s.cell_id.clone(),
        ];
        if with_rate {
            rec.push(s.rate_mbps.map(|r| r.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_to_vec(trace: &Trace) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("writing to memory cannot fail");
    buf
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a + (b - a) * w
}

/// Interpolates a heading along the shorter arc.
pub fn lerp_heading(a: f64, b: f64, w: f64) -> f64 {
    let diff = (b - a + 540.0).rem_euclid(360.0) - 180.0;
    wrap_degrees(a + diff * w)
}

fn interpolate(a: &ContextSnapshot, b: &ContextSnapshot, t: f64) -> ContextSnapshot {
    let w = (t - a.t) / (b.t - a.t);
    let nearest = if w <= 0.5 { a } else { b };
    let rate_mbps = match (a.rate_mbps, b.rate_mbps) {
        (Some(ra), Some(rb)) => Some(lerp(ra, rb, w)),
        _ => nearest.rate_mbps,
    };
    ContextSnapshot {
        t,
        channel: ChannelIndicators {
            rsrp: lerp(a.channel.rsrp, b.channel.rsrp, w),
            rsrq: lerp(a.channel.rsrq, b.channel.rsrq, w),
            snr: lerp(a.channel.snr, b.channel.snr, w),
            cqi: lerp(f64::from(a.channel.cqi), f64::from(b.channel.cqi), w).round() as u8,
        },
        mobility: MobilitySample {
            position: GeoPosition {
                lat: lerp(a.mobility.position.lat, b.mobility.position.lat, w),
                lon: lerp(a.mobility.position.lon, b.mobility.position.lon, w),
            },
            speed: lerp(a.mobility.speed, b.mobility.speed, w),
            heading: lerp_heading(a.mobility.heading, b.mobility.heading, w),
        },
        cell_id: nearest.cell_id.clone(),
        rate_mbps,
    }
}

/// Resamples onto the grid `k * tick_s`, `k = 0..=floor(t_last / tick_s)`.
///
/// Numeric fields are linearly interpolated, CQI is rounded afterwards,
/// heading follows the shorter arc and categorical fields (cell id, and a rate
/// missing on either side) come from the nearer sample, the earlier one on
/// ties. Grid points before the first sample hold the first sample's values.
pub fn resample(trace: &Trace, tick_s: f64) -> Result<Trace, TraceError> {
    if !(tick_s.is_finite() && tick_s > 0.0) {
        return Err(TraceError::NonPositiveTick(tick_s));
    }
    let src = trace.snapshots();
    let first = src.first().ok_or(TraceError::Empty)?;
    let last = &src[src.len() - 1];
    let n = (last.t / tick_s + 1e-9).floor() as usize;

    let mut out = Vec::with_capacity(n + 1);
    let mut j = 0;
    for k in 0..=n {
        let t = k as f64 * tick_s;
        let snap = if t <= first.t {
            ContextSnapshot { t, ..first.clone() }
        } else if t >= last.t {
            ContextSnapshot { t, ..last.clone() }
        } else {
            while src[j + 1].t < t {
                j += 1;
            }
            interpolate(&src[j], &src[j + 1], t)
        };
        out.push(snap);
    }
    Trace::new(out)
}
