//! The transmission metric Φ ∈ [0, 1].
//!
//! Indicators are mapped linearly onto [0, 1] between configurable bounds
//! (by default their reporting ranges). A metric is a single indicator, a
//! weighted mean of normalized indicators, or the predicted data rate for the
//! current buffer divided by a fixed `rate_max_mbps`.
//!
//! Config form (TOML):
//!
//! ```toml
//! [metric]
//! kind = "weighted"
//! weights = { snr = 1.0, cqi = 1.0 }
//! # kind = "single", indicator = "rsrp"
//! # kind = "predicted_rate", rate_max_mbps = 50.0
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geomap::GridMap;
use crate::predictor::{assemble_features, PredictorError, RegressionTree};
use crate::trace::ContextSnapshot;

pub use crate::trace::Indicator;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("predicted_rate metric needs a trained model")]
    MissingPredictor,
    #[error("invalid metric: {0}")]
    Invalid(String),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorBounds {
    pub lo: f64,
    pub hi: f64,
}

impl IndicatorBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self, MetricError> {
        if lo.is_finite() && hi.is_finite() && lo < hi {
            Ok(Self { lo, hi })
        } else {
            Err(MetricError::Invalid(format!("bounds need lo < hi, got [{lo}, {hi}]")))
        }
    }

    pub fn default_for(indicator: Indicator) -> Self {
        let (lo, hi) = indicator.valid_range();
        Self { lo, hi }
    }
}

/// Normalization bounds for all four indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricBounds {
    pub rsrp: IndicatorBounds,
    pub rsrq: IndicatorBounds,
    pub snr: IndicatorBounds,
    pub cqi: IndicatorBounds,
}

impl Default for MetricBounds {
    fn default() -> Self {
        Self {
            rsrp: IndicatorBounds::default_for(Indicator::Rsrp),
            rsrq: IndicatorBounds::default_for(Indicator::Rsrq),
            snr: IndicatorBounds::default_for(Indicator::Snr),
            cqi: IndicatorBounds::default_for(Indicator::Cqi),
        }
    }
}

impl MetricBounds {
    pub fn get(&self, indicator: Indicator) -> IndicatorBounds {
        match indicator {
            Indicator::Rsrp => self.rsrp,
            Indicator::Rsrq => self.rsrq,
            Indicator::Snr => self.snr,
            Indicator::Cqi => self.cqi,
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        for ind in Indicator::ALL {
            let b = self.get(ind);
            IndicatorBounds::new(b.lo, b.hi).map_err(|e| MetricError::Invalid(format!("{ind}: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricSpec {
    Single { indicator: Indicator },
    Weighted { weights: BTreeMap<Indicator, f64> },
    PredictedRate { rate_max_mbps: f64 },
}

impl MetricSpec {
    pub fn validate(&self) -> Result<(), MetricError> {
        match self {
            Self::Single { .. } => Ok(()),
            Self::Weighted { weights } => {
                if weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(MetricError::Invalid("weights must be finite and >= 0".into()));
                }
                if weights.values().sum::<f64>() <= 0.0 {
                    return Err(MetricError::Invalid("weights must not all be zero".into()));
                }
                Ok(())
            }
            Self::PredictedRate { rate_max_mbps } => {
                if rate_max_mbps.is_finite() && *rate_max_mbps > 0.0 {
                    Ok(())
                } else {
                    Err(MetricError::Invalid(format!(
                        "rate_max_mbps must be positive, got {rate_max_mbps}"
                    )))
                }
            }
        }
    }

    pub fn needs_predictor(&self) -> bool {
        matches!(self, Self::PredictedRate { .. })
    }
}

/// Φ, always within [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricValue(f64);

impl MetricValue {
    pub const ZERO: Self = Self(0.0);
    pub const ONE: Self = Self(1.0);

    /// Clamps into [0, 1]; NaN maps to 0.
    pub fn clamped(phi: f64) -> Self {
        if phi.is_nan() {
            Self(0.0)
        } else {
            Self(phi.clamp(0.0, 1.0))
        }
    }

    pub fn phi(self) -> f64 {
        self.0
    }
}

/// What a metric may need besides the snapshot.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricDeps<'a> {
    pub predictor: Option<&'a RegressionTree>,
    pub geomap: Option<&'a GridMap>,
    pub bounds: Option<&'a MetricBounds>,
}

pub fn normalize_indicator(value: f64, bounds: IndicatorBounds) -> f64 {
    ((value - bounds.lo) / (bounds.hi - bounds.lo)).clamp(0.0, 1.0)
}

pub fn evaluate_metric(
    spec: &MetricSpec,
    snapshot: &ContextSnapshot,
    buffer_bytes: u64,
    deps: &MetricDeps<'_>,
) -> Result<MetricValue, MetricError> {
    let default_bounds;
    let bounds = match deps.bounds {
        Some(b) => b,
        None => {
            default_bounds = MetricBounds::default();
            &default_bounds
        }
    };
    let norm = |ind: Indicator| normalize_indicator(ind.of(&snapshot.channel), bounds.get(ind));
    let phi = match spec {
        MetricSpec::Single { indicator } => norm(*indicator),
        MetricSpec::Weighted { weights } => {
            let total: f64 = weights.values().sum();
            if total <= 0.0 {
                return Err(MetricError::Invalid("weights must not all be zero".into()));
            }
            weights.iter().map(|(ind, w)| w * norm(*ind)).sum::<f64>() / total
        }
        MetricSpec::PredictedRate { rate_max_mbps } => {
            let tree = deps.predictor.ok_or(MetricError::MissingPredictor)?;
            let x = assemble_features(snapshot, buffer_bytes, deps.geomap, &tree.schema);
            tree.predict(x.as_slice())? / rate_max_mbps
        }
    };
    Ok(MetricValue::clamped(phi))
}
