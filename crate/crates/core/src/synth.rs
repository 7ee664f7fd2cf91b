//! Synthetic drives with engineered connectivity hotspots.
//!
//! The channel model is deliberately small: log-distance path loss to each
//! cell site, one Gaussian shadowing draw per tick, SNR against a fixed noise
//! floor, and a quadratic CQI to data-rate curve. Cells produce high-rate
//! hotspots around them and troughs in between.
//!
//! Scenario files are TOML:
//!
//! ```toml
//! seed = 42
//! tick_s = 1.0
//! shadowing_sigma_db = 4.0      # default 4
//! noise_floor_dbm = -100.0      # default -100
//! rate_max_mbps = 50.0          # default 50
//! speeds_mps = [30.0]           # one per leg, or a single value for all legs
//!
//! [[cells]]
//! lat = 51.5014
//! lon = 7.4
//! tx_power_dbm = 15.0           # default 15
//! path_loss_exponent = 3.0      # default 3
//! ref_loss_db = 30.0            # default 30
//!
//! [[waypoints]]
//! lat = 51.5
//! lon = 7.38
//! ```
//!
//! Shadowing is drawn from the `synth.shadowing` ChaCha8 substream of `seed`
//! (see [`crate::rng`]), so a scenario always produces the same trace.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo;
use crate::rng;
use crate::trace::{
    ChannelIndicators, ContextSnapshot, GeoPosition, MobilitySample, Trace, TraceError, CQI_MAX, RSRP_RANGE_DBM,
    RSRQ_RANGE_DB, SNR_RANGE_DB,
};

pub const DEFAULT_TX_POWER_DBM: f64 = 15.0;
pub const DEFAULT_PATH_LOSS_EXPONENT: f64 = 3.0;
pub const DEFAULT_REF_LOSS_DB: f64 = 30.0;
pub const DEFAULT_NOISE_FLOOR_DBM: f64 = -100.0;
pub const DEFAULT_RATE_MAX_MBPS: f64 = 50.0;
pub const DEFAULT_SHADOWING_SIGMA_DB: f64 = 4.0;
pub const RATE_FLOOR_MBPS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("route has zero total length")]
    DegenerateRoute,
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSite {
    #[serde(flatten)]
    pub position: GeoPosition,
    #[serde(default = "default_tx_power")]
    pub tx_power_dbm: f64,
    #[serde(default = "default_n")]
    pub path_loss_exponent: f64,
    #[serde(default = "default_ref_loss")]
    pub ref_loss_db: f64,
}

fn default_tx_power() -> f64 {
    DEFAULT_TX_POWER_DBM
}
fn default_n() -> f64 {
    DEFAULT_PATH_LOSS_EXPONENT
}
fn default_ref_loss() -> f64 {
    DEFAULT_REF_LOSS_DB
}
fn default_noise_floor() -> f64 {
    DEFAULT_NOISE_FLOOR_DBM
}
fn default_rate_max() -> f64 {
    DEFAULT_RATE_MAX_MBPS
}
fn default_sigma() -> f64 {
    DEFAULT_SHADOWING_SIGMA_DB
}

impl CellSite {
    pub fn new(position: GeoPosition) -> Self {
        Self {
            position,
            tx_power_dbm: DEFAULT_TX_POWER_DBM,
            path_loss_exponent: DEFAULT_PATH_LOSS_EXPONENT,
            ref_loss_db: DEFAULT_REF_LOSS_DB,
        }
    }

    /// Received reference-signal power before clamping, distance clamped to ≥ 1 m.
    fn received_dbm(&self, pos: GeoPosition) -> f64 {
        let d = geo::distance_m(pos, self.position).max(1.0);
        self.tx_power_dbm - (self.ref_loss_db + 10.0 * self.path_loss_exponent * d.log10())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub cells: Vec<CellSite>,
    pub waypoints: Vec<GeoPosition>,
    /// Speed per leg in m/s; a single entry applies to every leg.
    pub speeds_mps: Vec<f64>,
    pub tick_s: f64,
    #[serde(default = "default_sigma")]
    pub shadowing_sigma_db: f64,
    #[serde(default = "default_noise_floor")]
    pub noise_floor_dbm: f64,
    #[serde(default = "default_rate_max")]
    pub rate_max_mbps: f64,
    pub seed: u64,
}

/// SNR, CQI and achievable rate derived from a received power.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkQuality {
    pub snr: f64,
    pub cqi: u8,
    pub rate_mbps: f64,
}

/// Log-distance path loss plus shadowing, clamped to the RSRP reporting range.
pub fn rsrp_at(pos: GeoPosition, cell: &CellSite, shadowing_db: f64) -> f64 {
    (cell.received_dbm(pos) + shadowing_db).clamp(RSRP_RANGE_DBM.0, RSRP_RANGE_DBM.1)
}

pub fn derive_link(rsrp_dbm: f64, noise_floor_dbm: f64, rate_max_mbps: f64) -> LinkQuality {
    let (lo, hi) = SNR_RANGE_DB;
    let snr = (rsrp_dbm - noise_floor_dbm).clamp(lo, hi);
    let cqi = (15.0 * (snr - lo) / (hi - lo)).round().clamp(0.0, f64::from(CQI_MAX)) as u8;
    let rate_mbps = (rate_max_mbps * (f64::from(cqi) / 15.0).powi(2)).max(RATE_FLOOR_MBPS);
    LinkQuality { snr, cqi, rate_mbps }
}

/// RSRQ synthesized as the affine map of the SNR range onto the RSRQ range.
pub fn rsrq_from_snr(snr: f64) -> f64 {
    let (slo, shi) = SNR_RANGE_DB;
    let (qlo, qhi) = RSRQ_RANGE_DB;
    (qlo + (snr - slo) * (qhi - qlo) / (shi - slo)).clamp(qlo, qhi)
}

struct Leg {
    from: GeoPosition,
    to: GeoPosition,
    start_s: f64,
    duration_s: f64,
    speed: f64,
    heading: f64,
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Self, SynthError> {
        let sc: Scenario = toml::from_str(s).map_err(|e| SynthError::Invalid(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.cells.is_empty() {
            return bad("at least one cell is required".into());
        }
        if self.waypoints.len() < 2 {
            return bad("at least two waypoints are required".into());
        }
        if !(self.tick_s.is_finite() && self.tick_s > 0.0) {
            return bad(format!("tick_s must be positive, got {}", self.tick_s));
        }
        if !(self.shadowing_sigma_db.is_finite() && self.shadowing_sigma_db >= 0.0) {
            return bad(format!(
                "shadowing_sigma_db must be >= 0, got {}",
                self.shadowing_sigma_db
            ));
        }
        if !self.noise_floor_dbm.is_finite() {
            return bad("noise_floor_dbm must be finite".into());
        }
        if !(self.rate_max_mbps.is_finite() && self.rate_max_mbps > 0.0) {
            return bad(format!("rate_max_mbps must be positive, got {}", self.rate_max_mbps));
        }
        let legs = self.waypoints.len() - 1;
        if self.speeds_mps.len() != 1 && self.speeds_mps.len() != legs {
            return bad(format!(
                "speeds_mps needs 1 or {legs} entries, got {}",
                self.speeds_mps.len()
            ));
        }
        if let Some(v) = self.speeds_mps.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return bad(format!("leg speeds must be positive, got {v}"));
        }
        for (i, p) in self
            .waypoints
            .iter()
            .chain(self.cells.iter().map(|c| &c.position))
            .enumerate()
        {
            if !((-90.0..=90.0).contains(&p.lat) && (-180.0..=180.0).contains(&p.lon)) {
                return bad(format!("position {i} out of range: {p:?}"));
            }
        }
        for (i, c) in self.cells.iter().enumerate() {
            if !(0.0..=60.0).contains(&c.tx_power_dbm) {
                return bad(format!("cell {i}: tx_power_dbm must be in [0, 60]"));
            }
            if !(1.5..=6.0).contains(&c.path_loss_exponent) {
                return bad(format!("cell {i}: path_loss_exponent must be in [1.5, 6]"));
            }
            if !c.ref_loss_db.is_finite() {
                return bad(format!("cell {i}: ref_loss_db must be finite"));
            }
        }
        Ok(())
    }

    fn legs(&self) -> Vec<Leg> {
        let mut start_s = 0.0;
        let mut legs = Vec::new();
        for (i, w) in self.waypoints.windows(2).enumerate() {
            let len = geo::distance_m(w[0], w[1]);
            if len <= 0.0 {
                continue;
            }
            let speed = if self.speeds_mps.len() == 1 {
                self.speeds_mps[0]
            } else {
                self.speeds_mps[i]
            };
            let duration_s = len / speed;
            legs.push(Leg {
                from: w[0],
                to: w[1],
                start_s,
                duration_s,
                speed,
                heading: geo::bearing_deg(w[0], w[1]),
            });
            start_s += duration_s;
        }
        legs
    }

    /// Route length in meters.
    pub fn route_length_m(&self) -> f64 {
        self.waypoints.windows(2).map(|w| geo::distance_m(w[0], w[1])).sum()
    }

    /// Bundled highway drive: two cells 4 km apart next to a straight road,
    /// driven out, back and out again at 30 m/s with 1 s ticks.
    pub fn highway(seed: u64) -> Self {
        let cell = |lon| CellSite::new(GeoPosition::new(HIGHWAY_CELL_LAT, lon));
        let wp = |lon| GeoPosition::new(HIGHWAY_ROAD_LAT, lon);
        Self {
            cells: vec![cell(HIGHWAY_CELL_LONS[0]), cell(HIGHWAY_CELL_LONS[1])],
            waypoints: vec![
                wp(HIGHWAY_ENDS_LON[0]),
                wp(HIGHWAY_ENDS_LON[1]),
                wp(HIGHWAY_ENDS_LON[0]),
                wp(HIGHWAY_ENDS_LON[1]),
            ],
            speeds_mps: vec![30.0],
            tick_s: 1.0,
            shadowing_sigma_db: DEFAULT_SHADOWING_SIGMA_DB,
            noise_floor_dbm: DEFAULT_NOISE_FLOOR_DBM,
            rate_max_mbps: DEFAULT_RATE_MAX_MBPS,
            seed,
        }
    }
}

// Road along 51.5°N; cells ~150 m north of it at 7.4°E and 4 km further east.
const HIGHWAY_ROAD_LAT: f64 = 51.5;
const HIGHWAY_CELL_LAT: f64 = 51.50135;
const HIGHWAY_CELL_LONS: [f64; 2] = [7.4, 7.457786];
const HIGHWAY_ENDS_LON: [f64; 2] = [7.385553, 7.472233];

/// Drives the route and emits one snapshot per tick.
pub fn generate_trace(scenario: &Scenario) -> Result<Trace, SynthError> {
    scenario.validate()?;
    let legs = scenario.legs();
    let Some(last_leg) = legs.last() else {
        return Err(SynthError::DegenerateRoute);
    };
    let total_s = last_leg.start_s + last_leg.duration_s;
    let n_ticks = (total_s / scenario.tick_s + 1e-9).floor() as usize;

    let mut rng = rng::substream(scenario.seed, rng::SYNTH_SHADOWING);
    let shadowing = Normal::new(0.0, scenario.shadowing_sigma_db).map_err(|e| SynthError::Invalid(e.to_string()))?;

    let mut snapshots = Vec::with_capacity(n_ticks + 1);
    let mut leg_idx = 0;
    for k in 0..=n_ticks {
        let t = k as f64 * scenario.tick_s;
        while leg_idx + 1 < legs.len() && t >= legs[leg_idx + 1].start_s {
            leg_idx += 1;
        }
        let leg = &legs[leg_idx];
        let f = ((t - leg.start_s) / leg.duration_s).clamp(0.0, 1.0);
        let position = GeoPosition {
            lat: leg.from.lat + f * (leg.to.lat - leg.from.lat),
            lon: leg.from.lon + f * (leg.to.lon - leg.from.lon),
        };

        let shadow_db = shadowing.sample(&mut rng);
        let (serving, _) = scenario
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.received_dbm(position)))
            .fold(
                (0, f64::NEG_INFINITY),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        let rsrp = rsrp_at(position, &scenario.cells[serving], shadow_db);
        let link = derive_link(rsrp, scenario.noise_floor_dbm, scenario.rate_max_mbps);

        snapshots.push(ContextSnapshot {
            t,
            channel: ChannelIndicators {
                rsrp,
                rsrq: rsrq_from_snr(link.snr),
                snr: link.snr,
                cqi: link.cqi,
            },
            mobility: MobilitySample {
                position,
                speed: leg.speed,
                heading: leg.heading,
            },
            cell_id: format!("c{serving}"),
            rate_mbps: Some(link.rate_mbps),
        });
    }
    Ok(Trace::new(snapshots)?)
}

/// Draws a uniformly random scenario; used by property tests and stress runs.
pub fn random_scenario<R: Rng>(rng: &mut R, seed: u64) -> Scenario {
    let lat0 = rng.random_range(-60.0..60.0);
    let lon0 = rng.random_range(-170.0..170.0);
    let jitter = |rng: &mut R, scale: f64| {
        GeoPosition::new(
            lat0 + rng.random_range(-scale..scale),
            lon0 + rng.random_range(-scale..scale),
        )
    };
    let n_cells = rng.random_range(1..=4);
    let n_wp = rng.random_range(2..=5);
    Scenario {
        cells: (0..n_cells)
            .map(|_| CellSite {
                position: jitter(rng, 0.03),
                tx_power_dbm: rng.random_range(5.0..30.0),
                path_loss_exponent: rng.random_range(2.0..4.0),
                ref_loss_db: DEFAULT_REF_LOSS_DB,
            })
            .collect(),
        waypoints: (0..n_wp).map(|_| jitter(rng, 0.03)).collect(),
        speeds_mps: (0..n_wp - 1).map(|_| rng.random_range(5.0..40.0)).collect(),
        tick_s: [0.5, 1.0, 2.0][rng.random_range(0..3)],
        shadowing_sigma_db: rng.random_range(0.0..8.0),
        noise_floor_dbm: DEFAULT_NOISE_FLOOR_DBM,
        rate_max_mbps: DEFAULT_RATE_MAX_MBPS,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocalProjection;
    use crate::trace::{parse_trace, write_trace_to_vec, ColumnMap};

    fn site(tx: f64, n: f64) -> CellSite {
        CellSite {
            position: GeoPosition::new(0.0, 0.0),
            tx_power_dbm: tx,
            path_loss_exponent: n,
            ref_loss_db: 30.0,
        }
    }

    fn at_distance(d: f64) -> GeoPosition {
        // due north of the origin
        GeoPosition::new((d / geo::EARTH_RADIUS_M).to_degrees(), 0.0)
    }

    #[test]
    fn rsrp_clamps_and_arithmetic() {
        let c = site(40.0, 2.0);
        assert_eq!(rsrp_at(at_distance(1.0), &c, 0.0), -44.0);
        assert_eq!(rsrp_at(GeoPosition::new(0.0, 0.0), &c, 0.0), -44.0);
        assert!((rsrp_at(at_distance(1000.0), &c, 0.0) - -50.0).abs() < 1e-6);
        assert!((rsrp_at(at_distance(1e7), &c, 0.0) - -130.0).abs() < 1e-6);
        assert_eq!(rsrp_at(at_distance(1e7), &c, -20.0), -140.0);
        assert!((rsrp_at(at_distance(1000.0), &c, -3.0) - -53.0).abs() < 1e-6);
    }

    #[test]
    fn link_extremes() {
        let top = derive_link(-70.0, -100.0, 50.0);
        assert_eq!((top.snr, top.cqi, top.rate_mbps), (30.0, 15, 50.0));
        let bottom = derive_link(-110.0, -100.0, 50.0);
        assert_eq!((bottom.snr, bottom.cqi, bottom.rate_mbps), (-10.0, 0, 0.1));
    }

    #[test]
    fn link_midrange_matches_exact_arithmetic() {
        let l = derive_link(-90.0, -100.0, 50.0);
        assert_eq!(l.snr, 10.0);
        // 15 * 20 / 40 = 7.5 rounds to 8; 50 * 64 / 225 as a rational
        assert_eq!(l.cqi, 8);
        assert!((l.rate_mbps - 50.0 * 64.0 / 225.0).abs() < 1e-12);
        assert!((l.rate_mbps - 14.22).abs() < 0.01);
    }

    #[test]
    fn rsrq_spans_its_range() {
        assert_eq!(rsrq_from_snr(-10.0), -19.5);
        assert_eq!(rsrq_from_snr(30.0), -3.0);
        assert!((rsrq_from_snr(10.0) - -11.25).abs() < 1e-12);
    }

    fn straight_route(len_m: f64, speed: f64, tick: f64, cells: Vec<CellSite>) -> Scenario {
        let proj = LocalProjection::new(GeoPosition::new(0.0, 0.0));
        Scenario {
            cells,
            waypoints: vec![proj.to_geo(0.0, 0.0), proj.to_geo(len_m, 0.0)],
            speeds_mps: vec![speed],
            tick_s: tick,
            shadowing_sigma_db: 0.0,
            noise_floor_dbm: -100.0,
            rate_max_mbps: 50.0,
            seed: 1,
        }
    }

    #[test]
    fn rsrp_decreases_away_from_single_cell() {
        let mut c = CellSite::new(GeoPosition::new(0.0, 0.0));
        c.tx_power_dbm = 15.0;
        let sc = straight_route(1000.0, 10.0, 1.0, vec![c]);
        let tr = generate_trace(&sc).unwrap();
        assert_eq!(tr.len(), 101);
        // first samples sit at the -44 clamp; strictly decreasing once below it
        let rsrp: Vec<f64> = tr.snapshots().iter().map(|s| s.channel.rsrp).collect();
        let free = rsrp.iter().position(|&r| r < -44.0).unwrap();
        for w in rsrp[free..].windows(2) {
            assert!(w[1] < w[0], "{:?}", w);
        }
        let rates: Vec<f64> = tr.snapshots().iter().map(|s| s.rate_mbps.unwrap()).collect();
        for w in rates.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let sc = Scenario::highway(42);
        let a = write_trace_to_vec(&generate_trace(&sc).unwrap());
        let b = write_trace_to_vec(&generate_trace(&sc).unwrap());
        assert_eq!(a, b);
        let c = write_trace_to_vec(&generate_trace(&Scenario::highway(43)).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn generated_traces_parse_strictly() {
        let tr = generate_trace(&Scenario::highway(7)).unwrap();
        let back = parse_trace(write_trace_to_vec(&tr).as_slice(), &ColumnMap::canonical(), false).unwrap();
        assert_eq!(back, tr);
    }

    /// First tick served by the far cell, from the equal-received-power crossover.
    fn crossover_tick(len_m: f64, speed: f64, tick: f64, tx_a: f64, tx_b: f64, n: f64) -> usize {
        // tx_a - 10 n log10(x) = tx_b - 10 n log10(L - x)  =>  x / (L - x) = 10^((tx_a - tx_b) / (10 n))
        let ratio = 10f64.powf((tx_a - tx_b) / (10.0 * n));
        let x = len_m * ratio / (1.0 + ratio);
        let t_cross = x / speed;
        (t_cross / tick).floor() as usize + 1
    }

    fn switch_ticks(tr: &Trace) -> Vec<usize> {
        tr.snapshots()
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0].cell_id != w[1].cell_id)
            .map(|(i, _)| i + 1)
            .collect()
    }

    #[test]
    fn serving_cell_switches_once_at_the_midpoint() {
        let proj = LocalProjection::new(GeoPosition::new(0.0, 0.0));
        let cells = vec![
            CellSite::new(proj.to_geo(0.0, 0.0)),
            CellSite::new(proj.to_geo(2000.0, 0.0)),
        ];
        let sc = straight_route(2000.0, 20.0, 0.7, cells);
        let tr = generate_trace(&sc).unwrap();
        let expected = crossover_tick(2000.0, 20.0, 0.7, 15.0, 15.0, 3.0);
        assert_eq!(expected, 72);
        assert_eq!(switch_ticks(&tr), vec![expected]);
        assert_eq!(tr.snapshots()[0].cell_id, "c0");
        assert_eq!(tr.snapshots().last().unwrap().cell_id, "c1");
    }

    #[test]
    fn crossover_shifts_toward_weaker_cell() {
        let proj = LocalProjection::new(GeoPosition::new(10.0, 20.0));
        let mut a = CellSite::new(proj.to_geo(0.0, 0.0));
        a.tx_power_dbm = 25.0;
        let b = CellSite::new(proj.to_geo(3000.0, 0.0));
        let mut sc = straight_route(3000.0, 25.0, 1.3, vec![a, b]);
        sc.waypoints = vec![proj.to_geo(0.0, 0.0), proj.to_geo(3000.0, 0.0)];
        let tr = generate_trace(&sc).unwrap();
        let expected = crossover_tick(3000.0, 25.0, 1.3, 25.0, 15.0, 3.0);
        let got = switch_ticks(&tr);
        assert_eq!(got.len(), 1);
        // the projection and haversine disagree at the sub-meter level
        assert!(got[0].abs_diff(expected) <= 1, "got {got:?}, expected {expected}");
    }

    #[test]
    fn degenerate_route_is_rejected() {
        let p = GeoPosition::new(1.0, 1.0);
        let mut sc = straight_route(1.0, 1.0, 1.0, vec![CellSite::new(p)]);
        sc.waypoints = vec![p, p];
        assert!(matches!(generate_trace(&sc), Err(SynthError::DegenerateRoute)));
    }

    #[test]
    fn validation() {
        let mut sc = Scenario::highway(1);
        sc.cells.clear();
        assert!(sc.validate().is_err());
        let mut sc = Scenario::highway(1);
        sc.speeds_mps = vec![10.0, 10.0];
        assert!(sc.validate().is_err());
        let mut sc = Scenario::highway(1);
        sc.cells[0].path_loss_exponent = 7.0;
        assert!(sc.validate().is_err());
    }

    #[test]
    fn toml_round_trip_with_defaults() {
        let text = r#"
            seed = 3
            tick_s = 0.5
            speeds_mps = [20.0]
            [[cells]]
            lat = 0.0
            lon = 0.0
            [[waypoints]]
            lat = 0.0
            lon = 0.0
            [[waypoints]]
            lat = 0.01
            lon = 0.0
        "#;
        let sc = Scenario::from_toml_str(text).unwrap();
        assert_eq!(sc.cells[0].tx_power_dbm, DEFAULT_TX_POWER_DBM);
        assert_eq!(sc.cells[0].path_loss_exponent, 3.0);
        assert_eq!(sc.shadowing_sigma_db, 4.0);
        assert_eq!(Scenario::from_toml_str(&sc.to_toml_string()).unwrap(), sc);
    }
}
