//! Connectivity map: per-grid-cell means of observed indicators and rates.
//!
//! Positions are projected onto a local plane (equirectangular about the first
//! ingested sample) and binned into square cells of `cell_size_m`. A cell
//! index is `(floor(x / size), floor(y / size))`, so a point on an edge belongs
//! to the cell whose lower edge it is.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::LocalProjection;
use crate::trace::{ContextSnapshot, GeoPosition, Trace};

#[derive(Debug, Error)]
pub enum GeoMapError {
    #[error("cell size must be positive, got {0}")]
    BadCellSize(f64),
    #[error("no snapshots to aggregate")]
    NoData,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub count: u64,
    pub mean_rsrp: f64,
    pub mean_rsrq: f64,
    pub mean_snr: f64,
    pub mean_cqi: f64,
    /// Number of samples that carried a rate.
    pub rate_count: u64,
    pub mean_rate_mbps: Option<f64>,
}

impl CellAggregate {
    fn first(s: &ContextSnapshot) -> Self {
        Self {
            count: 1,
            mean_rsrp: s.channel.rsrp,
            mean_rsrq: s.channel.rsrq,
            mean_snr: s.channel.snr,
            mean_cqi: f64::from(s.channel.cqi),
            rate_count: u64::from(s.rate_mbps.is_some()),
            mean_rate_mbps: s.rate_mbps,
        }
    }

    fn push(&mut self, s: &ContextSnapshot) {
        self.count += 1;
        let n = self.count as f64;
        self.mean_rsrp += (s.channel.rsrp - self.mean_rsrp) / n;
        self.mean_rsrq += (s.channel.rsrq - self.mean_rsrq) / n;
        self.mean_snr += (s.channel.snr - self.mean_snr) / n;
        self.mean_cqi += (f64::from(s.channel.cqi) - self.mean_cqi) / n;
        if let Some(r) = s.rate_mbps {
            self.rate_count += 1;
            let m = self.mean_rate_mbps.unwrap_or(r);
            self.mean_rate_mbps = Some(m + (r - m) / self.rate_count as f64);
        }
    }
}

pub type CellIndex = (i64, i64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GridMapFile", from = "GridMapFile")]
pub struct GridMap {
    projection: LocalProjection,
    cell_size_m: f64,
    cells: BTreeMap<CellIndex, CellAggregate>,
}

impl GridMap {
    pub fn origin(&self) -> GeoPosition {
        self.projection.origin()
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn cells(&self) -> &BTreeMap<CellIndex, CellAggregate> {
        &self.cells
    }

    pub fn cell_index(&self, pos: GeoPosition) -> CellIndex {
        let (x, y) = self.projection.to_xy(pos);
        self.index_of_xy(x, y)
    }

    fn index_of_xy(&self, x: f64, y: f64) -> CellIndex {
        (
            (x / self.cell_size_m).floor() as i64,
            (y / self.cell_size_m).floor() as i64,
        )
    }

    pub fn cell_center(&self, (i, j): CellIndex) -> GeoPosition {
        self.projection
            .to_geo((i as f64 + 0.5) * self.cell_size_m, (j as f64 + 0.5) * self.cell_size_m)
    }

    pub fn lookup(&self, pos: GeoPosition) -> Option<&CellAggregate> {
        self.cells.get(&self.cell_index(pos))
    }

    /// Mean observed rate of the containing cell, when there is one.
    pub fn mean_rate_at(&self, pos: GeoPosition) -> Option<f64> {
        self.lookup(pos).and_then(|c| c.mean_rate_mbps)
    }

    /// Sample-weighted mean rate over all cells that observed one.
    pub fn mean_rate(&self) -> Option<f64> {
        let (n, sum) = self
            .cells
            .values()
            .filter_map(|c| c.mean_rate_mbps.map(|m| (c.rate_count, m * c.rate_count as f64)))
            .fold((0u64, 0.0), |(n, s), (k, v)| (n + k, s + v));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn total_count(&self) -> u64 {
        self.cells.values().map(|c| c.count).sum()
    }

    /// Plot-ready CSV export, one row per occupied cell.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), GeoMapError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record([
            "i",
            "j",
            "center_lat",
            "center_lon",
            "count",
            "mean_rsrp",
            "mean_rsrq",
            "mean_snr",
            "mean_cqi",
            "mean_rate_mbps",
        ])?;
        for (&(i, j), c) in &self.cells {
            let center = self.cell_center((i, j));
            w.write_record([
                i.to_string(),
                j.to_string(),
                center.lat.to_string(),
                center.lon.to_string(),
                c.count.to_string(),
                c.mean_rsrp.to_string(),
                c.mean_rsrq.to_string(),
                c.mean_snr.to_string(),
                c.mean_cqi.to_string(),
                c.mean_rate_mbps.map(|r| r.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn build_map(traces: &[Trace], cell_size_m: f64) -> Result<GridMap, GeoMapError> {
    if !(cell_size_m.is_finite() && cell_size_m > 0.0) {
        return Err(GeoMapError::BadCellSize(cell_size_m));
    }
    let mut samples = traces.iter().flat_map(|t| t.snapshots());
    let first = samples.next().ok_or(GeoMapError::NoData)?;
    let mut map = GridMap {
        projection: LocalProjection::new(first.mobility.position),
        cell_size_m,
        cells: BTreeMap::new(),
    };
    for s in std::iter::once(first).chain(samples) {
        let idx = map.cell_index(s.mobility.position);
        map.cells
            .entry(idx)
            .and_modify(|c| c.push(s))
            .or_insert_with(|| CellAggregate::first(s));
    }
    Ok(map)
}

#[derive(Serialize, Deserialize)]
struct GridMapFile {
    origin: GeoPosition,
    cell_size_m: f64,
    cells: Vec<CellEntry>,
}

#[derive(Serialize, Deserialize)]
struct CellEntry {
    i: i64,
    j: i64,
    #[serde(flatten)]
    aggregate: CellAggregate,
}

impl From<GridMap> for GridMapFile {
    fn from(m: GridMap) -> Self {
        Self {
            origin: m.projection.origin(),
            cell_size_m: m.cell_size_m,
            cells: m
                .cells
                .into_iter()
                .map(|((i, j), aggregate)| CellEntry { i, j, aggregate })
                .collect(),
        }
    }
}

impl From<GridMapFile> for GridMap {
    fn from(f: GridMapFile) -> Self {
        Self {
            projection: LocalProjection::new(f.origin),
            cell_size_m: f.cell_size_m,
            cells: f.cells.into_iter().map(|e| ((e.i, e.j), e.aggregate)).collect(),
        }
    }
}
