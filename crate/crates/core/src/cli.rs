//! The `catsim` command line.
//!
//! Every subcommand is a pure function of its input files, flags and seed.
//! Exit status: 0 on success (and for `--help` / `--version`), 1 for usage or
//! validation errors, including malformed input files, and 2 when a file
//! cannot be read or written.
//!
//! Settings for `train`, `evaluate` and `simulate` come from a TOML run config
//! ([`RunConfig`]); flags override values from the file.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use crate::cat::{self, CatParams, TransmissionPolicy, DEFAULT_SENSOR_RATE_BPS};
use crate::geomap::{build_map, GridMap};
use crate::metrics::MetricBounds;
use crate::predictor::{
    cross_validate, train, training_set_from_log, training_set_synthetic_payload, FeatureSchema, RegressionTree,
    TrainingSet, TreeParams,
};
use crate::sim::{self, SimConfig, SimDeps, SimReport};
use crate::synth::{generate_trace, Scenario};
use crate::trace::{parse_trace, write_trace_to_vec, ColumnMap, Trace};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Input { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 2,
            CliError::Input { .. } | CliError::Invalid(_) => 1,
        }
    }
}

fn input_err(path: &Path, e: impl Display) -> CliError {
    CliError::Input {
        path: path.to_owned(),
        msg: e.to_string(),
    }
}

fn invalid(e: impl Display) -> CliError {
    CliError::Invalid(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "catsim",
    version,
    about = "Channel-aware transmission of buffered vehicular sensor data"
)]
struct Cli {
    /// Print machine-readable JSON on stdout instead of a summary line
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic trace from a scenario file
    Generate(GenerateArgs),
    /// Train a data-rate regression tree
    Train(TrainArgs),
    /// Cross-validate the regression tree and print r / MAE / RMSE as JSON
    Evaluate(EvaluateArgs),
    /// Aggregate traces into a grid connectivity map
    BuildMap(BuildMapArgs),
    /// Replay a trace under a transmission policy
    Simulate(SimulateArgs),
    /// Compare two simulation reports
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct TraceFormat {
    /// TOML column mapping for traces with non-canonical headers
    #[arg(long, value_name = "FILE")]
    columns: Option<PathBuf>,
    /// Clamp out-of-range indicator values instead of rejecting them
    #[arg(long)]
    lenient: bool,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Scenario TOML file
    #[arg(long, value_name = "FILE")]
    scenario: PathBuf,
    /// Output trace CSV
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Override the scenario's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainingInput {
    /// Trace CSV with rate_mbps ground truth
    #[arg(long, value_name = "FILE")]
    trace: PathBuf,
    /// Transmission log CSV; one training row per transmission. Without it,
    /// every trace row becomes a training row with a random payload size
    #[arg(long, value_name = "FILE")]
    tx_log: Option<PathBuf>,
    /// Run config TOML ([tree] and [training] sections, seed)
    #[arg(long, alias = "params", value_name = "FILE")]
    config: Option<PathBuf>,
    /// Map JSON from `build-map --map-json`; adds the map-rate feature
    #[arg(long, value_name = "FILE")]
    map: Option<PathBuf>,
    /// Seed for synthetic payload sizes (and fold assignment in `evaluate`)
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    format: TraceFormat,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    input: TrainingInput,
    /// Output model JSON
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    input: TrainingInput,
    /// Number of folds
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Also write the report JSON here
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BuildMapArgs {
    /// One or more trace CSVs
    #[arg(long, value_name = "FILE", num_args = 1.., required = true)]
    traces: Vec<PathBuf>,
    /// Grid cell edge length in meters
    #[arg(long, value_name = "METERS", default_value_t = 100.0)]
    cell: f64,
    /// Output CSV (one row per occupied cell)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Also write the map as JSON for `train --map` / `simulate --map`
    #[arg(long, value_name = "FILE")]
    map_json: Option<PathBuf>,
    #[command(flatten)]
    format: TraceFormat,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Trace CSV with rate_mbps ground truth
    #[arg(long, value_name = "FILE")]
    trace: PathBuf,
    /// Run config TOML with a [sim] section
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Output report JSON
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Also write the per-transmission log CSV
    #[arg(long, value_name = "FILE")]
    tx_log: Option<PathBuf>,
    /// Model JSON (overrides `model` in the config)
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Map JSON (overrides `map` in the config)
    #[arg(long, value_name = "FILE")]
    map: Option<PathBuf>,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Also run the periodic baseline at the realized mean gap and write its report here
    #[arg(long, value_name = "FILE")]
    paired_baseline: Option<PathBuf>,
    #[command(flatten)]
    format: TraceFormat,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Baseline report JSON
    #[arg(long, value_name = "FILE")]
    baseline: PathBuf,
    /// Candidate report JSON
    #[arg(long, value_name = "FILE")]
    candidate: PathBuf,
    /// Also write the gain report JSON here
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// Settings shared by `train`, `evaluate` and `simulate`.
///
/// ```toml
/// seed = 42
/// model = "model.json"   # relative to this file
/// map = "map.json"
///
/// [tree]
/// min_leaf = 8
///
/// [training]
/// payload_min_bytes = 100000
/// payload_max_bytes = 1200000
///
/// [sim]
/// tick_s = 1.0
/// sensor_rate_bps = 10000.0
/// policy = { kind = "periodic", interval_s = 30.0 }
/// ```
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: Option<PathBuf>,
    pub map: Option<PathBuf>,
    #[serde(default)]
    pub tree: TreeParams,
    pub training: Option<TrainingConfig>,
    pub sim: Option<SimSection>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub payload_min_bytes: u64,
    pub payload_max_bytes: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub tick_s: f64,
    #[serde(default = "default_sensor_rate")]
    pub sensor_rate_bps: f64,
    pub policy: TransmissionPolicy,
    pub bounds: Option<MetricBounds>,
}

fn default_sensor_rate() -> f64 {
    DEFAULT_SENSOR_RATE_BPS
}

impl RunConfig {
    /// Parses, resolves relative paths against the file's directory and
    /// validates cross-field constraints.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read_text(path)?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| input_err(path, e))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.model, &mut cfg.map].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        cfg.tree.validate().map_err(|e| input_err(path, e))?;
        if let Some(t) = cfg.training {
            if t.payload_min_bytes > t.payload_max_bytes {
                return Err(input_err(path, "training.payload_min_bytes exceeds payload_max_bytes"));
            }
        }
        if let Some(s) = &cfg.sim {
            cfg.sim_config(s, 0).validate().map_err(|e| input_err(path, e))?;
        }
        Ok(cfg)
    }

    fn sim_config(&self, s: &SimSection, seed: u64) -> SimConfig {
        SimConfig {
            tick_s: s.tick_s,
            sensor_rate_bps: s.sensor_rate_bps,
            seed,
            policy: s.policy.clone(),
            bounds: s.bounds.clone(),
        }
    }

    /// Payload range for synthetic training rows: the configured one, else
    /// what the buffer can hold between `t_min` and `t_max`.
    pub fn payload_range(&self) -> (u64, u64) {
        if let Some(t) = self.training {
            return (t.payload_min_bytes, t.payload_max_bytes);
        }
        let rate = self.sim.as_ref().map_or(DEFAULT_SENSOR_RATE_BPS, |s| s.sensor_rate_bps);
        let params = match self.sim.as_ref().map(|s| &s.policy) {
            Some(TransmissionPolicy::Cat { params, .. }) => *params,
            _ => CatParams::default(),
        };
        (
            (rate * params.t_min_s).round() as u64,
            (rate * params.t_max_s).round() as u64,
        )
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit status.
pub fn run_command<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                1
            } else {
                let _ = write!(stdout, "{text}");
                0
            };
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => generate(a, cli.json),
        Command::Train(a) => train_cmd(a, cli.json),
        Command::Evaluate(a) => evaluate(a),
        Command::BuildMap(a) => build_map_cmd(a, cli.json),
        Command::Simulate(a) => simulate(a, cli.json, stderr),
        Command::Compare(a) => compare(a, cli.json),
    };
    match result {
        Ok(summary) => {
            let _ = writeln!(stdout, "{summary}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String, CliError> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| input_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn load_trace(path: &Path, format: &TraceFormat) -> Result<Trace, CliError> {
    let columns = match &format.columns {
        Some(p) => ColumnMap::from_toml_str(&read_text(p)?).map_err(|e| input_err(p, e))?,
        None => ColumnMap::canonical(),
    };
    let bytes = read_bytes(path)?;
    parse_trace(bytes.as_slice(), &columns, format.lenient).map_err(|e| input_err(path, e))
}

fn load_map(path: &Path) -> Result<GridMap, CliError> {
    let map: GridMap = serde_json::from_str(&read_text(path)?).map_err(|e| input_err(path, e))?;
    if !(map.cell_size_m().is_finite() && map.cell_size_m() > 0.0) {
        return Err(input_err(path, "cell_size_m must be positive"));
    }
    Ok(map)
}

fn load_model(path: &Path) -> Result<RegressionTree, CliError> {
    RegressionTree::from_json(&read_text(path)?).map_err(|e| input_err(path, e))
}

fn load_report(path: &Path) -> Result<SimReport, CliError> {
    SimReport::from_json(&read_text(path)?).map_err(|e| input_err(path, e))
}

fn summary(json: bool, value: serde_json::Value, human: String) -> String {
    if json {
        serde_json::to_string_pretty(&value).expect("summary serializes")
    } else {
        human
    }
}

fn generate(a: &GenerateArgs, json: bool) -> Result<String, CliError> {
    let mut scenario = Scenario::from_toml_str(&read_text(&a.scenario)?).map_err(|e| input_err(&a.scenario, e))?;
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    let trace = generate_trace(&scenario).map_err(|e| input_err(&a.scenario, e))?;
    write_file(&a.out, &write_trace_to_vec(&trace))?;
    Ok(summary(
        json,
        json!({ "snapshots": trace.len(), "duration_s": trace.duration_s(), "seed": scenario.seed }),
        format!(
            "wrote {} snapshots ({} s, seed {}) to {}",
            trace.len(),
            trace.duration_s(),
            scenario.seed,
            a.out.display()
        ),
    ))
}

/// Training rows, tree parameters, feature schema and seed for a
/// `train` / `evaluate` invocation.
fn training_data(input: &TrainingInput) -> Result<(TrainingSet, TreeParams, FeatureSchema, u64), CliError> {
    let cfg = match &input.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = input.seed.or(cfg.seed).unwrap_or(0);
    let trace = load_trace(&input.trace, &input.format)?;
    let map_path = input.map.as_ref().or(cfg.map.as_ref());
    let map = map_path.map(|p| load_map(p)).transpose()?;
    let schema = match (&map, map_path) {
        (Some(m), Some(p)) => FeatureSchema::with_geomap(
            m.mean_rate()
                .ok_or_else(|| input_err(p, "map holds no rate observations"))?,
        ),
        _ => FeatureSchema::base(),
    };
    let data = match &input.tx_log {
        Some(p) => {
            let log = cat::read_tx_log(read_bytes(p)?.as_slice()).map_err(|e| input_err(p, e))?;
            training_set_from_log(&trace, &log, map.as_ref(), &schema).map_err(|e| input_err(p, e))?
        }
        None => training_set_synthetic_payload(&trace, cfg.payload_range(), seed, map.as_ref(), &schema)
            .map_err(|e| input_err(&input.trace, e))?,
    };
    Ok((data, cfg.tree, schema, seed))
}

fn train_cmd(a: &TrainArgs, json: bool) -> Result<String, CliError> {
    let (data, params, schema, _) = training_data(&a.input)?;
    let tree = train(&data, &params, &schema).map_err(invalid)?;
    write_file(&a.out, tree.to_json().as_bytes())?;
    Ok(summary(
        json,
        json!({ "rows": data.len(), "leaves": tree.leaf_count(), "depth": tree.depth() }),
        format!(
            "trained on {} rows: {} leaves, depth {}; wrote {}",
            data.len(),
            tree.leaf_count(),
            tree.depth(),
            a.out.display()
        ),
    ))
}

fn evaluate(a: &EvaluateArgs) -> Result<String, CliError> {
    let (data, params, _, seed) = training_data(&a.input)?;
    let report = cross_validate(&data, &params, a.k, seed).map_err(invalid)?;
    let text = serde_json::to_string_pretty(&report).expect("cv report serializes");
    if let Some(out) = &a.out {
        write_file(out, format!("{text}\n").as_bytes())?;
    }
    Ok(text)
}

fn build_map_cmd(a: &BuildMapArgs, json: bool) -> Result<String, CliError> {
    let traces = a
        .traces
        .iter()
        .map(|p| load_trace(p, &a.format))
        .collect::<Result<Vec<_>, _>>()?;
    let map = build_map(&traces, a.cell).map_err(invalid)?;
    let mut csv = Vec::new();
    map.write_csv(&mut csv).map_err(invalid)?;
    write_file(&a.out, &csv)?;
    if let Some(p) = &a.map_json {
        let text = serde_json::to_string_pretty(&map).expect("map serializes");
        write_file(p, format!("{text}\n").as_bytes())?;
    }
    Ok(summary(
        json,
        json!({ "cells": map.cells().len(), "samples": map.total_count(), "cell_size_m": a.cell }),
        format!(
            "{} cells from {} samples; wrote {}",
            map.cells().len(),
            map.total_count(),
            a.out.display()
        ),
    ))
}

fn simulate(a: &SimulateArgs, json: bool, stderr: &mut dyn Write) -> Result<String, CliError> {
    let cfg = RunConfig::load(&a.config)?;
    let section = cfg
        .sim
        .as_ref()
        .ok_or_else(|| input_err(&a.config, "missing [sim] section"))?;
    let sim_cfg = cfg.sim_config(section, a.seed.or(cfg.seed).unwrap_or(0));

    let model = a
        .model
        .as_ref()
        .or(cfg.model.as_ref())
        .map(|p| load_model(p))
        .transpose()?;
    let map = a.map.as_ref().or(cfg.map.as_ref()).map(|p| load_map(p)).transpose()?;
    if let (Some(m), None) = (&model, &map) {
        if m.schema.geomap_fallback_mbps.is_some() {
            let _ = writeln!(
                stderr,
                "warning: model uses the map-rate feature but no map was given; using its fallback"
            );
        }
    }
    let trace = load_trace(&a.trace, &a.format)?;
    let deps = SimDeps {
        predictor: model.as_ref(),
        geomap: map.as_ref(),
    };

    let (report, gain) = match &a.paired_baseline {
        Some(base_path) => {
            let paired = sim::run_paired(&trace, &sim_cfg, deps).map_err(invalid)?;
            write_file(base_path, format!("{}\n", paired.baseline.to_json()).as_bytes())?;
            (paired.candidate, Some(paired.gain))
        }
        None => (sim::run(&trace, &sim_cfg, deps).map_err(invalid)?, None),
    };
    write_file(&a.out, format!("{}\n", report.to_json()).as_bytes())?;
    if let Some(p) = &a.tx_log {
        let mut buf = Vec::new();
        report.write_tx_csv(&mut buf).map_err(invalid)?;
        write_file(p, &buf)?;
    }

    let rate = report
        .mean_tx_rate_mbps
        .map_or("n/a".to_string(), |r| format!("{r:.3} Mbit/s"));
    let mut human = format!("{} transmissions, mean rate {rate}", report.tx_count);
    if let Some(g) = &gain {
        human += &format!(
            "; paired baseline (every {:.3} s) {:.3} Mbit/s, gain {:.1}%",
            g.baseline_mean_gap_s, g.baseline_mean_rate_mbps, g.rate_gain_pct
        );
    }
    Ok(summary(
        json,
        json!({
            "tx_count": report.tx_count,
            "mean_tx_rate_mbps": report.mean_tx_rate_mbps,
            "mean_buffer_age_s": report.mean_buffer_age_s,
            "gain": gain,
        }),
        human,
    ))
}

fn compare(a: &CompareArgs, json: bool) -> Result<String, CliError> {
    let baseline = load_report(&a.baseline)?;
    let candidate = load_report(&a.candidate)?;
    let gain = sim::compare(&baseline, &candidate).map_err(invalid)?;
    let text = gain.to_json();
    if let Some(out) = &a.out {
        write_file(out, format!("{text}\n").as_bytes())?;
    }
    Ok(if json {
        text
    } else {
        format!(
            "rate gain {:.1}% ({:.3} -> {:.3} Mbit/s), tx count ratio {:.3}, age ratio {:.3}",
            gain.rate_gain_pct,
            gain.baseline_mean_rate_mbps,
            gain.candidate_mean_rate_mbps,
            gain.tx_count_ratio,
            gain.age_ratio
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn default_payload_range_follows_the_interval_bounds() {
        assert_eq!(RunConfig::default().payload_range(), (100_000, 1_200_000));
        let cfg: RunConfig = toml::from_str(
            r#"
            [sim]
            tick_s = 1.0
            sensor_rate_bps = 100.0
            policy = { kind = "cat", metric = { kind = "single", indicator = "snr" }, params = { t_min_s = 5.0, t_max_s = 50.0 } }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.payload_range(), (500, 5_000));
    }

    #[test]
    fn exit_codes() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run_command(["catsim", "--help"], &mut out, &mut err), 0);
        assert!(String::from_utf8_lossy(&out).contains("simulate"));
        assert_eq!(run_command(["catsim", "frobnicate"], &mut out, &mut err), 1);
        assert_eq!(run_command(["catsim", "generate", "--bogus"], &mut out, &mut err), 1);
        err.clear();
        let code = run_command(
            [
                "catsim",
                "generate",
                "--scenario",
                "/nonexistent/s.toml",
                "--out",
                "/tmp/x.csv",
            ],
            &mut out,
            &mut err,
        );
        assert_eq!(code, 2);
        assert!(String::from_utf8_lossy(&err).contains("/nonexistent/s.toml"));
    }
}
