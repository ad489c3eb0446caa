//! Scenario configuration and loading.
//!
//! A scenario is a JSON document with units in every key, pointing at the
//! network, building catalog, demand and ambient files. Relative paths are
//! resolved against the directory that holds the configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buildings::{self, Building, BuildingError, DemandProfile};
use crate::network::{NetworkError, NetworkGraph};

pub const SCENARIO_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("file `{path}`: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Building(#[from] BuildingError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Candidate total pressure drops offered to every subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub min_pa: f64,
    pub max_pa: f64,
    pub count: usize,
    /// Explicit values override the log-spaced grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values_pa: Option<Vec<f64>>,
}

impl Default for CandidateGrid {
    fn default() -> Self {
        Self { min_pa: 0.5, max_pa: 300.0, count: 24, values_pa: None }
    }
}

impl CandidateGrid {
    pub fn values(&self) -> Vec<f64> {
        if let Some(v) = &self.values_pa {
            return v.clone();
        }
        if self.count == 1 {
            return vec![self.min_pa];
        }
        let (a, b) = (self.min_pa.ln(), self.max_pa.ln());
        (0..self.count).map(|i| (a + (b - a) * i as f64 / (self.count - 1) as f64).exp()).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let v = self.values();
        if v.is_empty() {
            return Err(ScenarioError::Invalid("candidate grid is empty".into()));
        }
        if v.iter().any(|x| !(*x > 0.0)) || v.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ScenarioError::Invalid("candidates must be positive and strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocalSupplyTemperature {
    /// Every subsystem assumes the plant supply temperature at its root.
    #[default]
    Global,
    /// Subsystems use the simulated mixed temperature at their root.
    Measured,
}

/// Tuning of the per-subsystem optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    /// Backward-Euler substeps per control interval inside the optimizer.
    pub substeps_per_interval: usize,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    /// Valve coefficient range relative to the nominal coefficient.
    pub valve_range: f64,
    pub local_supply_temperature: LocalSupplyTemperature,
    /// Rounds of grid refinement around each selected head per step.
    pub refinement_rounds: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            substeps_per_interval: 6,
            max_outer_iterations: 30,
            max_inner_iterations: 200,
            valve_range: 100.0,
            local_supply_temperature: LocalSupplyTemperature::Global,
            refinement_rounds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub format: u32,
    pub network_path: PathBuf,
    pub buildings_path: PathBuf,
    pub demand_path: PathBuf,
    pub ambient_path: PathBuf,
    pub t0_c: f64,
    pub t_set_return_c: f64,
    pub n_subsystems: usize,
    #[serde(default)]
    pub candidates: CandidateGrid,
    pub horizon_s: f64,
    pub interval_s: f64,
    pub duration_s: f64,
    pub seed: u64,
    /// Pressure balance tolerance of the coordinator; `None` selects 2% of
    /// the median candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_pa: Option<f64>,
    /// Largest factor by which the tolerance may be widened when no
    /// selection balances.
    #[serde(default = "default_widening")]
    pub epsilon_max_widening: f64,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default = "default_thermal_tol")]
    pub thermal_tolerance_k: f64,
}

fn default_widening() -> f64 {
    64.0
}

fn default_thermal_tol() -> f64 {
    crate::thermal::DEFAULT_TOLERANCE_K
}

impl ScenarioConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<(Self, PathBuf), ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::File { path: path.to_path_buf(), source })?;
        let cfg: ScenarioConfig = serde_json::from_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn stages(&self) -> usize {
        (self.horizon_s / self.interval_s).round() as usize
    }

    pub fn steps(&self) -> usize {
        (self.duration_s / self.interval_s).round() as usize
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon_pa.unwrap_or_else(|| {
            let mut v = self.candidates.values();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
            0.02 * median
        })
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.into()));
        if self.format != SCENARIO_FORMAT {
            return bad("unsupported scenario format");
        }
        if !(self.interval_s > 0.0) || !(self.horizon_s >= self.interval_s) || !(self.duration_s >= self.interval_s) {
            return bad("interval, horizon and duration must be positive with horizon ≥ interval");
        }
        let ratio = self.horizon_s / self.interval_s;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad("horizon must be a multiple of the interval");
        }
        let ratio = self.duration_s / self.interval_s;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad("duration must be a multiple of the interval");
        }
        if !(self.t0_c > self.t_set_return_c) {
            return bad("supply temperature must exceed the return set temperature");
        }
        if self.n_subsystems == 0 {
            return bad("n_subsystems must be at least 1");
        }
        if !(self.epsilon() > 0.0) || !(self.epsilon_max_widening >= 1.0) {
            return bad("pressure tolerance must be positive");
        }
        self.candidates.validate()
    }
}

/// Ambient temperature sampled at a fixed interval.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbientSeries {
    pub step_s: f64,
    pub values: Vec<f64>,
}

impl AmbientSeries {
    pub fn at(&self, t: f64) -> f64 {
        let k = ((t / self.step_s) + 1e-9).floor().max(0.0) as usize;
        self.values[k.min(self.values.len() - 1)]
    }

    pub fn duration(&self) -> f64 {
        self.step_s * self.values.len() as f64
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AmbientRow {
    time_s: f64,
    ambient_c: f64,
}

pub fn read_ambient(path: impl AsRef<Path>) -> Result<AmbientSeries, ScenarioError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for r in rdr.deserialize() {
        let r: AmbientRow = r?;
        rows.push((r.time_s, r.ambient_c));
    }
    if rows.len() < 2 {
        return Err(ScenarioError::Invalid("ambient series needs at least two samples".into()));
    }
    let step = rows[1].0 - rows[0].0;
    if !(step > 0.0) {
        return Err(ScenarioError::Invalid("ambient samples must increase".into()));
    }
    Ok(AmbientSeries { step_s: step, values: rows.into_iter().map(|r| r.1).collect() })
}

pub fn write_ambient(path: impl AsRef<Path>, a: &AmbientSeries) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_path(path)?;
    for (k, v) in a.values.iter().enumerate() {
        w.serialize(AmbientRow { time_s: k as f64 * a.step_s, ambient_c: *v })?;
    }
    w.flush().map_err(|source| ScenarioError::File { path: PathBuf::from("ambient"), source })?;
    Ok(())
}

/// A fully loaded scenario. Buildings and demands are aligned with the
/// graph's user edges (in edge order).
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub graph: NetworkGraph,
    pub buildings: Vec<Building>,
    pub demand: Vec<DemandProfile>,
    pub ambient: AmbientSeries,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let (config, base) = ScenarioConfig::read(path)?;
        Self::from_config(config, &base)
    }

    pub fn from_config(config: ScenarioConfig, base: &Path) -> Result<Self, ScenarioError> {
        config.validate()?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let graph = NetworkGraph::read(resolve(&config.network_path))?;
        let catalog = buildings::read_catalog(resolve(&config.buildings_path))?;
        let mut demand_map = buildings::read_demand(resolve(&config.demand_path))?;
        let ambient = read_ambient(resolve(&config.ambient_path))?;
        let mut bs = Vec::new();
        let mut demand = Vec::new();
        let until = config.duration_s + config.horizon_s;
        for u in graph.user_edges() {
            let id = &graph.edge(u).name;
            let b = catalog
                .iter()
                .find(|b| &b.id == id)
                .ok_or_else(|| ScenarioError::Invalid(format!("no building for user edge `{id}`")))?;
            let d = demand_map.remove(id).ok_or_else(|| BuildingError::MissingDemand(id.clone()))?;
            if !d.covers(until) {
                return Err(ScenarioError::Invalid(format!("demand of `{id}` does not cover {until} s")));
            }
            bs.push(b.clone());
            demand.push(d);
        }
        if ambient.duration() + 1e-9 < until {
            return Err(ScenarioError::Invalid(format!("ambient series does not cover {until} s")));
        }
        Ok(Self { config, graph, buildings: bs, demand, ambient })
    }
}
