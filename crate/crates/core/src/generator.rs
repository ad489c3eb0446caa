//! Deterministic synthetic scenarios on a branched feed/return layout.
//!
//! The default template has a three-junction trunk and five branches with
//! 4, 4, 4, 3 and 3 users, each branch ending in a short bypass. Buildings
//! use the residential and commercial heat capacities and floor areas of a
//! mixed neighbourhood; demand follows daily residential or commercial
//! shapes scaled by the ambient temperature.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buildings::{self, Building, DemandProfile};
use crate::network::{
    EdgeKind, EdgeSpec, FluidProperties, NetworkSpecFile, NodeSpec, PipeAttributes, NETWORK_FORMAT,
};
use crate::scenario::{
    self, AmbientSeries, CandidateGrid, OptimizerSettings, ScenarioConfig, ScenarioError, SCENARIO_FORMAT,
};

pub const FRICTION: f64 = 0.01;
pub const HTC_W_M2K: f64 = 1.5;
pub const BYPASS_LENGTH_M: f64 = 3.0;
pub const AMBIENT_MIN_C: f64 = -19.5;
pub const AMBIENT_MAX_C: f64 = -13.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Trunk with junctions feeding several user branches.
    Branched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildingType {
    House,
    Apartment,
    Medical,
    Retail,
    Warehouse,
    Office,
}

impl BuildingType {
    pub fn is_residential(self) -> bool {
        matches!(self, BuildingType::House | BuildingType::Apartment)
    }

    /// Design heat demand per floor area at the coldest hour, W/m².
    fn specific_demand(self) -> f64 {
        match self {
            BuildingType::House => 40.0,
            BuildingType::Apartment => 45.0,
            BuildingType::Medical => 30.0,
            BuildingType::Retail => 22.0,
            BuildingType::Warehouse => 14.0,
            BuildingType::Office => 24.0,
        }
    }
}

/// Reference buildings: id, type, floor area (m²), heat capacity (MJ/K).
pub const REFERENCE_BUILDINGS: [(&str, BuildingType, f64, f64); 18] = [
    ("R-3561", BuildingType::House, 160.0, 78.0),
    ("R-80372", BuildingType::House, 760.0, 400.0),
    ("R-3801", BuildingType::House, 160.0, 900.0),
    ("R-80387", BuildingType::House, 250.0, 326.0),
    ("R-80368", BuildingType::House, 110.0, 526.0),
    ("R-4017", BuildingType::House, 760.0, 251.0),
    ("R-4090", BuildingType::House, 160.0, 464.0),
    ("R-4177", BuildingType::House, 250.0, 818.0),
    ("C-177428", BuildingType::Medical, 7000.0, 12562.0),
    ("C-1700", BuildingType::Retail, 3500.0, 9871.0),
    ("C-232839", BuildingType::Retail, 1600.0, 6059.0),
    ("C-343832", BuildingType::Retail, 3500.0, 8575.0),
    ("C-18740", BuildingType::Warehouse, 1600.0, 2393.0),
    ("C-123604", BuildingType::Office, 700.0, 1511.0),
    ("C-95364", BuildingType::Retail, 7000.0, 5088.0),
    ("R-20041", BuildingType::Apartment, 80.0, 513.0),
    ("R-28770", BuildingType::Apartment, 110.0, 265.0),
    ("R-22719", BuildingType::Apartment, 110.0, 657.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOptions {
    pub seed: u64,
    pub users: usize,
    pub layout: Layout,
    pub t0_c: f64,
    pub t_set_return_c: f64,
    pub duration_s: f64,
    pub interval_s: f64,
    pub horizon_s: f64,
    /// Valve pressure drop at peak flow with the nominal coefficient.
    pub valve_reference_pa: f64,
    /// Symmetric comfort band, K.
    pub comfort_band_k: f64,
    pub n_subsystems: Option<usize>,
    /// Diameter range of trunk pipes, m.
    pub trunk_diameter_m: (f64, f64),
    /// Diameter range of the first pipe of each branch, m.
    pub branch_diameter_m: (f64, f64),
    /// Diameter range of pipes between users of a branch, m.
    pub service_diameter_m: (f64, f64),
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            users: 18,
            layout: Layout::Branched,
            t0_c: 80.0,
            t_set_return_c: 50.0,
            duration_s: 86_400.0,
            interval_s: 600.0,
            horizon_s: 3600.0,
            valve_reference_pa: 3.0,
            comfort_band_k: 2.0,
            n_subsystems: None,
            trunk_diameter_m: (0.35, 0.40),
            branch_diameter_m: (0.20, 0.30),
            service_diameter_m: (0.15, 0.20),
        }
    }
}

/// Generated scenario content before it is written to disk.
#[derive(Debug, Clone)]
pub struct GeneratedScenario {
    pub network: NetworkSpecFile,
    pub buildings: Vec<Building>,
    pub building_types: Vec<BuildingType>,
    pub demand: Vec<(String, DemandProfile)>,
    pub ambient: AmbientSeries,
    pub config: ScenarioConfig,
}

fn branch_plan(users: usize) -> (Vec<usize>, Vec<usize>, usize) {
    // (branch sizes, junction of each branch, junction count)
    if users == 18 {
        return (vec![4, 4, 4, 3, 3], vec![0, 0, 1, 2, 2], 3);
    }
    let b = users.clamp(1, 5);
    let sizes: Vec<usize> = (0..b).map(|k| users / b + usize::from(k < users % b)).collect();
    let junction: Vec<usize> = (0..b).map(|k| k * 3 / b.max(3)).collect();
    let count = junction.iter().max().map_or(1, |m| m + 1);
    (sizes, junction, count)
}

fn ambient_at(t: f64, phase: f64) -> f64 {
    let mid = 0.5 * (AMBIENT_MIN_C + AMBIENT_MAX_C);
    let amp = 0.5 * (AMBIENT_MAX_C - AMBIENT_MIN_C);
    // Coldest around 03:00, warmest around 15:00.
    mid + amp * (2.0 * PI * t / 86_400.0 - 0.75 * PI + phase).sin()
}

fn daily_shape(kind: BuildingType, hour: f64) -> f64 {
    let bump = |c: f64, w: f64| (-((hour - c) / w).powi(2)).exp();
    let window = |a: f64, b: f64| {
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        s((hour - a) * 2.0) * s((b - hour) * 2.0)
    };
    match kind {
        BuildingType::House | BuildingType::Apartment => 0.55 + 0.35 * bump(7.0, 1.5) + 0.40 * bump(19.5, 2.5),
        BuildingType::Medical => 0.80 + 0.20 * window(6.0, 20.0),
        BuildingType::Retail | BuildingType::Office => 0.45 + 0.55 * window(7.5, 19.0),
        BuildingType::Warehouse => 0.50 + 0.40 * window(6.0, 17.0),
    }
}

pub fn generate(opts: &GeneratorOptions) -> GeneratedScenario {
    assert!(opts.users >= 1, "at least one user is required");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let fluid = FluidProperties::water();
    let (sizes, junction_of, junctions) = branch_plan(opts.users);

    // Buildings.
    let mut buildings = Vec::with_capacity(opts.users);
    let mut types = Vec::with_capacity(opts.users);
    let mut areas = Vec::with_capacity(opts.users);
    for i in 0..opts.users {
        let (id, kind, area, c_mj) = if opts.users == REFERENCE_BUILDINGS.len() {
            let r = REFERENCE_BUILDINGS[i];
            (r.0.to_string(), r.1, r.2, r.3)
        } else {
            let r = REFERENCE_BUILDINGS[i % REFERENCE_BUILDINGS.len()];
            let c = (rng.gen_range(78f64.ln()..12562f64.ln())).exp();
            (format!("{}-{}", r.0, i), r.1, r.2, c)
        };
        buildings.push(
            Building::new(id, c_mj * 1e6).with_deviations(-opts.comfort_band_k, opts.comfort_band_k),
        );
        types.push(kind);
        areas.push(area);
    }

    // Ambient and demand, covering the run plus one horizon. Valves are
    // sized on at least a full day so a short run is a prefix of a long one.
    let samples = ((opts.duration_s + opts.horizon_s) / opts.interval_s).ceil() as usize;
    let sized = samples.max(((86_400.0 + opts.horizon_s) / opts.interval_s).ceil() as usize);
    let phase = rng.gen_range(-0.05..0.05);
    let mut ambient = AmbientSeries {
        step_s: opts.interval_s,
        values: (0..sized).map(|k| ambient_at((k as f64 + 0.5) * opts.interval_s, phase)).collect(),
    };
    let indoor = 21.0;
    let design_gap = indoor - AMBIENT_MIN_C;
    let mut demand = Vec::with_capacity(opts.users);
    let mut peak_flow = Vec::with_capacity(opts.users);
    let dt_supply = opts.t0_c - opts.t_set_return_c;
    for i in 0..opts.users {
        let kind = types[i];
        let noise_amp = rng.gen_range(0.02..0.06);
        let noise_phase = rng.gen_range(0.0..2.0 * PI);
        let shift = rng.gen_range(-0.5..0.5);
        let design = areas[i] * kind.specific_demand();
        let mut values: Vec<f64> = (0..sized)
            .map(|k| {
                let t = (k as f64 + 0.5) * opts.interval_s;
                let hour = (t / 3600.0 + shift).rem_euclid(24.0);
                let weather = (indoor - ambient.values[k]) / design_gap;
                let noise = 1.0 + noise_amp * (2.0 * PI * t / 21_600.0 + noise_phase).sin();
                design * daily_shape(kind, hour) * weather * noise
            })
            .collect();
        let peak = values.iter().cloned().fold(0.0, f64::max);
        peak_flow.push(peak / (fluid.cp_j_kg_k * dt_supply));
        values.truncate(samples);
        demand.push((buildings[i].id.clone(), DemandProfile { step_s: opts.interval_s, values }));
    }

    ambient.values.truncate(samples);

    // Network.
    let mut nodes = vec![
        NodeSpec { id: "plant_s".into(), site: Some("plant".into()) },
        NodeSpec { id: "plant_r".into(), site: Some("plant".into()) },
    ];
    let mut edges = Vec::new();
    let pipe = |rng: &mut ChaCha8Rng, l: (f64, f64), d: (f64, f64)| {
        let length = (rng.gen_range(l.0..=l.1) * 10.0f64).round() / 10.0;
        let diameter = (rng.gen_range(d.0..=d.1) * 200.0f64).round() / 200.0;
        PipeAttributes::new(length, diameter, FRICTION, HTC_W_M2K)
    };
    let pair = |edges: &mut Vec<EdgeSpec>, name: &str, from: &str, to: &str, attr: PipeAttributes| {
        edges.push(EdgeSpec {
            id: format!("f_{name}"),
            tail: format!("{from}_s"),
            head: format!("{to}_s"),
            kind: EdgeKind::Feed,
            attributes: attr,
        });
        edges.push(EdgeSpec {
            id: format!("r_{name}"),
            tail: format!("{to}_r"),
            head: format!("{from}_r"),
            kind: EdgeKind::Return,
            attributes: attr,
        });
    };
    let site_nodes = |nodes: &mut Vec<NodeSpec>, site: &str| {
        nodes.push(NodeSpec { id: format!("{site}_s"), site: Some(site.into()) });
        nodes.push(NodeSpec { id: format!("{site}_r"), site: Some(site.into()) });
    };
    let mut prev = "plant".to_string();
    for j in 0..junctions {
        let site = format!("J{}", j + 1);
        site_nodes(&mut nodes, &site);
        let attr = pipe(&mut rng, (30.0, 60.0), opts.trunk_diameter_m);
        pair(&mut edges, &site, &prev, &site, attr);
        prev = site;
    }
    let mut user = 0;
    for (b, &size) in sizes.iter().enumerate() {
        let letter = (b'A' + b as u8) as char;
        let mut prev = format!("J{}", junction_of[b] + 1);
        for k in 0..size {
            let site = format!("{letter}{}", k + 1);
            site_nodes(&mut nodes, &site);
            let attr = if k == 0 {
                pipe(&mut rng, (70.0, 100.0), opts.branch_diameter_m)
            } else {
                pipe(&mut rng, (10.0, 40.0), opts.service_diameter_m)
            };
            pair(&mut edges, &site, &prev, &site, attr);
            let authority = rng.gen_range(1.0..3.0);
            let zeta = authority * opts.valve_reference_pa / peak_flow[user].powi(2);
            let mut valve = PipeAttributes::new(10.0, 0.15, FRICTION, HTC_W_M2K);
            valve.zeta = Some(zeta);
            edges.push(EdgeSpec {
                id: buildings[user].id.clone(),
                tail: format!("{site}_s"),
                head: format!("{site}_r"),
                kind: EdgeKind::User,
                attributes: valve,
            });
            user += 1;
            prev = site;
        }
        edges.push(EdgeSpec {
            id: format!("by_{letter}"),
            tail: format!("{prev}_s"),
            head: format!("{prev}_r"),
            kind: EdgeKind::Bypass,
            attributes: PipeAttributes::new(BYPASS_LENGTH_M, 0.15, FRICTION, HTC_W_M2K),
        });
    }

    let network = NetworkSpecFile {
        format: NETWORK_FORMAT,
        fluid,
        root: "plant_s".into(),
        terminal: "plant_r".into(),
        nodes,
        edges,
    };
    let config = ScenarioConfig {
        format: SCENARIO_FORMAT,
        network_path: "network.json".into(),
        buildings_path: "buildings.csv".into(),
        demand_path: "demand.csv".into(),
        ambient_path: "ambient.csv".into(),
        t0_c: opts.t0_c,
        t_set_return_c: opts.t_set_return_c,
        n_subsystems: opts.n_subsystems.unwrap_or(sizes.len()),
        candidates: CandidateGrid::default(),
        horizon_s: opts.horizon_s,
        interval_s: opts.interval_s,
        duration_s: opts.duration_s,
        seed: opts.seed,
        epsilon_pa: None,
        epsilon_max_widening: 64.0,
        optimizer: OptimizerSettings::default(),
        thermal_tolerance_k: crate::thermal::DEFAULT_TOLERANCE_K,
    };
    GeneratedScenario { network, buildings, building_types: types, demand, ambient, config }
}

impl GeneratedScenario {
    /// Write all scenario files into `dir` and return the config path.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf, ScenarioError> {
        std::fs::create_dir_all(dir).map_err(|source| ScenarioError::File { path: dir.into(), source })?;
        self.network.write(dir.join(&self.config.network_path))?;
        buildings::write_catalog(dir.join(&self.config.buildings_path), &self.buildings)?;
        buildings::write_demand(dir.join(&self.config.demand_path), &self.demand)?;
        scenario::write_ambient(dir.join(&self.config.ambient_path), &self.ambient)?;
        let path = dir.join("scenario.json");
        std::fs::write(&path, self.config.to_json() + "\n")
            .map_err(|source| ScenarioError::File { path: path.clone(), source })?;
        Ok(path)
    }
}
