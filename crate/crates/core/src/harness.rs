//! Closed-loop simulation of the nominal and the optimized operation.
//!
//! The plant model ("truth") is the full network: hydraulics solved for the
//! commanded supply flow and valve settings, temperatures advanced with the
//! refined integrator, and each building's used flexibility updated from the
//! delivered heat.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buildings::{Building, BuildingError, ENVELOPE_TOLERANCE};
use crate::coordinator::{self, Candidate, CoordinatorError, SelectionProblem};
use crate::hydraulics::{FlowSolver, HydraulicState, HydraulicsError};
use crate::lowlevel::{self, CostTable, HorizonGrid, LocalProblem, LocalSolution, SubsystemModel};
use crate::network::{EdgeKind, NetworkGraph};
use crate::partition::{self, Partition, PartitionError, ReducedGraph};
use crate::scenario::{LocalSupplyTemperature, Scenario};
use crate::thermal::{BoundaryConditions, IntervalResult, ThermalError, ThermalNetwork};

const TRACK_ITERATIONS: usize = 60;
const SUPPLY_REL_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Hydraulics(#[from] HydraulicsError),
    #[error(transparent)]
    Thermal(#[from] ThermalError),
    #[error(transparent)]
    Building(#[from] BuildingError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error("no supply flow up to {0:.3} kg/s meets every demand")]
    SupplyLimit(f64),
    #[error("step at t = {time_s} s is infeasible: {reason}")]
    StepInfeasible { time_s: f64, reason: String },
}

/// Full-network plant model.
pub struct Plant {
    pub graph: NetworkGraph,
    pub solver: FlowSolver,
    pub thermal: ThermalNetwork,
    pub users: Vec<usize>,
    pub bypass: Vec<usize>,
    pub nominal_valves: Vec<f64>,
}

impl Plant {
    pub fn new(graph: &NetworkGraph) -> Self {
        let solver = FlowSolver::new(graph);
        let thermal = ThermalNetwork::new(graph);
        let users = thermal.users().to_vec();
        let bypass = graph.edges_of_kind(EdgeKind::Bypass);
        let nominal_valves = users.iter().map(|&e| graph.nominal_zeta()[e]).collect();
        Self { graph: graph.clone(), solver, thermal, users, bypass, nominal_valves }
    }

    pub fn zeta_with(&self, valves: &[f64]) -> Vec<f64> {
        let mut z = self.graph.nominal_zeta().to_vec();
        for (&e, &v) in self.users.iter().zip(valves) {
            z[e] = v;
        }
        z
    }
}

/// Evolving plant state.
#[derive(Debug, Clone)]
pub struct PlantState {
    pub temperatures: Vec<f64>,
    pub buildings: Vec<Building>,
    pub time_s: f64,
}

/// Result of one simulated interval.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub valves: Vec<f64>,
    pub supply: f64,
    pub hydraulics: HydraulicState,
    pub thermal: IntervalResult,
}

pub struct Simulator<'a> {
    pub scenario: &'a Scenario,
    pub plant: Plant,
}

impl<'a> Simulator<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        Self { scenario, plant: Plant::new(&scenario.graph) }
    }

    fn dt(&self) -> f64 {
        self.scenario.config.interval_s
    }

    pub fn bc(&self, t: f64) -> BoundaryConditions {
        let c = &self.scenario.config;
        BoundaryConditions { supply_c: c.t0_c, return_set_c: c.t_set_return_c, ambient_c: self.scenario.ambient.at(t) }
    }

    pub fn demand_j(&self, t: f64, dt: f64) -> Vec<f64> {
        self.scenario.demand.iter().map(|d| d.energy(t, dt)).collect()
    }

    /// One interval with fixed controls.
    pub fn simulate(&self, state: &PlantState, valves: &[f64], supply: f64) -> Result<StepResult, HarnessError> {
        let zeta = self.plant.zeta_with(valves);
        let hydraulics = self.plant.solver.given_supply(&zeta, supply)?;
        let thermal = self.plant.thermal.advance(
            &state.temperatures,
            &hydraulics.edge_flows,
            &self.bc(state.time_s),
            self.dt(),
            self.scenario.config.thermal_tolerance_k,
        )?;
        Ok(StepResult { valves: valves.to_vec(), supply, hydraulics, thermal })
    }

    /// Steady temperatures under nominal valves and a supply matching the
    /// first-interval demand.
    pub fn initial_state(&self) -> Result<PlantState, HarnessError> {
        let c = &self.scenario.config;
        let dt = self.dt();
        let demand = self.demand_j(0.0, dt);
        let cp = self.plant.graph.fluid().cp_j_kg_k;
        let need: f64 = demand.iter().sum::<f64>() / (dt * cp * (c.t0_c - c.t_set_return_c));
        let unit = self.plant.solver.solve_unit(&self.plant.zeta_with(&self.plant.nominal_valves))?;
        let user_share: f64 = self.plant.users.iter().map(|&e| unit.flows[e]).sum();
        let supply = need / user_share.max(1e-12);
        let flows: Vec<f64> = unit.flows.iter().map(|w| w * supply).collect();
        let start = self.plant.thermal.uniform(c.t0_c);
        let steady = self.plant.thermal.advance_fixed(&start, &flows, &self.bc(0.0), 1e12, 1);
        Ok(PlantState { temperatures: steady.temperatures, buildings: self.scenario.buildings.clone(), time_s: 0.0 })
    }

    /// Adjust valves so every user's delivered energy lands in its window.
    /// Returns the step and whether some user could not reach its window
    /// from below with its valve fully open.
    pub fn track(
        &self,
        state: &PlantState,
        supply: f64,
        windows: &[(f64, f64)],
        start: &[f64],
        movable: Option<&[bool]>,
    ) -> Result<(StepResult, bool), HarnessError> {
        let range = self.scenario.config.optimizer.valve_range;
        let nominal = &self.plant.nominal_valves;
        let n = nominal.len();
        let lo: Vec<f64> = nominal.iter().map(|z| (z / range).ln()).collect();
        let hi: Vec<f64> = nominal.iter().map(|z| (z * range).ln()).collect();
        let mut x: Vec<f64> = (0..n).map(|u| start[u].ln().clamp(lo[u], hi[u])).collect();
        let mut prev: Vec<Option<(f64, f64)>> = vec![None; n];
        let mut last = None;
        for _ in 0..TRACK_ITERATIONS {
            let valves: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let r = self.simulate(state, &valves, supply)?;
            let mut done = true;
            let mut short = false;
            let mut next = x.clone();
            for u in 0..n {
                if movable.is_some_and(|m| !m[u]) {
                    continue;
                }
                let e = r.thermal.user_energy[u];
                let (wl, wh) = windows[u];
                let target = if e < wl {
                    if x[u] <= lo[u] + 1e-12 {
                        short = true;
                        continue;
                    }
                    wl
                } else if e > wh {
                    if x[u] >= hi[u] - 1e-12 {
                        continue;
                    }
                    wh
                } else {
                    prev[u] = Some((x[u], e));
                    continue;
                };
                done = false;
                // Secant on log(valve) against log(energy), with the
                // turbulent-valve slope as the first guess.
                let slope = match prev[u] {
                    Some((xp, ep)) if (x[u] - xp).abs() > 1e-12 && ep > 0.0 && e > 0.0 => {
                        let s = (e.ln() - ep.ln()) / (x[u] - xp);
                        if s < -1e-3 { s } else { -0.5 }
                    }
                    _ => -0.5,
                };
                prev[u] = Some((x[u], e));
                let goal = target.max(1e-9 * target.abs().max(1.0));
                let step = (goal.ln() - e.max(1e-300).ln()) / slope;
                next[u] = (x[u] + step.clamp(-3.0, 3.0)).clamp(lo[u], hi[u]);
            }
            last = Some((r, short));
            if done {
                break;
            }
            x = next;
        }
        Ok(last.expect("at least one tracking iteration"))
    }

    /// Energy windows that return every user to a target flexibility band.
    pub fn windows(&self, state: &PlantState, demand: &[f64], band: impl Fn(&Building) -> (f64, f64)) -> Vec<(f64, f64)> {
        state
            .buildings
            .iter()
            .zip(demand)
            .map(|(b, d)| {
                let (lo, hi) = band(b);
                (d + lo - b.used_flexibility, d + hi - b.used_flexibility)
            })
            .collect()
    }

    /// Smallest supply flow for which tracking succeeds, by bisection on
    /// a logarithmic scale, together with the tracked step. With
    /// `allow_below` false the search never goes under `guess`.
    pub fn supply_search(
        &self,
        state: &PlantState,
        windows: &[(f64, f64)],
        guess: f64,
        start: &[f64],
        allow_below: bool,
    ) -> Result<StepResult, HarnessError> {
        let ok = |s: f64| -> Result<(bool, StepResult), HarnessError> {
            let (r, short) = self.track(state, s, windows, start, None)?;
            Ok((!short && within(&r, windows), r))
        };
        let mut hi = guess.max(1e-3);
        let mut lo;
        let (good, mut best) = ok(hi)?;
        if good {
            if !allow_below {
                return Ok(best);
            }
            lo = hi / 1.25;
            loop {
                let (g, r) = ok(lo)?;
                if !g {
                    break;
                }
                hi = lo;
                best = r;
                lo /= 1.25;
                if lo < 1e-4 {
                    return Ok(best);
                }
            }
        } else {
            lo = hi;
            loop {
                hi *= 1.25;
                if hi > 1e3 {
                    return Err(HarnessError::SupplyLimit(hi));
                }
                let (g, r) = ok(hi)?;
                if g {
                    best = r;
                    break;
                }
                lo = hi;
            }
        }
        while hi / lo > 1.0 + SUPPLY_REL_TOL {
            let mid = (hi * lo).sqrt();
            let (g, r) = ok(mid)?;
            if g {
                hi = mid;
                best = r;
            } else {
                lo = mid;
            }
        }
        Ok(best)
    }

    /// Advance the plant state with a simulated step.
    pub fn commit(&self, state: &PlantState, step: &StepResult) -> Result<PlantState, HarnessError> {
        let demand = self.demand_j(state.time_s, self.dt());
        let mut buildings = Vec::with_capacity(state.buildings.len());
        for (u, b) in state.buildings.iter().enumerate() {
            buildings.push(b.apply_energy(step.thermal.user_energy[u], demand[u])?);
        }
        Ok(PlantState {
            temperatures: step.thermal.temperatures.clone(),
            buildings,
            time_s: state.time_s + self.dt(),
        })
    }
}

fn within(r: &StepResult, windows: &[(f64, f64)]) -> bool {
    r.thermal.user_energy.iter().zip(windows).all(|(e, (l, h))| *e >= *l && *e <= *h)
}

/// Tracking tolerance as a fraction of heat capacity times one kelvin.
const TRACK_BAND_K: f64 = 2e-7;

fn nominal_band(b: &Building) -> (f64, f64) {
    let w = TRACK_BAND_K * b.heat_capacity;
    (-w, w)
}

/// Per-step record written to `metrics.csv`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub time_s: f64,
    pub supply_kg_s: f64,
    pub bypass_kg_s: f64,
    pub users_kg_s: f64,
    pub supply_mass_kg: f64,
    pub bypass_mass_kg: f64,
    pub user_mass_kg: f64,
    pub plant_heat_j: f64,
    pub delivered_j: f64,
    pub demand_j: f64,
    pub ambient_loss_j: f64,
    pub energy_imbalance_j: f64,
    pub epsilon_pa: f64,
    pub projected: u8,
    pub feasible_candidates: usize,
}

/// Per-user record for one step.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct UserRecord {
    pub step: usize,
    pub time_s: f64,
    pub valve_zeta: f64,
    pub flow_kg_s: f64,
    pub delivered_j: f64,
    pub demand_j: f64,
    pub used_flexibility_j: f64,
    pub equivalent_deviation_k: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SelectionRecord {
    pub step: usize,
    pub subsystem: String,
    pub head_pa: f64,
    pub cost_kg: f64,
    pub supply_kg_s: f64,
    pub epsilon_pa: f64,
    pub pressure_residual_pa: f64,
    pub total_cost_kg: f64,
    pub total_supply_kg_s: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CostRecord {
    pub step: usize,
    pub subsystem: String,
    pub head_pa: f64,
    pub feasible: bool,
    pub cost_kg: Option<f64>,
    pub supply_kg_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Totals {
    pub supply_mass_kg: f64,
    pub bypass_mass_kg: f64,
    pub user_mass_kg: f64,
    pub delivered_j: f64,
    pub demand_j: f64,
    pub plant_heat_j: f64,
    pub max_energy_imbalance_j: f64,
    pub projected_steps: usize,
    pub widened_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub label: String,
    pub steps: Vec<StepMetrics>,
    pub users: BTreeMap<String, Vec<UserRecord>>,
    pub selections: Vec<SelectionRecord>,
    pub costs: Vec<CostRecord>,
    pub totals: Totals,
    pub final_flexibility_j: Vec<f64>,
}

impl RunResult {
    /// A run with no users and no steps.
    pub fn empty(label: &str) -> Self {
        Self::new(label, &[])
    }

    fn new(label: &str, buildings: &[Building]) -> Self {
        Self {
            label: label.into(),
            steps: Vec::new(),
            users: buildings.iter().map(|b| (b.id.clone(), Vec::new())).collect(),
            selections: Vec::new(),
            costs: Vec::new(),
            totals: Totals {
                supply_mass_kg: 0.0,
                bypass_mass_kg: 0.0,
                user_mass_kg: 0.0,
                delivered_j: 0.0,
                demand_j: 0.0,
                plant_heat_j: 0.0,
                max_energy_imbalance_j: 0.0,
                projected_steps: 0,
                widened_steps: 0,
            },
            final_flexibility_j: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        sim: &Simulator,
        step: usize,
        before: &PlantState,
        after: &PlantState,
        r: &StepResult,
        epsilon: f64,
        projected: bool,
        feasible_candidates: usize,
    ) {
        let dt = sim.dt();
        let plant = &sim.plant;
        let flows = &r.hydraulics.edge_flows;
        let bypass: f64 = plant.bypass.iter().map(|&e| flows[e]).sum();
        let users: f64 = plant.users.iter().map(|&e| flows[e]).sum();
        let demand = sim.demand_j(before.time_s, dt);
        let a = &r.thermal.audit;
        let m = StepMetrics {
            step,
            time_s: before.time_s,
            supply_kg_s: r.supply,
            bypass_kg_s: bypass,
            users_kg_s: users,
            supply_mass_kg: r.supply * dt,
            bypass_mass_kg: bypass * dt,
            user_mass_kg: users * dt,
            plant_heat_j: a.plant_in - a.return_out,
            delivered_j: r.thermal.user_energy.iter().sum(),
            demand_j: demand.iter().sum(),
            ambient_loss_j: a.ambient_loss,
            energy_imbalance_j: a.imbalance(),
            epsilon_pa: epsilon,
            projected: projected as u8,
            feasible_candidates,
        };
        let t = &mut self.totals;
        t.supply_mass_kg += m.supply_mass_kg;
        t.bypass_mass_kg += m.bypass_mass_kg;
        t.user_mass_kg += m.user_mass_kg;
        t.delivered_j += m.delivered_j;
        t.demand_j += m.demand_j;
        t.plant_heat_j += m.plant_heat_j;
        t.max_energy_imbalance_j = t.max_energy_imbalance_j.max(m.energy_imbalance_j.abs());
        t.projected_steps += projected as usize;
        self.steps.push(m);
        for (u, b) in after.buildings.iter().enumerate() {
            self.users.get_mut(&b.id).expect("building registered").push(UserRecord {
                step,
                time_s: before.time_s,
                valve_zeta: r.valves[u],
                flow_kg_s: flows[plant.users[u]],
                delivered_j: r.thermal.user_energy[u],
                demand_j: demand[u],
                used_flexibility_j: b.used_flexibility,
                equivalent_deviation_k: b.equivalent_temperature_deviation(),
            });
        }
        self.final_flexibility_j = after.buildings.iter().map(|b| b.used_flexibility).collect();
    }
}

/// Nominal operation: each building receives its demand every interval
/// and the plant supplies the least flow that allows it.
pub fn run_nominal(scenario: &Scenario) -> Result<RunResult, HarnessError> {
    match run_nominal_partial(scenario) {
        (r, None) => Ok(r),
        (_, Some(e)) => Err(e),
    }
}

/// Like [`run_nominal`] but keeps the steps completed before a failure.
pub fn run_nominal_partial(scenario: &Scenario) -> (RunResult, Option<HarnessError>) {
    let mut result = RunResult::new("nominal", &scenario.buildings);
    let err = nominal_into(scenario, &mut result).err();
    (result, err)
}

fn nominal_into(scenario: &Scenario, result: &mut RunResult) -> Result<(), HarnessError> {
    let sim = Simulator::new(scenario);
    let mut state = sim.initial_state()?;
    let mut valves = sim.plant.nominal_valves.clone();
    let mut guess = 1.0;
    for step in 0..scenario.config.steps() {
        let demand = sim.demand_j(state.time_s, sim.dt());
        let windows = sim.windows(&state, &demand, nominal_band);
        let r = sim.supply_search(&state, &windows, guess, &valves, true)?;
        let next = sim.commit(&state, &r)?;
        result.record(&sim, step, &state, &next, &r, 0.0, false, 0);
        guess = r.supply;
        valves = r.valves.clone();
        state = next;
        log::debug!("nominal step {step}: supply {:.4} kg/s", r.supply);
    }
    Ok(())
}

/// Static structure shared by all steps of an optimized run.
pub struct Hierarchy {
    pub partition: Partition,
    pub reduced: ReducedGraph,
    pub models: Vec<SubsystemModel>,
    /// Global user index of every local user, per subsystem.
    pub user_map: Vec<Vec<usize>>,
}

impl Hierarchy {
    pub fn build(scenario: &Scenario) -> Result<Self, HarnessError> {
        let g = &scenario.graph;
        let partition = partition::recursive_partition(g, scenario.config.n_subsystems)?;
        let reduced = partition::reduce_graph(g, &partition);
        let models: Vec<SubsystemModel> = partition.subsystems.iter().map(SubsystemModel::new).collect();
        let users = g.user_edges();
        let user_map = models
            .iter()
            .map(|m| {
                m.thermal
                    .users()
                    .iter()
                    .map(|&le| users.iter().position(|&ge| ge == m.global_edges[le]).expect("user edge in graph"))
                    .collect()
            })
            .collect();
        Ok(Self { partition, reduced, models, user_map })
    }
}

pub fn local_problem_for(sim: &Simulator, h: &Hierarchy, j: usize, state: &PlantState, supply_c: f64) -> LocalProblem {
    let c = &sim.scenario.config;
    let model = &h.models[j];
    let dt = c.interval_s;
    let ns = c.stages();
    let users = &h.user_map[j];
    let initial_temperatures = model
        .thermal
        .state_edges()
        .iter()
        .map(|&le| {
            let ge = model.global_edges[le];
            let s = sim.plant.thermal.state_of_edge(ge).expect("pipe has a state");
            state.temperatures[s]
        })
        .collect();
    let demand_j = (0..ns)
        .map(|k| users.iter().map(|&u| sim.scenario.demand[u].energy(state.time_s + k as f64 * dt, dt)).collect())
        .collect();
    let ambient_c = (0..ns).map(|k| sim.scenario.ambient.at(state.time_s + k as f64 * dt)).collect();
    let b = |u: usize| &state.buildings[u];
    LocalProblem {
        grid: HorizonGrid { horizon_s: c.horizon_s, interval_s: dt },
        supply_c,
        return_set_c: c.t_set_return_c,
        ambient_c,
        demand_j,
        initial_temperatures,
        initial_flex_j: users.iter().map(|&u| b(u).used_flexibility).collect(),
        lower_j: users.iter().map(|&u| b(u).lower_bound()).collect(),
        upper_j: users.iter().map(|&u| b(u).upper_bound()).collect(),
        capacity_j_k: users.iter().map(|&u| b(u).heat_capacity).collect(),
        settings: c.optimizer.clone(),
    }
}

/// Shift a solution one stage forward for use as a warm start.
fn shifted(sol: &LocalSolution, nu: usize, ns: usize) -> Vec<f64> {
    let x = &sol.x;
    let mut out = Vec::with_capacity(x.len());
    for k in 0..ns {
        let src = (k + 1).min(ns - 1);
        out.extend_from_slice(&x[src * nu..(src + 1) * nu]);
    }
    for k in 1..ns {
        let src = (k + 1).min(ns - 1);
        out.push(x[nu * ns + src - 1]);
    }
    out
}

/// Solved warm starts kept between steps, per subsystem, keyed by head.
pub type WarmStore = Vec<Vec<(f64, Vec<f64>)>>;

fn nearest_warm(store: &[(f64, Vec<f64>)], head: f64) -> Option<Vec<f64>> {
    store
        .iter()
        .min_by(|a, b| (a.0 / head).ln().abs().total_cmp(&(b.0 / head).ln().abs()))
        .map(|(_, x)| x.clone())
}

fn solve_jobs(
    h: &Hierarchy,
    problems: &[LocalProblem],
    jobs: &[(usize, f64)],
    warm: &WarmStore,
) -> Vec<(usize, lowlevel::CostEntry)> {
    jobs.par_iter()
        .map(|&(j, head)| {
            let start = warm.get(j).and_then(|w| nearest_warm(w, head));
            let r = lowlevel::solve_stage(&h.models[j], &problems[j], head, start.as_deref());
            let r = match r {
                // A poor warm start must not hide a feasible candidate.
                Err(_) if start.is_some() => lowlevel::solve_stage(&h.models[j], &problems[j], head, None),
                other => other,
            };
            (j, lowlevel::entry_from(head, r))
        })
        .collect()
}

/// Outcome of the upper level for one step.
pub struct StepPlan {
    pub tables: Vec<CostTable>,
    pub selection: coordinator::Selection,
    pub valves: Vec<f64>,
    pub supply: f64,
}

fn to_candidates(tables: &[CostTable]) -> Vec<Vec<Candidate>> {
    tables
        .iter()
        .map(|t| {
            t.entries
                .iter()
                .enumerate()
                .filter_map(|(i, e)| {
                    Some(Candidate { index: i, head_pa: e.head_pa, cost_kg: e.cost_kg?, supply_flow: e.supply_flow? })
                })
                .collect()
        })
        .collect()
}

/// Sweep every subsystem over the candidate grid, select, then refine each
/// subsystem's grid around its selected head and select again.
pub fn plan_step(
    sim: &Simulator,
    h: &Hierarchy,
    state: &PlantState,
    supply_c: &[f64],
    warm: &WarmStore,
) -> Result<StepPlan, HarnessError> {
    let c = &sim.scenario.config;
    let problems: Vec<LocalProblem> =
        (0..h.models.len()).map(|j| local_problem_for(sim, h, j, state, supply_c[j])).collect();
    let heads = c.candidates.values();
    let jobs: Vec<(usize, f64)> = (0..h.models.len()).flat_map(|j| heads.iter().map(move |&p| (j, p))).collect();
    let mut tables: Vec<CostTable> = (0..h.models.len()).map(|_| CostTable { entries: Vec::new() }).collect();
    for (j, e) in solve_jobs(h, &problems, &jobs, warm) {
        tables[j].entries.push(e);
    }
    let infeasible = |reason: String| HarnessError::StepInfeasible { time_s: state.time_s, reason };
    if let Some(j) = tables.iter().position(|t| t.feasible_count() == 0) {
        return Err(infeasible(format!("subsystem {} has no feasible candidate", partition::subsystem_label(j))));
    }
    let select = |tables: &[CostTable]| {
        let problem = SelectionProblem { reduced: &h.reduced, tables: to_candidates(tables), epsilon_pa: c.epsilon() };
        coordinator::select_with_widening(&problem, c.epsilon_max_widening)
    };
    let mut selection = select(&tables).map_err(|e| infeasible(e.to_string()))?;
    for _ in 0..c.optimizer.refinement_rounds {
        let mut jobs = Vec::new();
        for (j, &i) in selection.choice.iter().enumerate() {
            let t = &tables[j].entries;
            let hc = t[i].head_pa;
            let below = t.iter().map(|e| e.head_pa).filter(|&p| p < hc).fold(f64::NAN, f64::max);
            let above = t.iter().map(|e| e.head_pa).filter(|&p| p > hc).fold(f64::NAN, f64::min);
            for n in [below, above] {
                if n.is_finite() && (n / hc).ln().abs() > 1e-3 {
                    jobs.push((j, (n * hc).sqrt()));
                }
            }
        }
        if jobs.is_empty() {
            break;
        }
        for (j, e) in solve_jobs(h, &problems, &jobs, warm) {
            tables[j].entries.push(e);
        }
        for t in &mut tables {
            t.entries.sort_by(|a, b| a.head_pa.total_cmp(&b.head_pa));
        }
        selection = select(&tables).map_err(|e| infeasible(e.to_string()))?;
    }
    let mut valves = sim.plant.nominal_valves.clone();
    let mut supply = 0.0;
    for (j, &i) in selection.choice.iter().enumerate() {
        let s = tables[j].solution(i).expect("feasible entry has a solution");
        supply += s.supply[0];
        for (lu, &gu) in h.user_map[j].iter().enumerate() {
            valves[gu] = s.valves[0][lu];
        }
    }
    Ok(StepPlan { tables, selection, valves, supply })
}

/// Optimized operation with the hierarchical scheme.
pub fn run_optimized(scenario: &Scenario) -> Result<RunResult, HarnessError> {
    match run_optimized_partial(scenario) {
        (r, None) => Ok(r),
        (_, Some(e)) => Err(e),
    }
}

/// Like [`run_optimized`] but keeps the steps completed before a failure.
pub fn run_optimized_partial(scenario: &Scenario) -> (RunResult, Option<HarnessError>) {
    let mut result = RunResult::new("optimized", &scenario.buildings);
    let err = optimized_into(scenario, &mut result).err();
    (result, err)
}

fn optimized_into(scenario: &Scenario, result: &mut RunResult) -> Result<(), HarnessError> {
    let sim = Simulator::new(scenario);
    let h = Hierarchy::build(scenario)?;
    let c = &scenario.config;
    let mut state = sim.initial_state()?;
    let mut warm: WarmStore = vec![Vec::new(); h.models.len()];
    let mut last: Option<StepResult> = None;
    let ns = c.stages();
    for step in 0..c.steps() {
        let supply_c: Vec<f64> = match (&c.optimizer.local_supply_temperature, &last) {
            (LocalSupplyTemperature::Measured, Some(prev)) => {
                let mix = sim.plant.thermal.node_temperatures(
                    &state.temperatures,
                    &prev.hydraulics.edge_flows,
                    &sim.bc(state.time_s),
                );
                h.partition.subsystems.iter().map(|s| mix[s.root]).collect()
            }
            _ => vec![c.t0_c; h.models.len()],
        };
        let plan = plan_step(&sim, &h, &state, &supply_c, &warm)?;
        for (j, t) in plan.tables.iter().enumerate() {
            let nu = h.models[j].user_count();
            warm[j] = t
                .entries
                .iter()
                .filter_map(|e| e.solution.as_ref().map(|s| (e.head_pa, shifted(s, nu, ns))))
                .collect();
            for e in &t.entries {
                result.costs.push(CostRecord {
                    step,
                    subsystem: partition::subsystem_label(j),
                    head_pa: e.head_pa,
                    feasible: e.feasible,
                    cost_kg: e.cost_kg,
                    supply_kg_s: e.supply_flow,
                });
            }
        }
        let feasible_candidates = plan.tables.iter().map(|t| t.feasible_count()).sum();
        let sel = &plan.selection;
        if sel.epsilon_pa > c.epsilon() * (1.0 + 1e-12) {
            result.totals.widened_steps += 1;
        }
        for (j, &i) in sel.choice.iter().enumerate() {
            let s = plan.tables[j].solution(i).expect("selected entry has a solution");
            let e = &h.reduced.edges[h.reduced.subsystem_edge(j).expect("subsystem edge")];
            let drop = sel.node_pressures[e.tail] - sel.node_pressures[e.head];
            result.selections.push(SelectionRecord {
                step,
                subsystem: partition::subsystem_label(j),
                head_pa: s.head_pa,
                cost_kg: s.cost_kg,
                supply_kg_s: s.supply[0],
                epsilon_pa: sel.epsilon_pa,
                pressure_residual_pa: (drop - s.head_pa).abs(),
                total_cost_kg: sel.total_cost_kg,
                total_supply_kg_s: sel.total_supply,
            });
        }
        let demand = sim.demand_j(state.time_s, sim.dt());
        // Half of the building-level tolerance keeps zero-width envelopes
        // reachable without risking a violation on commit.
        let envelope = sim.windows(&state, &demand, |b| {
            let slack = 0.5 * ENVELOPE_TOLERANCE * b.heat_capacity;
            (b.lower_bound() - slack, b.upper_bound() + slack)
        });
        let r = sim.simulate(&state, &plan.valves, plan.supply)?;
        let (r, projected) = if within(&r, &envelope) { (r, false) } else { (project(&sim, &state, &envelope, r)?, true) };
        let next = sim.commit(&state, &r)?;
        result.record(&sim, step, &state, &next, &r, sel.epsilon_pa, projected, feasible_candidates);
        log::info!(
            "step {step}: supply {:.3} kg/s, bypass {:.3} kg/s{}",
            r.supply,
            result.steps.last().map_or(0.0, |m| m.bypass_kg_s),
            if projected { ", projected" } else { "" },
        );
        last = Some(r);
        state = next;
    }
    Ok(())
}

/// Bring the applied controls back inside every envelope: move the
/// offending valves toward the violated bound, then all valves, and raise
/// the supply by the least amount that makes this possible.
fn project(sim: &Simulator, state: &PlantState, envelope: &[(f64, f64)], first: StepResult) -> Result<StepResult, HarnessError> {
    // Aim slightly inside the envelope so the refined thermal solution
    // does not land on the wrong side of the bound.
    let windows: Vec<(f64, f64)> = envelope
        .iter()
        .zip(&state.buildings)
        .map(|(&(l, h), b)| {
            let m = (0.25 * (h - l)).min(1e-3 * b.heat_capacity).max(0.0);
            (l + m, h - m)
        })
        .collect();
    let movable: Vec<bool> = first.thermal.user_energy.iter().zip(envelope).map(|(e, (l, h))| e < l || e > h).collect();
    let (r, _) = sim.track(state, first.supply, &windows, &first.valves, Some(&movable))?;
    if within(&r, envelope) {
        return Ok(r);
    }
    let (r, short) = sim.track(state, first.supply, &windows, &r.valves, None)?;
    if within(&r, envelope) || !short {
        return Ok(r);
    }
    log::debug!("raising supply above {:.4} kg/s to keep envelopes", first.supply);
    sim.supply_search(state, &windows, first.supply, &r.valves, false)
}

/// Relative comparison of two runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Comparison {
    pub nominal: Totals,
    pub optimized: Totals,
    pub bypass_reduction: f64,
    pub supply_ratio: f64,
    pub delivered_ratio: f64,
}

pub fn compare(nominal: &RunResult, optimized: &RunResult) -> Comparison {
    let n = &nominal.totals;
    let o = &optimized.totals;
    Comparison {
        nominal: n.clone(),
        optimized: o.clone(),
        bypass_reduction: 1.0 - o.bypass_mass_kg / n.bypass_mass_kg,
        supply_ratio: o.supply_mass_kg / n.supply_mass_kg,
        delivered_ratio: o.delivered_j / n.delivered_j,
    }
}
