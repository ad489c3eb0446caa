//! Well-mixed pipe temperature dynamics on the non-user edges.
//!
//! Each pipe obeys `dT/dt = c1·ṁ·(T_in − T) + c2·(T_amb − T)` where `T_in`
//! is the ideally mixed temperature at the tail node. User edges are not
//! states: their outlet temperature is the return set temperature.
//!
//! With fixed flow directions the system is triangular in topological
//! order, so one backward-Euler step is a forward substitution. Steps are
//! Richardson-extrapolated and refined until successive estimates agree.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::hydraulics::HydraulicState;
use crate::network::{EdgeKind, FluidProperties, NetworkGraph, PipeAttributes};

/// Default agreement required between successive refinements, in °C.
pub const DEFAULT_TOLERANCE_K: f64 = 1e-4;
const MAX_SUBSTEPS: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThermalError {
    #[error("hydraulic state violates mass conservation at node `{node}` by {residual:e} kg/s")]
    InconsistentFlow { node: String, residual: f64 },
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("expected {expected} temperatures, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryConditions {
    pub supply_c: f64,
    pub return_set_c: f64,
    pub ambient_c: f64,
}

impl BoundaryConditions {
    pub fn as_vector(&self) -> [f64; 3] {
        [self.supply_c, self.return_set_c, self.ambient_c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThermalState {
    /// Temperature per non-user edge, in [`ThermalNetwork::state_edges`] order.
    pub temperatures: Vec<f64>,
    pub time_s: f64,
}

/// Returns `(c1, c2)` with `c1 = 1/(ρV)` and `c2 = hA_s/(ρ c_p V)`.
pub fn pipe_coefficients(attr: &PipeAttributes, fluid: &FluidProperties) -> (f64, f64) {
    let v = attr.volume();
    let c1 = 1.0 / (fluid.density_kg_m3 * v);
    let c2 = attr.htc_w_m2k * attr.surface_area() / (fluid.density_kg_m3 * fluid.cp_j_kg_k * v);
    (c1, c2)
}

/// Dense state-space form `dT/dt = A·T + B·[T_0, T_setR, T_amb]`.
#[derive(Debug, Clone)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Energy bookkeeping over an integration interval, in joules.
///
/// Enthalpies are measured from 0 °C.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyAudit {
    pub plant_in: f64,
    pub return_out: f64,
    pub user_extracted: f64,
    pub ambient_loss: f64,
    pub stored: f64,
}

impl EnergyAudit {
    /// Unexplained energy: input minus all sinks and storage.
    pub fn imbalance(&self) -> f64 {
        self.plant_in - self.return_out - self.user_extracted - self.ambient_loss - self.stored
    }

    fn add_scaled(&mut self, o: &EnergyAudit, k: f64) {
        self.plant_in += k * o.plant_in;
        self.return_out += k * o.return_out;
        self.user_extracted += k * o.user_extracted;
        self.ambient_loss += k * o.ambient_loss;
        self.stored += k * o.stored;
    }
}

/// Result of advancing the network over one interval.
#[derive(Debug, Clone)]
pub struct IntervalResult {
    pub temperatures: Vec<f64>,
    /// Heat delivered to each user over the interval, J (user ordinal order).
    pub user_energy: Vec<f64>,
    pub audit: EnergyAudit,
    pub substeps: usize,
}

/// Recorded forward pass used by [`ThermalNetwork::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    h: f64,
    flows: Vec<f64>,
    bc: BoundaryConditions,
    /// Temperatures before each substep and after the last one.
    temps: Vec<Vec<f64>>,
    /// Mixed node temperatures of each substep.
    mix: Vec<Vec<f64>>,
}

impl Tape {
    pub fn final_temperatures(&self) -> &[f64] {
        self.temps.last().expect("tape has at least the initial state")
    }
}

/// Precomputed structure of the temperature dynamics of one graph.
#[derive(Debug, Clone)]
pub struct ThermalNetwork {
    state_edges: Vec<usize>,
    edge_state: Vec<Option<usize>>,
    users: Vec<usize>,
    user_of_edge: Vec<Option<usize>>,
    c1: Vec<f64>,
    c2: Vec<f64>,
    heat_capacity: Vec<f64>,
    surface_htc: Vec<f64>,
    topo: Vec<usize>,
    in_edges: Vec<Vec<usize>>,
    out_edges: Vec<Vec<usize>>,
    tails: Vec<usize>,
    root: usize,
    term: usize,
    cp: f64,
    node_names: Vec<String>,
}

impl ThermalNetwork {
    pub fn new(g: &NetworkGraph) -> Self {
        let fluid = *g.fluid();
        let mut state_edges = Vec::new();
        let mut edge_state = vec![None; g.edge_count()];
        let mut users = Vec::new();
        let mut user_of_edge = vec![None; g.edge_count()];
        let mut c1 = vec![0.0; g.edge_count()];
        let mut c2 = vec![0.0; g.edge_count()];
        let mut heat_capacity = vec![0.0; g.edge_count()];
        let mut surface_htc = vec![0.0; g.edge_count()];
        for (i, e) in g.edges().iter().enumerate() {
            if e.kind == EdgeKind::User {
                user_of_edge[i] = Some(users.len());
                users.push(i);
                continue;
            }
            edge_state[i] = Some(state_edges.len());
            state_edges.push(i);
            let (a, b) = pipe_coefficients(&e.attributes, &fluid);
            c1[i] = a;
            c2[i] = b;
            heat_capacity[i] = fluid.density_kg_m3 * fluid.cp_j_kg_k * e.attributes.volume();
            surface_htc[i] = e.attributes.htc_w_m2k * e.attributes.surface_area();
        }
        Self {
            state_edges,
            edge_state,
            users,
            user_of_edge,
            c1,
            c2,
            heat_capacity,
            surface_htc,
            topo: g.topological_nodes().to_vec(),
            in_edges: (0..g.node_count()).map(|v| g.in_edges(v).to_vec()).collect(),
            out_edges: (0..g.node_count()).map(|v| g.out_edges(v).to_vec()).collect(),
            tails: g.edges().iter().map(|e| e.tail).collect(),
            root: g.root(),
            term: g.terminal(),
            cp: fluid.cp_j_kg_k,
            node_names: (0..g.node_count()).map(|v| g.node_name(v).to_string()).collect(),
        }
    }

    pub fn state_count(&self) -> usize {
        self.state_edges.len()
    }

    /// Edge index of every state, in state order.
    pub fn state_edges(&self) -> &[usize] {
        &self.state_edges
    }

    pub fn state_of_edge(&self, edge: usize) -> Option<usize> {
        self.edge_state[edge]
    }

    /// User edge indices in user-ordinal order.
    pub fn users(&self) -> &[usize] {
        &self.users
    }

    pub fn user_of_edge(&self, edge: usize) -> Option<usize> {
        self.user_of_edge[edge]
    }

    /// Uniform initial state.
    pub fn uniform(&self, t: f64) -> Vec<f64> {
        vec![t; self.state_count()]
    }

    /// Stored enthalpy of the pipe contents relative to 0 °C.
    pub fn stored_energy(&self, temps: &[f64]) -> f64 {
        self.state_edges.iter().zip(temps).map(|(&e, t)| self.heat_capacity[e] * t).sum()
    }

    /// Check that `flows` conserves mass at every node.
    pub fn check_flows(&self, flows: &[f64], supply: f64) -> Result<(), ThermalError> {
        let scale = supply.abs().max(flows.iter().cloned().fold(0.0, f64::max)).max(1e-12);
        for v in 0..self.in_edges.len() {
            let mut net: f64 = self.out_edges[v].iter().map(|&e| flows[e]).sum::<f64>()
                - self.in_edges[v].iter().map(|&e| flows[e]).sum::<f64>();
            if v == self.root {
                net -= supply;
            }
            if v == self.term {
                net += supply;
            }
            if net.abs() > 1e-8 * scale {
                return Err(ThermalError::InconsistentFlow { node: self.node_names[v].clone(), residual: net });
            }
        }
        Ok(())
    }

    /// Mixed inflow temperature of node `v` given updated edge temperatures.
    fn mix_node(&self, v: usize, temps: &[f64], flows: &[f64], bc: &BoundaryConditions) -> f64 {
        if v == self.root {
            return bc.supply_c;
        }
        let mut s = 0.0;
        let mut m = 0.0;
        for &e in &self.in_edges[v] {
            let y = match self.edge_state[e] {
                Some(k) => temps[k],
                None => bc.return_set_c,
            };
            s += flows[e] * y;
            m += flows[e];
        }
        if m > 0.0 {
            s / m
        } else {
            0.0
        }
    }

    /// One backward-Euler substep of length `h`, in place.
    fn substep(
        &self,
        temps: &mut [f64],
        mix: &mut [f64],
        flows: &[f64],
        bc: &BoundaryConditions,
        h: f64,
        user_energy: &mut [f64],
        audit: &mut EnergyAudit,
    ) {
        for &v in &self.topo {
            let x = self.mix_node(v, temps, flows, bc);
            mix[v] = x;
            for &e in &self.out_edges[v] {
                match self.edge_state[e] {
                    Some(k) => {
                        let a = h * self.c1[e] * flows[e];
                        let b = h * self.c2[e];
                        temps[k] = (temps[k] + a * x + b * bc.ambient_c) / (1.0 + a + b);
                        audit.ambient_loss += h * self.surface_htc[e] * (temps[k] - bc.ambient_c);
                    }
                    None => {
                        let u = self.user_of_edge[e].expect("non-state edge is a user");
                        let q = h * flows[e] * self.cp * (x - bc.return_set_c);
                        user_energy[u] += q;
                        audit.user_extracted += q;
                    }
                }
            }
        }
    }

    fn supply_of(&self, flows: &[f64]) -> f64 {
        self.out_edges[self.root].iter().map(|&e| flows[e]).sum()
    }

    /// Advance with exactly `substeps` backward-Euler steps.
    pub fn advance_fixed(
        &self,
        temps: &[f64],
        flows: &[f64],
        bc: &BoundaryConditions,
        dt: f64,
        substeps: usize,
    ) -> IntervalResult {
        let h = dt / substeps as f64;
        let mut t = temps.to_vec();
        let mut mix = vec![0.0; self.in_edges.len()];
        let mut user_energy = vec![0.0; self.users.len()];
        let mut audit = EnergyAudit::default();
        let supply = self.supply_of(flows);
        let e0 = self.stored_energy(&t);
        for _ in 0..substeps {
            self.substep(&mut t, &mut mix, flows, bc, h, &mut user_energy, &mut audit);
            audit.plant_in += h * supply * self.cp * bc.supply_c;
            audit.return_out += h * supply * self.cp * mix[self.term];
        }
        audit.stored = self.stored_energy(&t) - e0;
        IntervalResult { temperatures: t, user_energy, audit, substeps }
    }

    /// Advance over `dt` with Richardson-extrapolated backward Euler,
    /// doubling the substep count until successive extrapolations agree
    /// within `tol` (°C) in every state.
    pub fn advance(
        &self,
        temps: &[f64],
        flows: &[f64],
        bc: &BoundaryConditions,
        dt: f64,
        tol: f64,
    ) -> Result<IntervalResult, ThermalError> {
        if !(dt > 0.0) {
            return Err(ThermalError::InvalidStep(dt));
        }
        if temps.len() != self.state_count() {
            return Err(ThermalError::Dimension { expected: self.state_count(), got: temps.len() });
        }
        let mut n = 2;
        let mut coarse = self.advance_fixed(temps, flows, bc, dt, n);
        let mut fine = self.advance_fixed(temps, flows, bc, dt, 2 * n);
        let mut prev = extrapolate(&fine, &coarse);
        loop {
            n *= 2;
            coarse = fine;
            fine = self.advance_fixed(temps, flows, bc, dt, 2 * n);
            let next = extrapolate(&fine, &coarse);
            let diff = next
                .temperatures
                .iter()
                .zip(&prev.temperatures)
                .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            if diff <= tol || 2 * n >= MAX_SUBSTEPS {
                if diff > tol {
                    log::warn!("thermal refinement stopped at {} substeps with change {diff:e}", 2 * n);
                }
                return Ok(next);
            }
            prev = next;
        }
    }

    /// Forward pass with fixed substeps, recording what the adjoint needs.
    pub fn forward_tape(
        &self,
        temps: &[f64],
        flows: &[f64],
        bc: &BoundaryConditions,
        dt: f64,
        substeps: usize,
        user_energy: &mut [f64],
    ) -> Tape {
        let h = dt / substeps as f64;
        let mut t = temps.to_vec();
        let mut all_t = Vec::with_capacity(substeps + 1);
        let mut all_mix = Vec::with_capacity(substeps);
        let mut audit = EnergyAudit::default();
        all_t.push(t.clone());
        for _ in 0..substeps {
            let mut mix = vec![0.0; self.in_edges.len()];
            self.substep(&mut t, &mut mix, flows, bc, h, user_energy, &mut audit);
            all_t.push(t.clone());
            all_mix.push(mix);
        }
        Tape { h, flows: flows.to_vec(), bc: *bc, temps: all_t, mix: all_mix }
    }

    /// Reverse pass of [`forward_tape`](Self::forward_tape).
    ///
    /// `bar_t` holds `∂L/∂T_final` on entry and `∂L/∂T_initial` on exit;
    /// `bar_energy` is `∂L/∂E_u` per user (constant over the interval).
    /// Flow sensitivities are added into `bar_flows`.
    pub fn backward(&self, tape: &Tape, bar_t: &mut [f64], bar_energy: &[f64], bar_flows: &mut [f64]) {
        let h = tape.h;
        let flows = &tape.flows;
        let bc = &tape.bc;
        for step in (0..tape.mix.len()).rev() {
            let t_new = &tape.temps[step + 1];
            let mix = &tape.mix[step];
            // bar_t currently holds sensitivities w.r.t. t_new.
            let mut bar_prev = vec![0.0; bar_t.len()];
            for &v in self.topo.iter().rev() {
                let x = mix[v];
                let mut bx = 0.0;
                for &e in &self.out_edges[v] {
                    match self.edge_state[e] {
                        Some(k) => {
                            let a = h * self.c1[e] * flows[e];
                            let d = 1.0 + a + h * self.c2[e];
                            let bt = bar_t[k];
                            bar_prev[k] += bt / d;
                            bx += bt * a / d;
                            bar_flows[e] += bt * h * self.c1[e] * (x - t_new[k]) / d;
                        }
                        None => {
                            let u = self.user_of_edge[e].expect("user edge");
                            let be = bar_energy[u];
                            bx += be * h * flows[e] * self.cp;
                            bar_flows[e] += be * h * self.cp * (x - bc.return_set_c);
                        }
                    }
                }
                if v == self.root || bx == 0.0 {
                    continue;
                }
                let m: f64 = self.in_edges[v].iter().map(|&e| flows[e]).sum();
                if m <= 0.0 {
                    continue;
                }
                for &e in &self.in_edges[v] {
                    let y = match self.edge_state[e] {
                        Some(k) => {
                            bar_t[k] += bx * flows[e] / m;
                            t_new[k]
                        }
                        None => bc.return_set_c,
                    };
                    bar_flows[e] += bx * (y - x) / m;
                }
            }
            bar_t.copy_from_slice(&bar_prev);
        }
    }

    /// Tail node of an edge, exposed for callers that need mixed inlet temperatures.
    pub fn tail(&self, edge: usize) -> usize {
        self.tails[edge]
    }

    /// Mixed temperature entering every node for the current state.
    pub fn node_temperatures(&self, temps: &[f64], flows: &[f64], bc: &BoundaryConditions) -> Vec<f64> {
        let mut mix = vec![0.0; self.in_edges.len()];
        for &v in &self.topo {
            mix[v] = self.mix_node(v, temps, flows, bc);
        }
        mix
    }
}

fn extrapolate(fine: &IntervalResult, coarse: &IntervalResult) -> IntervalResult {
    let temperatures = fine.temperatures.iter().zip(&coarse.temperatures).map(|(f, c)| 2.0 * f - c).collect();
    let user_energy = fine.user_energy.iter().zip(&coarse.user_energy).map(|(f, c)| 2.0 * f - c).collect();
    let mut audit = EnergyAudit::default();
    audit.add_scaled(&fine.audit, 2.0);
    audit.add_scaled(&coarse.audit, -1.0);
    IntervalResult { temperatures, user_energy, audit, substeps: fine.substeps }
}

/// Dense `A` and `B` of the temperature dynamics for a hydraulic state.
pub fn assemble_system(g: &NetworkGraph, hyd: &HydraulicState) -> Result<StateSpace, ThermalError> {
    let net = ThermalNetwork::new(g);
    net.check_flows(&hyd.edge_flows, hyd.supply_flow)?;
    let n = net.state_count();
    let flows = &hyd.edge_flows;
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, 3);
    for (k, &e) in net.state_edges.iter().enumerate() {
        let m = flows[e];
        let (c1, c2) = (net.c1[e], net.c2[e]);
        a[(k, k)] -= c1 * m + c2;
        b[(k, 2)] += c2;
        let v = net.tails[e];
        if v == net.root {
            b[(k, 0)] += c1 * m;
            continue;
        }
        let total: f64 = net.in_edges[v].iter().map(|&i| flows[i]).sum();
        if total <= 0.0 {
            continue;
        }
        for &i in &net.in_edges[v] {
            let w = c1 * m * flows[i] / total;
            match net.edge_state[i] {
                Some(j) => a[(k, j)] += w,
                None => b[(k, 1)] += w,
            }
        }
    }
    Ok(StateSpace { a, b })
}

/// Advance a dense state-space model by `dt` with refined backward Euler.
pub fn integrate(
    state: &ThermalState,
    sys: &StateSpace,
    u: &[f64; 3],
    dt: f64,
) -> Result<ThermalState, ThermalError> {
    if !(dt > 0.0) {
        return Err(ThermalError::InvalidStep(dt));
    }
    let n = sys.a.nrows();
    if state.temperatures.len() != n {
        return Err(ThermalError::Dimension { expected: n, got: state.temperatures.len() });
    }
    let bu = &sys.b * DVector::from_row_slice(u);
    let x0 = DVector::from_column_slice(&state.temperatures);
    let run = |steps: usize| {
        let h = dt / steps as f64;
        let m = DMatrix::identity(n, n) - &sys.a * h;
        let lu = m.lu();
        let mut x = x0.clone();
        for _ in 0..steps {
            x = lu.solve(&(&x + &bu * h)).expect("I - hA is an M-matrix");
        }
        x
    };
    let mut steps = 2;
    let mut coarse = run(steps);
    let mut fine = run(2 * steps);
    let mut prev = &fine * 2.0 - &coarse;
    loop {
        steps *= 2;
        coarse = fine;
        fine = run(2 * steps);
        let next = &fine * 2.0 - &coarse;
        if (&next - &prev).amax() <= DEFAULT_TOLERANCE_K || 2 * steps >= MAX_SUBSTEPS {
            return Ok(ThermalState { temperatures: next.iter().cloned().collect(), time_s: state.time_s + dt });
        }
        prev = next;
    }
}

/// Instantaneous heat delivered to each user, W, in user-ordinal order.
pub fn delivered_heat(
    g: &NetworkGraph,
    hyd: &HydraulicState,
    state: &ThermalState,
    bc: &BoundaryConditions,
) -> Vec<f64> {
    let net = ThermalNetwork::new(g);
    let mix = net.node_temperatures(&state.temperatures, &hyd.edge_flows, bc);
    net.users
        .iter()
        .map(|&e| hyd.edge_flows[e] * g.fluid().cp_j_kg_k * (mix[net.tails[e]] - bc.return_set_c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hydraulics::solve_flow_given_supply;
    use crate::network::{EdgeSpec, NetworkSpecFile, NodeSpec};

    fn graph(nodes: &[&str], edges: &[(&str, &str, &str, EdgeKind, f64, f64)]) -> NetworkGraph {
        let spec = NetworkSpecFile {
            format: 1,
            fluid: FluidProperties::water(),
            root: nodes[0].into(),
            terminal: nodes[1].into(),
            nodes: nodes.iter().map(|n| NodeSpec { id: (*n).into(), site: None }).collect(),
            edges: edges
                .iter()
                .map(|(id, t, h, k, l, d)| EdgeSpec {
                    id: (*id).into(),
                    tail: (*t).into(),
                    head: (*h).into(),
                    kind: *k,
                    attributes: PipeAttributes::new(*l, *d, 0.01, 1.5),
                })
                .collect(),
        };
        NetworkGraph::from_spec(&spec).unwrap()
    }

    fn bc() -> BoundaryConditions {
        BoundaryConditions { supply_c: 80.0, return_set_c: 45.0, ambient_c: -15.0 }
    }

    #[test]
    fn coefficients() {
        let fluid = FluidProperties { density_kg_m3: 1000.0, cp_j_kg_k: 4179.0 };
        // Volume of exactly 1 m³.
        let d = 0.5;
        let l = 1.0 / (std::f64::consts::PI * 0.25 * 0.25);
        let (c1, c2) = pipe_coefficients(&PipeAttributes::new(l, d, 0.01, 0.0), &fluid);
        assert!((c1 - 1e-3).abs() < 1e-15);
        assert_eq!(c2, 0.0);
    }

    #[test]
    fn coefficients_table_values() {
        // Independent evaluation: V = π·0.01·10, A_s = π·0.2·10.
        let (c1, c2) = pipe_coefficients(&PipeAttributes::new(10.0, 0.2, 0.01, 1.5), &FluidProperties::water());
        assert!((c1 - 3.278_165_666_156_444e-3).abs() < 1e-15, "{c1}");
        assert!((c2 - 7.393_152_314_463_298e-6).abs() < 1e-18, "{c2}");
    }

    #[test]
    fn single_pipe_rows() {
        let g = graph(&["r", "t"], &[("p", "r", "t", EdgeKind::Feed, 10.0, 0.2)]);
        let hyd = solve_flow_given_supply(&g, g.nominal_zeta(), 2.0).unwrap();
        let ss = assemble_system(&g, &hyd).unwrap();
        let (c1, c2) = pipe_coefficients(&g.edge(0).attributes, g.fluid());
        assert!((ss.a[(0, 0)] + c1 * 2.0 + c2).abs() < 1e-15);
        assert!((ss.b[(0, 0)] - c1 * 2.0).abs() < 1e-15);
        assert_eq!(ss.b[(0, 1)], 0.0);
        assert!((ss.b[(0, 2)] - c2).abs() < 1e-18);
    }

    fn merge_graph() -> NetworkGraph {
        graph(
            &["r", "t", "a", "b"],
            &[
                ("f", "r", "a", EdgeKind::Feed, 20.0, 0.3),
                ("u", "a", "b", EdgeKind::User, 5.0, 0.1),
                ("y", "a", "b", EdgeKind::Bypass, 3.0, 0.15),
                ("x", "a", "b", EdgeKind::Feed, 30.0, 0.2),
                ("o", "b", "t", EdgeKind::Return, 20.0, 0.3),
            ],
        )
    }

    #[test]
    fn merge_node_weights() {
        let g = merge_graph();
        let hyd = solve_flow_given_supply(&g, g.nominal_zeta(), 3.0).unwrap();
        let ss = assemble_system(&g, &hyd).unwrap();
        let net = ThermalNetwork::new(&g);
        let o = net.state_of_edge(4).unwrap();
        let (c1, _) = pipe_coefficients(&g.edge(4).attributes, g.fluid());
        let m = &hyd.edge_flows;
        // Enthalpy balance at b: inflow temperature is the flow-weighted mean.
        let y = net.state_of_edge(2).unwrap();
        let x = net.state_of_edge(3).unwrap();
        assert!((ss.a[(o, y)] - c1 * m[4] * m[2] / 3.0).abs() < 1e-12);
        assert!((ss.a[(o, x)] - c1 * m[4] * m[3] / 3.0).abs() < 1e-12);
        assert!((ss.b[(o, 1)] - c1 * m[4] * m[1] / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rows_sum_to_zero() {
        let g = merge_graph();
        let hyd = solve_flow_given_supply(&g, g.nominal_zeta(), 3.0).unwrap();
        let ss = assemble_system(&g, &hyd).unwrap();
        for k in 0..ss.a.nrows() {
            let s: f64 = ss.a.row(k).sum() + ss.b.row(k).sum();
            assert!(s.abs() < 1e-12 * ss.a[(k, k)].abs(), "row {k}: {s}");
        }
    }

    #[test]
    fn uniform_equilibrium() {
        let g = merge_graph();
        let hyd = solve_flow_given_supply(&g, g.nominal_zeta(), 3.0).unwrap();
        let net = ThermalNetwork::new(&g);
        let b = BoundaryConditions { supply_c: 50.0, return_set_c: 50.0, ambient_c: 50.0 };
        let r = net.advance(&net.uniform(50.0), &hyd.edge_flows, &b, 600.0, 1e-6).unwrap();
        assert!(r.temperatures.iter().all(|t| (t - 50.0).abs() < 1e-10));
    }

    #[test]
    fn single_pipe_steady_state() {
        let g = graph(&["r", "t"], &[("p", "r", "t", EdgeKind::Feed, 50.0, 0.2)]);
        let hyd = solve_flow_given_supply(&g, g.nominal_zeta(), 0.5).unwrap();
        let net = ThermalNetwork::new(&g);
        let (c1, c2) = pipe_coefficients(&g.edge(0).attributes, g.fluid());
        let t_ss = (c1 * 0.5 * 80.0 + c2 * -15.0) / (c1 * 0.5 + c2);
        let r = net.advance(&[20.0], &hyd.edge_flows, &bc(), 40_000.0, 1e-6).unwrap();
        assert!((r.temperatures[0] - t_ss).abs() < 1e-4);
    }

    #[test]
    fn dense_and_cascade_agree() {
        let g = merge_graph();
        let hyd = solve_flow_given_supply(&g, g.nominal_zeta(), 3.0).unwrap();
        let ss = assemble_system(&g, &hyd).unwrap();
        let net = ThermalNetwork::new(&g);
        let t0 = vec![60.0, 50.0, 40.0, 55.0];
        let d = integrate(&ThermalState { temperatures: t0.clone(), time_s: 0.0 }, &ss, &bc().as_vector(), 300.0)
            .unwrap();
        let c = net.advance(&t0, &hyd.edge_flows, &bc(), 300.0, 1e-6).unwrap();
        for (a, b) in d.temperatures.iter().zip(&c.temperatures) {
            assert!((a - b).abs() < 5e-4, "{a} vs {b}");
        }
        assert_eq!(d.time_s, 300.0);
    }

    #[test]
    fn zero_step_rejected() {
        let g = merge_graph();
        let net = ThermalNetwork::new(&g);
        let flows = vec![1.0; 5];
        assert!(matches!(net.advance(&net.uniform(1.0), &flows, &bc(), 0.0, 1e-4), Err(ThermalError::InvalidStep(_))));
    }

    #[test]
    fn heat_product() {
        let g = graph(
            &["r", "t"],
            &[("u", "r", "t", EdgeKind::User, 5.0, 0.1), ("b", "r", "t", EdgeKind::Bypass, 3.0, 0.15)],
        );
        let hyd = HydraulicState { edge_flows: vec![1.0, 0.0], node_pressures: vec![1.0, 0.0], supply_flow: 1.0 };
        let b = BoundaryConditions { supply_c: 80.0, return_set_c: 40.0, ambient_c: 0.0 };
        let st = ThermalState { temperatures: vec![80.0], time_s: 0.0 };
        let q = delivered_heat(&g, &hyd, &st, &b);
        assert!((q[0] - 167_160.0).abs() < 1e-9);
        let hyd0 = HydraulicState { edge_flows: vec![0.0, 1.0], ..hyd };
        assert_eq!(delivered_heat(&g, &hyd0, &st, &b)[0], 0.0);
    }

    #[test]
    fn audit_closes() {
        let g = merge_graph();
        let hyd = solve_flow_given_supply(&g, g.nominal_zeta(), 3.0).unwrap();
        let net = ThermalNetwork::new(&g);
        let r = net.advance(&[70.0, 60.0, 50.0, 40.0], &hyd.edge_flows, &bc(), 600.0, 1e-5).unwrap();
        assert!(r.audit.imbalance().abs() < 1e-9 * r.audit.plant_in);
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let g = merge_graph();
        let net = ThermalNetwork::new(&g);
        let flows0 = vec![1.3, 0.4, 0.5, 0.4, 1.3];
        let t0 = vec![70.0, 60.0, 50.0, 40.0];
        let wt = [0.3, -0.2, 0.5, 1.0];
        let we = [2e-7];
        let loss = |f: &[f64], t: &[f64]| {
            let mut e = vec![0.0; 1];
            let tape = net.forward_tape(t, f, &bc(), 600.0, 8, &mut e);
            tape.final_temperatures().iter().zip(&wt).map(|(a, b)| a * b).sum::<f64>() + e[0] * we[0]
        };
        let mut e = vec![0.0; 1];
        let tape = net.forward_tape(&t0, &flows0, &bc(), 600.0, 8, &mut e);
        let mut bar_t = wt.to_vec();
        let mut bar_f = vec![0.0; 5];
        net.backward(&tape, &mut bar_t, &we, &mut bar_f);
        for i in 0..5 {
            let h = 1e-6;
            let mut fp = flows0.clone();
            fp[i] += h;
            let mut fm = flows0.clone();
            fm[i] -= h;
            let fd = (loss(&fp, &t0) - loss(&fm, &t0)) / (2.0 * h);
            assert!((fd - bar_f[i]).abs() < 1e-5 * (1.0 + fd.abs()), "flow {i}: {fd} vs {}", bar_f[i]);
        }
        for k in 0..4 {
            let mut tp = t0.clone();
            tp[k] += 1e-4;
            let mut tm = t0.clone();
            tm[k] -= 1e-4;
            let fd = (loss(&flows0, &tp) - loss(&flows0, &tm)) / 2e-4;
            assert!((fd - bar_t[k]).abs() < 1e-7, "temp {k}: {fd} vs {}", bar_t[k]);
        }
    }
}
