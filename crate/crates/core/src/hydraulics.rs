//! Steady hydraulic solution of a network with quadratic pipe losses.
//!
//! Unknowns are the chord flows of a spanning tree rooted at the plant.
//! Mass conservation holds by construction; Newton iterations drive the
//! loop pressure residuals to zero. Since `ΔP = ζ·ṁ²` is homogeneous, the
//! solver works at unit supply flow and rescales: flows by `s`, pressures
//! by `s²`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::network::NetworkGraph;

const MAX_NEWTON: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HydraulicsError {
    #[error("newton iteration did not converge after {iterations} steps (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("flow on edge `{0}` reversed against its orientation")]
    FlowReversal(String),
    #[error("invalid hydraulic input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HydraulicState {
    pub edge_flows: Vec<f64>,
    pub node_pressures: Vec<f64>,
    pub supply_flow: f64,
}

impl HydraulicState {
    pub fn root_pressure(&self, g: &NetworkGraph) -> f64 {
        self.node_pressures[g.root()]
    }
}

/// Flow pattern at unit supply flow together with the data needed for
/// reverse-mode sensitivities with respect to the loss coefficients.
#[derive(Debug, Clone)]
pub struct UnitFlow {
    /// Edge flows for `ṁ_0 = 1`.
    pub flows: Vec<f64>,
    /// Root pressure for `ṁ_0 = 1`.
    pub root_pressure: f64,
    zeta: Vec<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

/// Precomputed tree/cotree decomposition of one network graph.
#[derive(Debug, Clone)]
pub struct FlowSolver {
    n_edges: usize,
    n_nodes: usize,
    root: usize,
    term: usize,
    /// Signed edge lists of the fundamental loops, chord first.
    loops: Vec<Vec<(usize, f64)>>,
    /// Signed tree path from root to terminal.
    path: Vec<(usize, f64)>,
    /// Tree edges in an order that lets pressures propagate from the terminal.
    pressure_order: Vec<(usize, usize, f64)>,
    /// Loops (with sign) passing through each edge.
    edge_loops: Vec<Vec<(usize, f64)>>,
    tails: Vec<usize>,
    heads: Vec<usize>,
    names: Vec<String>,
    init_split: Vec<f64>,
}

impl FlowSolver {
    pub fn new(g: &NetworkGraph) -> Self {
        let n = g.node_count();
        let m = g.edge_count();
        let tails: Vec<usize> = g.edges().iter().map(|e| e.tail).collect();
        let heads: Vec<usize> = g.edges().iter().map(|e| e.head).collect();

        // Undirected BFS spanning tree from the root.
        let mut parent_edge: Vec<Option<usize>> = vec![None; n];
        let mut parent: Vec<usize> = vec![usize::MAX; n];
        let mut depth = vec![0usize; n];
        let mut seen = vec![false; n];
        let mut in_tree = vec![false; m];
        let mut queue = VecDeque::from([g.root()]);
        seen[g.root()] = true;
        while let Some(v) = queue.pop_front() {
            for &e in g.out_edges(v).iter().chain(g.in_edges(v)) {
                let w = if tails[e] == v { heads[e] } else { tails[e] };
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = v;
                    parent_edge[w] = Some(e);
                    depth[w] = depth[v] + 1;
                    in_tree[e] = true;
                    queue.push_back(w);
                }
            }
        }

        // Signed tree path from `from` up to the ancestor `to`, in traversal direction.
        let climb = |mut v: usize, stop: usize| {
            let mut out = Vec::new();
            while v != stop {
                let e = parent_edge[v].expect("tree path");
                // Traversal goes v -> parent[v].
                let sign = if tails[e] == v { 1.0 } else { -1.0 };
                out.push((e, sign));
                v = parent[v];
            }
            out
        };
        let lca = |mut a: usize, mut b: usize| {
            while depth[a] > depth[b] {
                a = parent[a];
            }
            while depth[b] > depth[a] {
                b = parent[b];
            }
            while a != b {
                a = parent[a];
                b = parent[b];
            }
            a
        };
        let reverse = |p: Vec<(usize, f64)>| p.into_iter().rev().map(|(e, s)| (e, -s)).collect::<Vec<_>>();
        // Path a -> b through the tree.
        let tree_path = |a: usize, b: usize| {
            let c = lca(a, b);
            let mut p = climb(a, c);
            p.extend(reverse(climb(b, c)));
            p
        };

        let mut loops = Vec::new();
        for e in 0..m {
            if in_tree[e] {
                continue;
            }
            // Chord tail -> head, then back through the tree head -> tail.
            let mut l = vec![(e, 1.0)];
            l.extend(tree_path(heads[e], tails[e]));
            loops.push(l);
        }
        let path = tree_path(g.root(), g.terminal());

        // Pressure propagation order: BFS over the tree starting from the terminal.
        let mut pressure_order = Vec::with_capacity(n.saturating_sub(1));
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([g.terminal()]);
        seen[g.terminal()] = true;
        while let Some(v) = queue.pop_front() {
            for &e in g.out_edges(v).iter().chain(g.in_edges(v)) {
                if !in_tree[e] {
                    continue;
                }
                let w = if tails[e] == v { heads[e] } else { tails[e] };
                if !seen[w] {
                    seen[w] = true;
                    pressure_order.push((e, w, if tails[e] == w { 1.0 } else { -1.0 }));
                    queue.push_back(w);
                }
            }
        }

        // Uniform split of the unit supply at every node, in topological order.
        let mut init_split = vec![0.0; m];
        let mut inflow = vec![0.0; n];
        inflow[g.root()] = 1.0;
        for &v in g.topological_nodes() {
            let outs = g.out_edges(v);
            if outs.is_empty() {
                continue;
            }
            let share = inflow[v] / outs.len() as f64;
            for &e in outs {
                init_split[e] = share;
                inflow[heads[e]] += share;
            }
        }
        let mut edge_loops = vec![Vec::new(); m];
        for (i, l) in loops.iter().enumerate() {
            for &(e, s) in l {
                edge_loops[e].push((i, s));
            }
        }

        Self {
            n_edges: m,
            n_nodes: n,
            root: g.root(),
            term: g.terminal(),
            loops,
            path,
            pressure_order,
            edge_loops,
            tails,
            heads,
            names: g.edges().iter().map(|e| e.name.clone()).collect(),
            init_split,
        }
    }

    pub fn loop_count(&self) -> usize {
        self.loops.len()
    }

    fn flows_from(&self, q: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.n_edges];
        for &(e, s) in &self.path {
            w[e] += s;
        }
        for (l, &qc) in self.loops.iter().zip(q) {
            for &(e, s) in l {
                w[e] += s * qc;
            }
        }
        w
    }

    fn loop_residual(&self, zeta: &[f64], w: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.loops.len(),
            self.loops.iter().map(|l| l.iter().map(|&(e, s)| s * zeta[e] * w[e] * w[e].abs()).sum::<f64>()),
        )
    }

    fn jacobian(&self, zeta: &[f64], w: &[f64]) -> DMatrix<f64> {
        let nc = self.loops.len();
        let mut jac = DMatrix::zeros(nc, nc);
        for (e, members) in self.edge_loops.iter().enumerate() {
            // Floor keeps the Jacobian positive definite for near-zero flows.
            let d = 2.0 * zeta[e] * w[e].abs().max(1e-9);
            for &(i, si) in members {
                for &(j, sj) in members {
                    jac[(i, j)] += si * sj * d;
                }
            }
        }
        jac
    }

    /// Flow pattern for unit supply flow.
    pub fn solve_unit(&self, zeta: &[f64]) -> Result<UnitFlow, HydraulicsError> {
        self.check_zeta(zeta)?;
        let nc = self.loops.len();
        let mut q: Vec<f64> = self.loops.iter().map(|l| self.init_split[l[0].0]).collect();
        let mut w = self.flows_from(&q);
        let scale = zeta.iter().cloned().fold(0.0, f64::max).max(1e-300);
        let tol = 1e-13 * scale;
        let mut r = self.loop_residual(zeta, &w);
        let mut rn = r.amax();
        let mut iterations = 0;
        while rn > tol {
            if iterations >= MAX_NEWTON {
                return Err(HydraulicsError::NonConvergence { iterations, residual: rn });
            }
            iterations += 1;
            let jac = self.jacobian(zeta, &w);
            let step = match jac.clone().cholesky() {
                Some(c) => c.solve(&r),
                None => jac.lu().solve(&r).ok_or(HydraulicsError::NonConvergence { iterations, residual: rn })?,
            };
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = q.iter().zip(step.iter()).map(|(a, b)| a - t * b).collect();
                let tw = self.flows_from(&trial);
                let tr = self.loop_residual(zeta, &tw);
                let trn = tr.amax();
                if trn < rn || t < 1e-6 {
                    q = trial;
                    w = tw;
                    r = tr;
                    rn = trn;
                    break;
                }
                t *= 0.5;
            }
            if step.amax() * t <= 1e-15 && rn > tol {
                // Further steps cannot change the iterate.
                break;
            }
        }
        if nc > 0 && !(rn <= 1e-9 * scale) {
            return Err(HydraulicsError::NonConvergence { iterations, residual: rn });
        }
        for (e, x) in w.iter_mut().enumerate() {
            if *x < 0.0 {
                if *x < -1e-10 {
                    return Err(HydraulicsError::FlowReversal(self.names[e].clone()));
                }
                *x = 0.0;
            }
        }
        let root_pressure = self.path.iter().map(|&(e, s)| s * zeta[e] * w[e] * w[e]).sum();
        let chol = if nc > 0 { self.jacobian(zeta, &w).cholesky() } else { None };
        Ok(UnitFlow { flows: w, root_pressure, zeta: zeta.to_vec(), chol })
    }

    fn check_zeta(&self, zeta: &[f64]) -> Result<(), HydraulicsError> {
        if zeta.len() != self.n_edges {
            return Err(HydraulicsError::InvalidInput(format!(
                "expected {} loss coefficients, got {}",
                self.n_edges,
                zeta.len()
            )));
        }
        if let Some(i) = zeta.iter().position(|z| !(*z > 0.0) || !z.is_finite()) {
            return Err(HydraulicsError::InvalidInput(format!(
                "loss coefficient of `{}` must be positive, got {}",
                self.names[i], zeta[i]
            )));
        }
        Ok(())
    }

    /// Node pressures of a flow field with `P(terminal) = 0`.
    pub fn pressures(&self, zeta: &[f64], flows: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.n_nodes];
        for &(e, v, sign) in &self.pressure_order {
            // sign = +1 when v is the tail of e: P_tail = P_head + ζm².
            let other = if sign > 0.0 { self.heads[e] } else { self.tails[e] };
            p[v] = p[other] + sign * zeta[e] * flows[e] * flows[e].abs();
        }
        p[self.term] = 0.0;
        p
    }

    pub fn scaled(&self, unit: &UnitFlow, supply: f64) -> HydraulicState {
        let flows: Vec<f64> = unit.flows.iter().map(|w| w * supply).collect();
        let node_pressures = self.pressures(&unit.zeta, &flows);
        HydraulicState { edge_flows: flows, node_pressures, supply_flow: supply }
    }

    pub fn given_supply(&self, zeta: &[f64], supply: f64) -> Result<HydraulicState, HydraulicsError> {
        if !(supply > 0.0) || !supply.is_finite() {
            return Err(HydraulicsError::InvalidInput(format!("supply flow must be positive, got {supply}")));
        }
        let unit = self.solve_unit(zeta)?;
        Ok(self.scaled(&unit, supply))
    }

    pub fn given_head_drop(&self, zeta: &[f64], head: f64) -> Result<HydraulicState, HydraulicsError> {
        if !(head > 0.0) || !head.is_finite() {
            return Err(HydraulicsError::InvalidInput(format!("pressure drop must be positive, got {head}")));
        }
        let unit = self.solve_unit(zeta)?;
        let mut st = self.scaled(&unit, (head / unit.root_pressure).sqrt());
        st.node_pressures[self.root] = head;
        Ok(st)
    }

    /// Reverse-mode sensitivity of `L(w(ζ), P_root(ζ))` at unit supply.
    ///
    /// `grad_flows` is `∂L/∂w` per edge and `grad_root` is `∂L/∂P_root`;
    /// the result is `dL/dζ` per edge.
    pub fn unit_vjp(&self, unit: &UnitFlow, grad_flows: &[f64], grad_root: f64) -> Vec<f64> {
        let w = &unit.flows;
        let zeta = &unit.zeta;
        let mut h = grad_flows.to_vec();
        let mut path_sign = vec![0.0; self.n_edges];
        for &(e, s) in &self.path {
            path_sign[e] = s;
            h[e] += grad_root * s * 2.0 * zeta[e] * w[e].abs();
        }
        let mut cty = vec![0.0; self.n_edges];
        if let Some(chol) = &unit.chol {
            let ch = DVector::from_iterator(
                self.loops.len(),
                self.loops.iter().map(|l| l.iter().map(|&(e, s)| s * h[e]).sum::<f64>()),
            );
            let y = chol.solve(&ch);
            for (l, yc) in self.loops.iter().zip(y.iter()) {
                for &(e, s) in l {
                    cty[e] += s * yc;
                }
            }
        }
        (0..self.n_edges).map(|e| w[e] * w[e].abs() * (grad_root * path_sign[e] - cty[e])).collect()
    }
}

pub fn solve_flow_given_supply(
    g: &NetworkGraph,
    zeta: &[f64],
    supply: f64,
) -> Result<HydraulicState, HydraulicsError> {
    FlowSolver::new(g).given_supply(zeta, supply)
}

pub fn solve_flow_given_head_drop(
    g: &NetworkGraph,
    zeta: &[f64],
    head: f64,
) -> Result<HydraulicState, HydraulicsError> {
    FlowSolver::new(g).given_head_drop(zeta, head)
}

/// Max-norm mass and pressure residuals of a hydraulic state.
pub fn residuals(g: &NetworkGraph, zeta: &[f64], state: &HydraulicState) -> (f64, f64) {
    let mut net = vec![0.0; g.node_count()];
    let mut pressure = 0.0f64;
    for (i, e) in g.edges().iter().enumerate() {
        let m = state.edge_flows[i];
        net[e.tail] += m;
        net[e.head] -= m;
        let drop = state.node_pressures[e.tail] - state.node_pressures[e.head];
        pressure = pressure.max((drop - zeta[i] * m * m.abs()).abs());
    }
    net[g.root()] -= state.supply_flow;
    net[g.terminal()] += state.supply_flow;
    let mass = net.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    (mass, pressure.max(state.node_pressures[g.terminal()].abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{EdgeKind, EdgeSpec, FluidProperties, NetworkSpecFile, NodeSpec, PipeAttributes};

    fn build(nodes: &[&str], edges: &[(&str, &str, &str, EdgeKind)]) -> NetworkGraph {
        let spec = NetworkSpecFile {
            format: 1,
            fluid: FluidProperties::water(),
            root: nodes[0].into(),
            terminal: nodes[1].into(),
            nodes: nodes.iter().map(|n| NodeSpec { id: (*n).into(), site: None }).collect(),
            edges: edges
                .iter()
                .map(|(id, t, h, k)| EdgeSpec {
                    id: (*id).into(),
                    tail: (*t).into(),
                    head: (*h).into(),
                    kind: *k,
                    attributes: PipeAttributes::new(10.0, 0.2, 0.01, 1.5),
                })
                .collect(),
        };
        NetworkGraph::from_spec(&spec).unwrap()
    }

    fn parallel() -> NetworkGraph {
        build(&["r", "t"], &[("a", "r", "t", EdgeKind::Feed), ("b", "r", "t", EdgeKind::Bypass)])
    }

    #[test]
    fn symmetric_split() {
        let g = parallel();
        let st = solve_flow_given_supply(&g, &[1.0, 1.0], 2.0).unwrap();
        assert!((st.edge_flows[0] - 1.0).abs() < 1e-12);
        assert!((st.edge_flows[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quarter_ratio_split() {
        let g = parallel();
        let st = solve_flow_given_supply(&g, &[4.0, 1.0], 3.0).unwrap();
        // ζ₁ṁ₁² = ζ₂ṁ₂² with ζ₁ = 4ζ₂ gives ṁ₁ = ṁ₂/2.
        assert!((st.edge_flows[0] - 1.0).abs() < 1e-10);
        assert!((st.edge_flows[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn series_sum() {
        let g = build(&["r", "t", "a"], &[("x", "r", "a", EdgeKind::Feed), ("y", "a", "t", EdgeKind::Return)]);
        let st = solve_flow_given_supply(&g, &[0.3, 0.7], 1.0).unwrap();
        assert!((st.node_pressures[g.root()] - 1.0).abs() < 1e-14);
        assert_eq!(st.node_pressures[g.terminal()], 0.0);
    }

    #[test]
    fn head_drop_single_edge() {
        let g = build(&["r", "t"], &[("x", "r", "t", EdgeKind::Feed)]);
        let st = solve_flow_given_head_drop(&g, &[1.0], 4.0).unwrap();
        assert!((st.supply_flow - 2.0).abs() < 1e-14);
    }

    #[test]
    fn perturbed_flow_residual() {
        let g = parallel();
        let mut st = solve_flow_given_supply(&g, &[1.0, 2.0], 1.0).unwrap();
        let (m0, p0) = residuals(&g, &[1.0, 2.0], &st);
        assert!(m0 < 1e-12 && p0 < 1e-12);
        st.edge_flows[0] += 0.125;
        let (m1, _) = residuals(&g, &[1.0, 2.0], &st);
        assert!((m1 - 0.125).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs() {
        let g = parallel();
        assert!(matches!(solve_flow_given_supply(&g, &[1.0, 0.0], 1.0), Err(HydraulicsError::InvalidInput(_))));
        assert!(matches!(solve_flow_given_supply(&g, &[1.0, 1.0], 0.0), Err(HydraulicsError::InvalidInput(_))));
        assert!(matches!(solve_flow_given_head_drop(&g, &[1.0, 1.0], -1.0), Err(HydraulicsError::InvalidInput(_))));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        // Feed split into two user branches with bypasses.
        let g = build(
            &["r", "t", "a", "b", "c", "d"],
            &[
                ("f1", "r", "a", EdgeKind::Feed),
                ("u1", "a", "b", EdgeKind::User),
                ("b1", "a", "b", EdgeKind::Bypass),
                ("f2", "a", "c", EdgeKind::Feed),
                ("u2", "c", "d", EdgeKind::User),
                ("b2", "c", "d", EdgeKind::Bypass),
                ("r2", "d", "b", EdgeKind::Return),
                ("r1", "b", "t", EdgeKind::Return),
            ],
        );
        let solver = FlowSolver::new(&g);
        let zeta: Vec<f64> = (0..g.edge_count()).map(|i| 0.5 + 0.37 * i as f64).collect();
        let gw: Vec<f64> = (0..g.edge_count()).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let gp = 0.8;
        let loss = |z: &[f64]| {
            let u = solver.solve_unit(z).unwrap();
            u.flows.iter().zip(&gw).map(|(a, b)| a * b).sum::<f64>() + gp * u.root_pressure
        };
        let unit = solver.solve_unit(&zeta).unwrap();
        let grad = solver.unit_vjp(&unit, &gw, gp);
        for e in 0..g.edge_count() {
            let h = 1e-6 * zeta[e];
            let mut zp = zeta.clone();
            zp[e] += h;
            let mut zm = zeta.clone();
            zm[e] -= h;
            let fd = (loss(&zp) - loss(&zm)) / (2.0 * h);
            assert!((fd - grad[e]).abs() < 1e-6 * (1.0 + fd.abs()), "edge {e}: fd {fd} vs {}", grad[e]);
        }
    }
}
