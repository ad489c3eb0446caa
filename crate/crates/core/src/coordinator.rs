//! Upper-level selection of one candidate per subsystem.
//!
//! A selection is admissible when the reduced graph admits node pressures
//! such that every subsystem edge drops its chosen head within `ε` and
//! every pass-through pipe drops exactly its friction loss under the flows
//! implied by the chosen supply flows. Pressures are checked as a system of
//! difference constraints with Bellman-Ford. Search is depth-first with a
//! cost bound and an interval relaxation of the pressure system.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::partition::{ReducedGraph, ReducedKind};

const MASS_TOL: f64 = 1e-6;
const PRESSURE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordinatorError {
    #[error("no candidate combination satisfies the pressure balance")]
    NoFeasibleSelection,
    #[error("subsystem {0} has no feasible candidate")]
    EmptyTable(usize),
    #[error("invalid selection problem: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    /// Index in the caller's candidate list.
    pub index: usize,
    pub head_pa: f64,
    pub cost_kg: f64,
    pub supply_flow: f64,
}

#[derive(Debug, Clone)]
pub struct SelectionProblem<'a> {
    pub reduced: &'a ReducedGraph,
    /// Feasible candidates per subsystem.
    pub tables: Vec<Vec<Candidate>>,
    pub epsilon_pa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    /// Chosen caller index per subsystem.
    pub choice: Vec<usize>,
    pub total_cost_kg: f64,
    pub total_supply: f64,
    /// Flow on each reduced edge.
    pub edge_flows: Vec<f64>,
    /// A consistent set of reduced node pressures relative to the terminal.
    pub node_pressures: Vec<f64>,
    pub epsilon_pa: f64,
}

/// Linear map from subsystem supply flows to pass-through flows.
struct FlowMap {
    subsystem_edge: Vec<usize>,
    pass_edges: Vec<usize>,
    /// `pass = map · subsystem`
    map: DMatrix<f64>,
    /// Mass residual per unit subsystem flow; nonzero columns mean the
    /// graph cannot carry that subsystem's flow through pass-through pipes.
    residual: DMatrix<f64>,
}

impl FlowMap {
    fn new(r: &ReducedGraph, n_sub: usize) -> Result<Self, CoordinatorError> {
        let mut subsystem_edge = vec![usize::MAX; n_sub];
        let mut pass_edges = Vec::new();
        for (k, e) in r.edges.iter().enumerate() {
            match e.kind {
                ReducedKind::Subsystem(j) if j < n_sub => subsystem_edge[j] = k,
                ReducedKind::Subsystem(j) => return Err(CoordinatorError::Invalid(format!("subsystem {j} out of range"))),
                ReducedKind::PassThrough(_) => pass_edges.push(k),
            }
        }
        if let Some(j) = subsystem_edge.iter().position(|&k| k == usize::MAX) {
            return Err(CoordinatorError::Invalid(format!("subsystem {j} missing from the reduced graph")));
        }
        // Interior nodes only; the root supplies and the terminal absorbs.
        let interior: Vec<usize> = (0..r.nodes.len()).filter(|&v| v != r.root && v != r.terminal).collect();
        let inc = r.incidence();
        let a = DMatrix::from_fn(interior.len(), pass_edges.len(), |i, k| inc[(interior[i], pass_edges[k])]);
        let b = DMatrix::from_fn(interior.len(), n_sub, |i, j| -inc[(interior[i], subsystem_edge[j])]);
        let (map, residual) = if pass_edges.is_empty() {
            (DMatrix::zeros(0, n_sub), b.clone())
        } else {
            let svd = a.clone().svd(true, true);
            let pinv = svd.pseudo_inverse(1e-12).map_err(|e| CoordinatorError::Invalid(e.to_string()))?;
            let map = &pinv * &b;
            let residual = &a * &map - &b;
            (map, residual)
        };
        Ok(Self { subsystem_edge, pass_edges, map, residual })
    }
}

/// Solve difference constraints `lo ≤ p_tail − p_head ≤ hi`. Returns
/// potentials or `None` if a negative cycle exists.
fn difference_constraints(n: usize, arcs: &[(usize, usize, f64, f64)]) -> Option<Vec<f64>> {
    // p_t − p_h ≤ hi  : edge h → t weight hi
    // p_h − p_t ≤ −lo : edge t → h weight −lo
    let mut dist = vec![0.0; n];
    for iter in 0..=n {
        let mut changed = false;
        for &(t, h, lo, hi) in arcs {
            if dist[h] + hi < dist[t] - PRESSURE_TOL {
                dist[t] = dist[h] + hi;
                changed = true;
            }
            if dist[t] - lo < dist[h] - PRESSURE_TOL {
                dist[h] = dist[t] - lo;
                changed = true;
            }
        }
        if !changed {
            return Some(dist);
        }
        if iter == n {
            return None;
        }
    }
    None
}

struct Checker<'a> {
    problem: &'a SelectionProblem<'a>,
    flow: FlowMap,
    zeta: Vec<f64>,
}

impl<'a> Checker<'a> {
    fn new(problem: &'a SelectionProblem<'a>) -> Result<Self, CoordinatorError> {
        let flow = FlowMap::new(problem.reduced, problem.tables.len())?;
        let zeta = flow
            .pass_edges
            .iter()
            .map(|&k| problem.reduced.edges[k].zeta.unwrap_or(0.0))
            .collect();
        Ok(Self { problem, flow, zeta })
    }

    /// Interval check with some subsystems fixed and the rest free within
    /// the range of their tables.
    fn relaxed(&self, partial: &[Option<Candidate>]) -> bool {
        let eps = self.problem.epsilon_pa;
        let n_sub = partial.len();
        let mut flo = vec![0.0; n_sub];
        let mut fhi = vec![0.0; n_sub];
        let mut arcs = Vec::new();
        for j in 0..n_sub {
            let e = &self.problem.reduced.edges[self.flow.subsystem_edge[j]];
            let (plo, phi) = match partial[j] {
                Some(c) => {
                    flo[j] = c.supply_flow;
                    fhi[j] = c.supply_flow;
                    (c.head_pa - eps, c.head_pa + eps)
                }
                None => {
                    let t = &self.problem.tables[j];
                    flo[j] = t.iter().map(|c| c.supply_flow).fold(f64::INFINITY, f64::min);
                    fhi[j] = t.iter().map(|c| c.supply_flow).fold(0.0, f64::max);
                    let lo = t.iter().map(|c| c.head_pa).fold(f64::INFINITY, f64::min);
                    let hi = t.iter().map(|c| c.head_pa).fold(0.0, f64::max);
                    (lo - eps, hi + eps)
                }
            };
            arcs.push((e.tail, e.head, plo, phi));
        }
        for r in 0..self.flow.residual.nrows() {
            let (mut lo, mut hi) = (0.0, 0.0);
            for j in 0..n_sub {
                let c = self.flow.residual[(r, j)];
                lo += (c * flo[j]).min(c * fhi[j]);
                hi += (c * flo[j]).max(c * fhi[j]);
            }
            if lo > MASS_TOL || hi < -MASS_TOL {
                return false;
            }
        }
        for (i, &k) in self.flow.pass_edges.iter().enumerate() {
            let (mut lo, mut hi) = (0.0, 0.0);
            for j in 0..n_sub {
                let c = self.flow.map[(i, j)];
                lo += (c * flo[j]).min(c * fhi[j]);
                hi += (c * flo[j]).max(c * fhi[j]);
            }
            let drop = |m: f64| self.zeta[i] * m * m.abs();
            let e = &self.problem.reduced.edges[k];
            arcs.push((e.tail, e.head, drop(lo), drop(hi)));
        }
        difference_constraints(self.problem.reduced.nodes.len(), &arcs).is_some()
    }

    fn exact(&self, chosen: &[Candidate]) -> Option<(Vec<f64>, Vec<f64>)> {
        let eps = self.problem.epsilon_pa;
        let q = DVector::from_iterator(chosen.len(), chosen.iter().map(|c| c.supply_flow));
        let res = &self.flow.residual * &q;
        let scale = q.iter().sum::<f64>().max(1.0);
        if res.amax() > MASS_TOL * scale {
            return None;
        }
        let pass = &self.flow.map * &q;
        let r = self.problem.reduced;
        let mut flows = vec![0.0; r.edges.len()];
        let mut arcs = Vec::new();
        for (j, c) in chosen.iter().enumerate() {
            let k = self.flow.subsystem_edge[j];
            flows[k] = c.supply_flow;
            arcs.push((r.edges[k].tail, r.edges[k].head, c.head_pa - eps, c.head_pa + eps));
        }
        for (i, &k) in self.flow.pass_edges.iter().enumerate() {
            flows[k] = pass[i];
            let d = self.zeta[i] * pass[i] * pass[i].abs();
            arcs.push((r.edges[k].tail, r.edges[k].head, d, d));
        }
        let mut p = difference_constraints(r.nodes.len(), &arcs)?;
        let base = p[r.terminal];
        p.iter_mut().for_each(|v| *v -= base);
        Some((flows, p))
    }

    fn finish(&self, chosen: &[Candidate]) -> Option<Selection> {
        let (edge_flows, node_pressures) = self.exact(chosen)?;
        Some(Selection {
            choice: chosen.iter().map(|c| c.index).collect(),
            total_cost_kg: chosen.iter().map(|c| c.cost_kg).sum(),
            total_supply: chosen.iter().map(|c| c.supply_flow).sum(),
            edge_flows,
            node_pressures,
            epsilon_pa: self.problem.epsilon_pa,
        })
    }
}

fn better(a: &Selection, b: &Selection) -> bool {
    const REL: f64 = 1e-12;
    let tol = REL * a.total_cost_kg.abs().max(b.total_cost_kg.abs()).max(1.0);
    if a.total_cost_kg < b.total_cost_kg - tol {
        return true;
    }
    if a.total_cost_kg > b.total_cost_kg + tol {
        return false;
    }
    a.choice < b.choice
}

fn validate(problem: &SelectionProblem) -> Result<(), CoordinatorError> {
    if !(problem.epsilon_pa >= 0.0) {
        return Err(CoordinatorError::Invalid(format!("epsilon must be non-negative, got {}", problem.epsilon_pa)));
    }
    for (j, t) in problem.tables.iter().enumerate() {
        if t.is_empty() {
            return Err(CoordinatorError::EmptyTable(j));
        }
        if t.iter().any(|c| !(c.cost_kg.is_finite() && c.supply_flow > 0.0 && c.head_pa > 0.0)) {
            return Err(CoordinatorError::Invalid(format!("subsystem {j} has a malformed candidate")));
        }
    }
    Ok(())
}

/// Branch-and-bound search for the cheapest admissible selection. Ties are
/// broken by the lexicographically smallest choice vector.
pub fn select_optimal(problem: &SelectionProblem) -> Result<Selection, CoordinatorError> {
    validate(problem)?;
    let checker = Checker::new(problem)?;
    let n = problem.tables.len();
    // Candidates sorted by cost then index so the first leaves are cheap.
    let sorted: Vec<Vec<Candidate>> = problem
        .tables
        .iter()
        .map(|t| {
            let mut v = t.clone();
            v.sort_by(|a, b| a.cost_kg.total_cmp(&b.cost_kg).then(a.index.cmp(&b.index)));
            v
        })
        .collect();
    let mut rest_min = vec![0.0; n + 1];
    for j in (0..n).rev() {
        rest_min[j] = rest_min[j + 1] + sorted[j][0].cost_kg;
    }
    let mut best: Option<Selection> = None;
    let mut partial: Vec<Option<Candidate>> = vec![None; n];
    dfs(&checker, &sorted, &rest_min, 0, 0.0, &mut partial, &mut best);
    best.ok_or(CoordinatorError::NoFeasibleSelection)
}

fn dfs(
    checker: &Checker,
    sorted: &[Vec<Candidate>],
    rest_min: &[f64],
    depth: usize,
    cost: f64,
    partial: &mut Vec<Option<Candidate>>,
    best: &mut Option<Selection>,
) {
    let n = sorted.len();
    if depth == n {
        let chosen: Vec<Candidate> = partial.iter().map(|c| c.unwrap()).collect();
        if let Some(sel) = checker.finish(&chosen) {
            if best.as_ref().map_or(true, |b| better(&sel, b)) {
                *best = Some(sel);
            }
        }
        return;
    }
    for c in &sorted[depth] {
        let lower = cost + c.cost_kg + rest_min[depth + 1];
        if let Some(b) = best.as_ref() {
            let tol = 1e-12 * b.total_cost_kg.abs().max(1.0);
            // Equal-cost branches can still win the tie-break.
            if lower > b.total_cost_kg + tol {
                break;
            }
        }
        partial[depth] = Some(*c);
        if checker.relaxed(partial) {
            dfs(checker, sorted, rest_min, depth + 1, cost + c.cost_kg, partial, best);
        }
        partial[depth] = None;
    }
}

/// Check one full selection; `Some` when admissible.
pub fn feasibility_check(problem: &SelectionProblem, chosen: &[Candidate]) -> Result<Option<Selection>, CoordinatorError> {
    validate(problem)?;
    if chosen.len() != problem.tables.len() {
        return Err(CoordinatorError::Invalid("selection length differs from the table count".into()));
    }
    Ok(Checker::new(problem)?.finish(chosen))
}

/// Enumerate every combination. Intended for small problems and testing.
pub fn select_exhaustive(problem: &SelectionProblem, limit: usize) -> Result<Selection, CoordinatorError> {
    validate(problem)?;
    let total = problem.tables.iter().try_fold(1usize, |a, t| a.checked_mul(t.len()));
    match total {
        Some(t) if t <= limit => {}
        _ => return Err(CoordinatorError::Invalid("too many combinations for exhaustive search".into())),
    }
    let checker = Checker::new(problem)?;
    let n = problem.tables.len();
    let mut idx = vec![0usize; n];
    let mut best: Option<Selection> = None;
    loop {
        let chosen: Vec<Candidate> = (0..n).map(|j| problem.tables[j][idx[j]]).collect();
        if let Some(sel) = checker.finish(&chosen) {
            if best.as_ref().map_or(true, |b| better(&sel, b)) {
                best = Some(sel);
            }
        }
        let mut j = n;
        loop {
            if j == 0 {
                return best.ok_or(CoordinatorError::NoFeasibleSelection);
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < problem.tables[j].len() {
                break;
            }
            idx[j] = 0;
        }
    }
}

/// Select with `ε` doubled on failure until it exceeds `max_factor` times
/// the initial value.
pub fn select_with_widening(
    problem: &SelectionProblem,
    max_factor: f64,
) -> Result<Selection, CoordinatorError> {
    let mut p = problem.clone();
    loop {
        match select_optimal(&p) {
            Err(CoordinatorError::NoFeasibleSelection) if p.epsilon_pa * 2.0 <= problem.epsilon_pa * max_factor => {
                p.epsilon_pa *= 2.0;
                log::debug!("widening pressure tolerance to {:.4} Pa", p.epsilon_pa);
            }
            other => return other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::ReducedEdge;

    /// Plant feeds node 2 through a pipe; two subsystems in parallel from
    /// 2 to 3; a return pipe from 3 to the terminal.
    pub(crate) fn ladder(zeta: f64) -> ReducedGraph {
        ReducedGraph {
            nodes: vec![0, 1, 2, 3],
            root: 0,
            terminal: 1,
            edges: vec![
                ReducedEdge { tail: 2, head: 3, kind: ReducedKind::Subsystem(0), zeta: None },
                ReducedEdge { tail: 2, head: 3, kind: ReducedKind::Subsystem(1), zeta: None },
                ReducedEdge { tail: 0, head: 2, kind: ReducedKind::PassThrough(10), zeta: Some(zeta) },
                ReducedEdge { tail: 3, head: 1, kind: ReducedKind::PassThrough(11), zeta: Some(zeta) },
            ],
        }
    }

    fn cand(index: usize, head: f64, cost: f64) -> Candidate {
        Candidate { index, head_pa: head, cost_kg: cost, supply_flow: head.sqrt() }
    }

    #[test]
    fn parallel_subsystems_must_agree() {
        let r = ladder(0.1);
        let p = SelectionProblem {
            reduced: &r,
            tables: vec![
                vec![cand(0, 1.0, 10.0), cand(1, 2.0, 20.0)],
                vec![cand(0, 2.0, 1.0), cand(1, 4.0, 2.0)],
            ],
            epsilon_pa: 0.01,
        };
        let s = select_optimal(&p).unwrap();
        assert_eq!(s.choice, vec![1, 0]);
        assert!((s.total_cost_kg - 21.0).abs() < 1e-12);
        let q = s.total_supply;
        assert!((s.edge_flows[2] - q).abs() < 1e-9 && (s.edge_flows[3] - q).abs() < 1e-9);
        let drop = s.node_pressures[2] - s.node_pressures[3];
        assert!((drop - 2.0).abs() <= 0.01 + 1e-9);
        assert!((s.node_pressures[0] - s.node_pressures[2] - 0.1 * q * q).abs() < 1e-9);
    }

    #[test]
    fn nothing_fits() {
        let r = ladder(0.1);
        let p = SelectionProblem {
            reduced: &r,
            tables: vec![vec![cand(0, 1.0, 1.0)], vec![cand(0, 3.0, 1.0)]],
            epsilon_pa: 0.1,
        };
        assert_eq!(select_optimal(&p), Err(CoordinatorError::NoFeasibleSelection));
        let w = select_with_widening(&p, 64.0).unwrap();
        assert!(w.epsilon_pa >= 1.0 && w.epsilon_pa <= 6.4 + 1e-12);
    }

    #[test]
    fn ties_pick_smallest_indices() {
        let r = ladder(0.0);
        let p = SelectionProblem {
            reduced: &r,
            tables: vec![vec![cand(3, 1.0, 5.0), cand(1, 1.0, 5.0)], vec![cand(2, 1.0, 5.0), cand(0, 1.0, 5.0)]],
            epsilon_pa: 0.0,
        };
        assert_eq!(select_optimal(&p).unwrap().choice, vec![1, 0]);
        assert_eq!(select_exhaustive(&p, 100).unwrap().choice, vec![1, 0]);
    }

    #[test]
    fn empty_table_rejected() {
        let r = ladder(0.1);
        let p = SelectionProblem { reduced: &r, tables: vec![vec![cand(0, 1.0, 1.0)], vec![]], epsilon_pa: 0.1 };
        assert_eq!(select_optimal(&p), Err(CoordinatorError::EmptyTable(1)));
    }
}
