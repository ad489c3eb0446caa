//! Per-subsystem finite-horizon optimization over one candidate pressure drop.
//!
//! Decision variables are the logarithms of the user valve coefficients on
//! every stage and of the supply flow on stages after the first. On the
//! first stage the supply flow follows from the candidate pressure drop.
//! Hydraulics are eliminated by nested solves; the thermal response is a
//! Richardson-extrapolated backward-Euler pass whose adjoint gives exact
//! gradients. Envelope inequalities are handled by an augmented
//! Lagrangian; each subproblem is a box-constrained quasi-Newton solve.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::hydraulics::{FlowSolver, HydraulicsError, UnitFlow};
use crate::network::{EdgeKind, NetworkGraph};
use crate::partition::Subsystem;
use crate::scenario::OptimizerSettings;
use crate::thermal::{BoundaryConditions, Tape, ThermalNetwork};

const FEASIBILITY_TOL: f64 = 1e-8;
const STALL_TOL: f64 = 1e-6;
const KKT_TOL: f64 = 1e-6;
const STAGNATION_TOL: f64 = 1e-6;
const SUPPLY_MIN: f64 = 1e-4;
const SUPPLY_MAX: f64 = 1e3;
/// Fraction of the comfort band kept free to absorb model mismatch.
pub const ENVELOPE_MARGIN: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LowLevelError {
    #[error("constraints cannot be met (violation {violation:e} K)")]
    Infeasible { violation: f64 },
    #[error("iteration limit reached (violation {violation:e} K, stationarity {kkt:e})")]
    MaxIterations { violation: f64, kkt: f64 },
    #[error(transparent)]
    Hydraulics(#[from] HydraulicsError),
    #[error("invalid problem: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonGrid {
    pub horizon_s: f64,
    pub interval_s: f64,
}

impl HorizonGrid {
    pub fn stages(&self) -> usize {
        (self.horizon_s / self.interval_s).round() as usize
    }
}

/// Static data of one subsystem.
#[derive(Debug, Clone)]
pub struct SubsystemModel {
    pub graph: NetworkGraph,
    pub solver: FlowSolver,
    pub thermal: ThermalNetwork,
    /// Local bypass edges.
    pub bypass: Vec<usize>,
    /// Global edge id of every local edge.
    pub global_edges: Vec<usize>,
}

impl SubsystemModel {
    pub fn new(sub: &Subsystem) -> Self {
        Self::from_graph(sub.graph.clone(), sub.edges.clone())
    }

    pub fn from_graph(graph: NetworkGraph, global_edges: Vec<usize>) -> Self {
        let solver = FlowSolver::new(&graph);
        let thermal = ThermalNetwork::new(&graph);
        let bypass = graph.edges_of_kind(EdgeKind::Bypass);
        Self { graph, solver, thermal, bypass, global_edges }
    }

    pub fn user_count(&self) -> usize {
        self.thermal.users().len()
    }

    /// Full local loss coefficient vector with the given user valves.
    pub fn zeta_with(&self, valves: &[f64]) -> Vec<f64> {
        let mut z = self.graph.nominal_zeta().to_vec();
        for (&e, &v) in self.thermal.users().iter().zip(valves) {
            z[e] = v;
        }
        z
    }

    pub fn nominal_valves(&self) -> Vec<f64> {
        self.thermal.users().iter().map(|&e| self.graph.nominal_zeta()[e]).collect()
    }
}

/// Per-step data of one low-level problem.
#[derive(Debug, Clone)]
pub struct LocalProblem {
    pub grid: HorizonGrid,
    pub supply_c: f64,
    pub return_set_c: f64,
    /// Ambient temperature per stage.
    pub ambient_c: Vec<f64>,
    /// Nominal demand energy per stage and user, J.
    pub demand_j: Vec<Vec<f64>>,
    /// Pipe temperatures at the start, local state order.
    pub initial_temperatures: Vec<f64>,
    pub initial_flex_j: Vec<f64>,
    pub lower_j: Vec<f64>,
    pub upper_j: Vec<f64>,
    pub capacity_j_k: Vec<f64>,
    pub settings: OptimizerSettings,
}

impl LocalProblem {
    fn bc(&self, k: usize) -> BoundaryConditions {
        BoundaryConditions { supply_c: self.supply_c, return_set_c: self.return_set_c, ambient_c: self.ambient_c[k] }
    }

    /// Envelope limits actually imposed, with the safety margin.
    fn limits(&self, u: usize) -> (f64, f64) {
        let m = ENVELOPE_MARGIN * (self.upper_j[u] - self.lower_j[u]);
        (self.lower_j[u] + m, self.upper_j[u] - m)
    }
}

/// Dimensions of the transcribed problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NlpInstance {
    pub users: usize,
    pub stages: usize,
}

impl NlpInstance {
    /// Valve coefficients plus supply flow on every stage; the first-stage
    /// supply is tied to the candidate pressure drop by an equality.
    pub fn decision_count(&self) -> usize {
        self.users * self.stages + self.stages
    }

    /// Free variables after eliminating the first-stage supply.
    pub fn free_count(&self) -> usize {
        self.users * self.stages + self.stages - 1
    }

    /// Two-sided envelope constraints, one per user and stage.
    pub fn envelope_constraints(&self) -> usize {
        self.users * self.stages
    }
}

pub fn transcribe(model: &SubsystemModel, problem: &LocalProblem) -> NlpInstance {
    NlpInstance { users: model.user_count(), stages: problem.grid.stages() }
}

/// Optimal controls for one candidate.
#[derive(Debug, Clone, Serialize)]
pub struct LocalSolution {
    pub head_pa: f64,
    pub cost_kg: f64,
    /// Supply flow per stage, kg/s.
    pub supply: Vec<f64>,
    /// Valve coefficients per stage and user.
    pub valves: Vec<Vec<f64>>,
    /// Predicted used flexibility at the end of each stage, J.
    pub flexibility: Vec<Vec<f64>>,
    pub violation_k: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    pub evaluations: usize,
    #[serde(skip)]
    pub x: Vec<f64>,
}

struct Forward {
    cost: f64,
    flex: Vec<Vec<f64>>,
    units: Vec<UnitFlow>,
    supply: Vec<f64>,
    tapes: Vec<(Tape, Tape)>,
}

struct Evaluator<'a> {
    model: &'a SubsystemModel,
    problem: &'a LocalProblem,
    head: f64,
    nu: usize,
    ns: usize,
    evaluations: usize,
}

impl<'a> Evaluator<'a> {
    fn valves(&self, x: &[f64], k: usize) -> Vec<f64> {
        x[k * self.nu..(k + 1) * self.nu].iter().map(|v| v.exp()).collect()
    }

    fn supply_var(&self, k: usize) -> usize {
        self.nu * self.ns + k - 1
    }

    fn forward(&mut self, x: &[f64]) -> Result<Forward, HydraulicsError> {
        self.evaluations += 1;
        let p = self.problem;
        let n = p.settings.substeps_per_interval.max(1);
        let dt = p.grid.interval_s;
        let mut temps = p.initial_temperatures.clone();
        let mut flex_now = p.initial_flex_j.clone();
        let mut out = Forward {
            cost: 0.0,
            flex: Vec::with_capacity(self.ns),
            units: Vec::with_capacity(self.ns),
            supply: Vec::with_capacity(self.ns),
            tapes: Vec::with_capacity(self.ns),
        };
        for k in 0..self.ns {
            let zeta = self.model.zeta_with(&self.valves(x, k));
            let unit = self.model.solver.solve_unit(&zeta)?;
            let s = if k == 0 { (self.head / unit.root_pressure).sqrt() } else { x[self.supply_var(k)].exp() };
            let flows: Vec<f64> = unit.flows.iter().map(|w| w * s).collect();
            out.cost += dt * s * self.model.bypass.iter().map(|&b| unit.flows[b]).sum::<f64>();
            let bc = p.bc(k);
            let mut e_coarse = vec![0.0; self.nu];
            let mut e_fine = vec![0.0; self.nu];
            let coarse = self.model.thermal.forward_tape(&temps, &flows, &bc, dt, n, &mut e_coarse);
            let fine = self.model.thermal.forward_tape(&temps, &flows, &bc, dt, 2 * n, &mut e_fine);
            temps = fine
                .final_temperatures()
                .iter()
                .zip(coarse.final_temperatures())
                .map(|(f, c)| 2.0 * f - c)
                .collect();
            for u in 0..self.nu {
                flex_now[u] += 2.0 * e_fine[u] - e_coarse[u] - p.demand_j[k][u];
            }
            out.flex.push(flex_now.clone());
            out.units.push(unit);
            out.supply.push(s);
            out.tapes.push((coarse, fine));
        }
        Ok(out)
    }

    /// Scaled constraint values `c ≤ 0`: for every stage and user, lower then upper.
    fn constraints(&self, fw: &Forward) -> Vec<f64> {
        let p = self.problem;
        let mut c = Vec::with_capacity(2 * self.nu * self.ns);
        for k in 0..self.ns {
            for u in 0..self.nu {
                let (lo, hi) = p.limits(u);
                let f = fw.flex[k][u];
                c.push((lo - f) / p.capacity_j_k[u]);
                c.push((f - hi) / p.capacity_j_k[u]);
            }
        }
        c
    }

    /// Gradient of `cost_weight·cost + Σ weights_i·c_i` with respect to `x`.
    fn backward(&self, x: &[f64], fw: &Forward, cost_weight: f64, weights: &[f64]) -> Vec<f64> {
        let p = self.problem;
        let dt = p.grid.interval_s;
        let mut grad = vec![0.0; x.len()];
        // ∂/∂F per stage and user, then accumulate into per-stage energies.
        let mut bar_e = vec![vec![0.0; self.nu]; self.ns];
        let mut running = vec![0.0; self.nu];
        for k in (0..self.ns).rev() {
            for u in 0..self.nu {
                let wl = weights[2 * (k * self.nu + u)];
                let wh = weights[2 * (k * self.nu + u) + 1];
                running[u] += (wh - wl) / p.capacity_j_k[u];
                bar_e[k][u] = running[u];
            }
        }
        let m = self.model.graph.edge_count();
        let mut bar_t = vec![0.0; self.model.thermal.state_count()];
        for k in (0..self.ns).rev() {
            let (coarse, fine) = &fw.tapes[k];
            let mut bar_flows = vec![0.0; m];
            let mut bt_f: Vec<f64> = bar_t.iter().map(|v| 2.0 * v).collect();
            let mut bt_c: Vec<f64> = bar_t.iter().map(|v| -v).collect();
            let be_f: Vec<f64> = bar_e[k].iter().map(|v| 2.0 * v).collect();
            let be_c: Vec<f64> = bar_e[k].iter().map(|v| -v).collect();
            self.model.thermal.backward(fine, &mut bt_f, &be_f, &mut bar_flows);
            self.model.thermal.backward(coarse, &mut bt_c, &be_c, &mut bar_flows);
            for (t, (a, b)) in bar_t.iter_mut().zip(bt_f.iter().zip(&bt_c)) {
                *t = a + b;
            }
            let unit = &fw.units[k];
            let s = fw.supply[k];
            // flows = s·w; cost adds dt·s·Σ_bypass w.
            let mut bar_w: Vec<f64> = bar_flows.iter().map(|b| b * s).collect();
            let mut bar_s: f64 = bar_flows.iter().zip(&unit.flows).map(|(b, w)| b * w).sum();
            for &b in &self.model.bypass {
                bar_w[b] += cost_weight * dt * s;
                bar_s += cost_weight * dt * unit.flows[b];
            }
            let bar_root = if k == 0 {
                // s = sqrt(head / P_unit).
                -bar_s * s / (2.0 * unit.root_pressure)
            } else {
                grad[self.supply_var(k)] += bar_s * s;
                0.0
            };
            let bar_zeta = self.model.solver.unit_vjp(unit, &bar_w, bar_root);
            for (u, &e) in self.model.thermal.users().iter().enumerate() {
                grad[k * self.nu + u] += bar_zeta[e] * x[k * self.nu + u].exp();
            }
        }
        grad
    }
}

fn violation(c: &[f64]) -> f64 {
    c.iter().fold(0.0f64, |a, &v| a.max(v))
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| {
            let t = (x[i] - g[i]).clamp(lo[i], hi[i]);
            (t - x[i]).abs()
        })
        .fold(0.0, f64::max)
}

struct BoxResult {
    x: Vec<f64>,
    pg: f64,
}

/// Projected quasi-Newton descent on a box.
fn minimize_box<F>(mut fun: F, x0: &[f64], lo: &[f64], hi: &[f64], tol: f64, max_iter: usize) -> BoxResult
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let Some((mut f, mut g)) = fun(&x) else {
        return BoxResult { pg: f64::INFINITY, x };
    };
    let mut h = nalgebra::DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    for _ in 0..max_iter {
        let pg = projected_gradient_norm(&x, &g, lo, hi);
        if pg <= tol {
            return BoxResult { x, pg };
        }
        let eps = 1e-10;
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lo[i] + eps && g[i] > 0.0) || (x[i] >= hi[i] - eps && g[i] < 0.0))
            .collect();
        let mut d = vec![0.0; n];
        for i in 0..n {
            if active[i] {
                continue;
            }
            let mut acc = 0.0;
            for j in 0..n {
                if !active[j] {
                    acc -= h[(i, j)] * g[j];
                }
            }
            d[i] = acc;
        }
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            h = nalgebra::DMatrix::identity(n, n);
            fresh = true;
            for i in 0..n {
                d[i] = if active[i] { 0.0 } else { -g[i] };
            }
        }
        let dmax = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if fresh && dmax > 0.0 {
            // Unscaled steepest descent: take a unit step in the largest coordinate.
            d.iter_mut().for_each(|v| *v /= dmax);
        } else if dmax > 2.0 {
            d.iter_mut().for_each(|v| *v *= 2.0 / dmax);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            project(&mut xt, lo, hi);
            let decrease: f64 = g.iter().zip(xt.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if let Some((ft, gt)) = fun(&xt) {
                if ft <= f + 1e-4 * decrease && decrease < 0.0 {
                    accepted = Some((xt, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if fresh {
                break;
            }
            h = nalgebra::DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        if sy > 1e-12 * yy.max(1e-300).sqrt() * s.iter().map(|v| v * v).sum::<f64>().sqrt() && sy > 0.0 {
            if fresh {
                h *= sy / yy;
            }
            let sv = nalgebra::DVector::from_vec(s);
            let yv = nalgebra::DVector::from_vec(y);
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H ← H − ρ(s·(Hy)ᵀ + (Hy)·sᵀ) + (ρ²·yᵀHy + ρ)·s·sᵀ
            h -= (&sv * hy.transpose() + &hy * sv.transpose()) * rho;
            h += &sv * sv.transpose() * (rho * rho * yhy + rho);
            fresh = false;
        }
        x = xn;
        f = fnew;
        g = gnew;
    }
    let pg = projected_gradient_norm(&x, &g, lo, hi);
    BoxResult { x, pg }
}

/// Energy each user can receive on the first stage in the most and least
/// favourable valve configurations; used to reject candidates early.
fn stage_one_bounds(ev: &mut Evaluator, range: f64) -> Result<Vec<(f64, f64)>, HydraulicsError> {
    let nominal = ev.model.nominal_valves();
    let nu = ev.nu;
    let mut out = Vec::with_capacity(nu);
    for u in 0..nu {
        let mut open: Vec<f64> = nominal.iter().map(|z| (z * range).ln()).collect();
        open[u] = (nominal[u] / range).ln();
        let mut closed: Vec<f64> = nominal.iter().map(|z| (z / range).ln()).collect();
        closed[u] = (nominal[u] * range).ln();
        let mut e = [0.0; 2];
        for (slot, v) in [open, closed].into_iter().enumerate() {
            let mut x = v;
            // Only the first stage is simulated.
            x.resize(nu * ev.ns + ev.ns - 1, 0.0);
            let saved = ev.ns;
            ev.ns = 1;
            let fw = ev.forward(&x);
            ev.ns = saved;
            e[slot] = fw?.flex[0][u];
        }
        out.push((e[0], e[1]));
    }
    Ok(out)
}

/// Solve the problem for one candidate pressure drop.
pub fn solve_stage(
    model: &SubsystemModel,
    problem: &LocalProblem,
    head_pa: f64,
    warm: Option<&[f64]>,
) -> Result<LocalSolution, LowLevelError> {
    let nu = model.user_count();
    let ns = problem.grid.stages();
    if nu == 0 || ns == 0 {
        return Err(LowLevelError::Invalid("subsystem needs users and at least one stage".into()));
    }
    if problem.demand_j.len() < ns || problem.ambient_c.len() < ns {
        return Err(LowLevelError::Invalid("demand or ambient data shorter than the horizon".into()));
    }
    if !(head_pa > 0.0) {
        return Err(LowLevelError::Invalid(format!("pressure drop must be positive, got {head_pa}")));
    }
    let settings = &problem.settings;
    let range = settings.valve_range;
    let mut ev = Evaluator { model, problem, head: head_pa, nu, ns, evaluations: 0 };

    // Necessary conditions on the first stage.
    let bounds = stage_one_bounds(&mut ev, range)?;
    for u in 0..nu {
        let (lo, hi) = problem.limits(u);
        let c = problem.capacity_j_k[u];
        let (best, worst) = bounds[u];
        if best < lo - FEASIBILITY_TOL * c {
            return Err(LowLevelError::Infeasible { violation: (lo - best) / c });
        }
        if worst > hi + FEASIBILITY_TOL * c {
            return Err(LowLevelError::Infeasible { violation: (worst - hi) / c });
        }
    }

    let dim = nu * ns + ns - 1;
    let nominal = model.nominal_valves();
    let mut lo = vec![0.0; dim];
    let mut hi = vec![0.0; dim];
    for k in 0..ns {
        for u in 0..nu {
            lo[k * nu + u] = (nominal[u] / range).ln();
            hi[k * nu + u] = (nominal[u] * range).ln();
        }
    }
    for i in nu * ns..dim {
        lo[i] = SUPPLY_MIN.ln();
        hi[i] = SUPPLY_MAX.ln();
    }
    let mut x: Vec<f64> = match warm {
        Some(w) if w.len() == dim => w.to_vec(),
        _ => {
            let mut x0 = vec![0.0; dim];
            for k in 0..ns {
                for u in 0..nu {
                    x0[k * nu + u] = nominal[u].ln();
                }
            }
            let unit = model.solver.solve_unit(&model.zeta_with(&nominal))?;
            let s1 = (head_pa / unit.root_pressure).sqrt();
            for i in nu * ns..dim {
                x0[i] = s1.ln();
            }
            x0
        }
    };
    project(&mut x, &lo, &hi);

    let first = ev.forward(&x)?;
    let cost_scale = 1.0 / first.cost.max(1.0);
    let m = 2 * nu * ns;
    let mut lambda = vec![0.0; m];
    let mut mu = 10.0;
    let mut best_violation = f64::INFINITY;
    let mut stall = 0;
    let mut last_violation = violation(&ev.constraints(&first));
    let mut inner_tol = 1e-3;
    let mut kkt = f64::INFINITY;
    let mut viol = last_violation;
    let mut hydraulic_error = None;
    let mut last_cost = first.cost;
    let mut flat = 0;

    for _outer in 0..settings.max_outer_iterations {
        let lam = lambda.clone();
        let res = minimize_box(
            |xv: &[f64]| {
                let fw = match ev.forward(xv) {
                    Ok(fw) => fw,
                    Err(e) => {
                        hydraulic_error = Some(e);
                        return None;
                    }
                };
                let c = ev.constraints(&fw);
                let mut val = cost_scale * fw.cost;
                let mut w = vec![0.0; m];
                for i in 0..m {
                    let t = lam[i] + mu * c[i];
                    if t > 0.0 {
                        w[i] = t;
                        val += (t * t - lam[i] * lam[i]) / (2.0 * mu);
                    } else {
                        val -= lam[i] * lam[i] / (2.0 * mu);
                    }
                }
                let g = ev.backward(xv, &fw, cost_scale, &w);
                Some((val, g))
            },
            &x,
            &lo,
            &hi,
            inner_tol,
            settings.max_inner_iterations,
        );
        x = res.x;
        let fw = ev.forward(&x)?;
        let c = ev.constraints(&fw);
        viol = violation(&c);
        for i in 0..m {
            lambda[i] = (lambda[i] + mu * c[i]).max(0.0);
        }
        // Stationarity of the Lagrangian with the updated multipliers.
        let g = ev.backward(&x, &fw, cost_scale, &lambda);
        kkt = projected_gradient_norm(&x, &g, &lo, &hi);
        if viol <= FEASIBILITY_TOL && kkt <= KKT_TOL && res.pg <= KKT_TOL {
            break;
        }
        // Feasible and no longer improving: further outer iterations only
        // polish the multipliers.
        if viol <= FEASIBILITY_TOL && (fw.cost - last_cost).abs() <= STAGNATION_TOL * fw.cost.abs() {
            flat += 1;
            if flat >= 2 {
                break;
            }
        } else {
            flat = 0;
        }
        last_cost = fw.cost;
        if viol > 0.25 * last_violation && viol > FEASIBILITY_TOL {
            mu *= 10.0;
        }
        last_violation = viol;
        if viol > STALL_TOL {
            if viol < 0.9 * best_violation {
                best_violation = viol;
                stall = 0;
            } else {
                stall += 1;
                if stall >= 5 {
                    return Err(LowLevelError::Infeasible { violation: viol });
                }
            }
        }
        inner_tol = (inner_tol * 0.1).max(0.5 * KKT_TOL);
    }
    if let Some(e) = hydraulic_error.take() {
        log::debug!("hydraulic failure during line search: {e}");
    }
    if viol > STALL_TOL {
        return Err(LowLevelError::Infeasible { violation: viol });
    }
    if viol > FEASIBILITY_TOL {
        return Err(LowLevelError::MaxIterations { violation: viol, kkt });
    }
    let fw = ev.forward(&x)?;
    Ok(LocalSolution {
        head_pa,
        cost_kg: fw.cost,
        supply: fw.supply.clone(),
        valves: (0..ns).map(|k| ev.valves(&x, k)).collect(),
        flexibility: fw.flex.clone(),
        violation_k: viol,
        kkt_residual: kkt,
        converged: kkt <= KKT_TOL,
        evaluations: ev.evaluations,
        x,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CostEntry {
    pub head_pa: f64,
    pub feasible: bool,
    /// Bypass mass over the horizon, kg (feasible entries only).
    pub cost_kg: Option<f64>,
    /// First-stage supply flow, kg/s (feasible entries only).
    pub supply_flow: Option<f64>,
    pub status: String,
    #[serde(skip)]
    pub solution: Option<LocalSolution>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostTable {
    pub entries: Vec<CostEntry>,
}

impl CostTable {
    pub fn feasible_count(&self) -> usize {
        self.entries.iter().filter(|e| e.feasible).count()
    }

    pub fn solution(&self, i: usize) -> Option<&LocalSolution> {
        self.entries[i].solution.as_ref()
    }
}

pub fn entry_from(head: f64, r: Result<LocalSolution, LowLevelError>) -> CostEntry {
    match r {
        Ok(s) => CostEntry {
            head_pa: head,
            feasible: true,
            cost_kg: Some(s.cost_kg),
            supply_flow: Some(s.supply[0]),
            status: if s.converged { "optimal".into() } else { "feasible".into() },
            solution: Some(s),
        },
        Err(e) => CostEntry {
            head_pa: head,
            feasible: false,
            cost_kg: None,
            supply_flow: None,
            status: match e {
                LowLevelError::Infeasible { .. } => "infeasible".into(),
                LowLevelError::MaxIterations { .. } => "max_iterations".into(),
                other => format!("error: {other}"),
            },
            solution: None,
        },
    }
}

/// Solve every candidate. Candidates are processed in parallel chains
/// (one per worker-sized block); inside a chain each solve is warm-started
/// from the previous feasible neighbour, or from `warm` when given.
pub fn sweep_candidates(
    model: &SubsystemModel,
    problem: &LocalProblem,
    candidates: &[f64],
    warm: Option<&(dyn Fn(usize) -> Option<Vec<f64>> + Sync)>,
) -> CostTable {
    let entries: Vec<CostEntry> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, &head)| {
            let start = warm.and_then(|f| f(i));
            entry_from(head, solve_stage(model, problem, head, start.as_deref()))
        })
        .collect();
    CostTable { entries }
}

/// Replay a solution: cost from the hydraulics, flexibility from the
/// refined thermal integrator.
pub fn replay(
    model: &SubsystemModel,
    problem: &LocalProblem,
    sol: &LocalSolution,
    thermal_tol: f64,
) -> Result<(f64, Vec<Vec<f64>>), LowLevelError> {
    let mut temps = problem.initial_temperatures.clone();
    let mut flex = problem.initial_flex_j.clone();
    let mut cost = 0.0;
    let mut traj = Vec::new();
    let dt = problem.grid.interval_s;
    for k in 0..problem.grid.stages() {
        let zeta = model.zeta_with(&sol.valves[k]);
        let st = model.solver.given_supply(&zeta, sol.supply[k])?;
        cost += dt * model.bypass.iter().map(|&b| st.edge_flows[b]).sum::<f64>();
        let r = model
            .thermal
            .advance(&temps, &st.edge_flows, &problem.bc(k), dt, thermal_tol)
            .map_err(|e| LowLevelError::Invalid(e.to_string()))?;
        temps = r.temperatures;
        for u in 0..flex.len() {
            flex[u] += r.user_energy[u] - problem.demand_j[k][u];
        }
        traj.push(flex.clone());
    }
    Ok((cost, traj))
}
