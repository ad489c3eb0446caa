//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Built with `harness = false` so the lines always reach stdout. The
//! process exits non-zero when an asserted criterion fails. The supplied
//! mass ratio (6c) is reported on its own line and not asserted.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dhn_core::buildings::ENVELOPE_TOLERANCE;
use dhn_core::coordinator::{select_optimal, CoordinatorError, SelectionProblem};
use dhn_core::generator::{generate, GeneratorOptions};
use dhn_core::harness::{compare, local_problem_for, run_nominal, run_optimized, Hierarchy, Simulator};
use dhn_core::hydraulics::{residuals, FlowSolver};
use dhn_core::io::{max_equivalent_deviation, write_ledger, Ledger};
use dhn_core::lowlevel::{replay, sweep_candidates};
use dhn_core::network::{EdgeKind, NetworkGraph};
use dhn_core::partition::{fiedler_bipartition, ncut_value, recursive_partition, ReducedKind};
use dhn_core::thermal::{pipe_coefficients, BoundaryConditions, ThermalNetwork};
use nalgebra::DMatrix;
use rand::Rng;

const MASS_RESIDUAL: f64 = 1e-9;
const PRESSURE_RESIDUAL: f64 = 1e-6;
const SQRT_LAW: f64 = 1e-6;
const HYDRAULICS_BUDGET: Duration = Duration::from_secs(1);
const CLOSED_FORM: f64 = 1e-4;
const AUDIT: f64 = 1e-3;
const THERMAL_BUDGET: Duration = Duration::from_secs(5);
const NCUT_RATIO: f64 = 1.10;
const COORDINATOR_BUDGET: Duration = Duration::from_secs(10);
const REPLAY_COST: f64 = 0.01;
const BYPASS_REDUCTION_MIN: f64 = 0.30;
const DEVIATION_MAX_K: f64 = 2.0 + 1e-6;
const SUPPLY_RATIO: (f64, f64) = (0.95, 1.15);
const FULL_RUN_BUDGET: Duration = Duration::from_secs(30 * 60);
const ZERO_FLEX_AGREEMENT: f64 = 0.02;
/// Steps of the zero-flexibility comparison (one hour).
const ZERO_FLEX_STEPS: f64 = 6.0;

type Check = Result<String, String>;

fn bc() -> BoundaryConditions {
    BoundaryConditions { supply_c: 80.0, return_set_c: 50.0, ambient_c: -15.0 }
}

fn hydraulics() -> Check {
    let start = Instant::now();
    let (mut worst_mass, mut worst_pressure, mut worst_law) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20 {
        let g = common::random_tree_network(seed, 30);
        let z = g.nominal_zeta();
        let supply = 0.5 + seed as f64;
        let st = FlowSolver::new(&g).given_supply(z, supply).map_err(|e| e.to_string())?;
        let (mass, pressure) = residuals(&g, z, &st);
        worst_mass = worst_mass.max(mass / supply);
        worst_pressure = worst_pressure.max(pressure / st.node_pressures[g.root()]);
        for b in g.edges_of_kind(EdgeKind::Bypass) {
            let eb = g.edge(b);
            let pair = g.user_edges().into_iter().find(|&u| g.edge(u).tail == eb.tail && g.edge(u).head == eb.head);
            if let Some(u) = pair {
                let ratio = st.edge_flows[u] / st.edge_flows[b];
                worst_law = worst_law.max((ratio / (z[b] / z[u]).sqrt() - 1.0).abs());
            }
        }
    }
    let took = start.elapsed();
    let detail = format!(
        "mass {worst_mass:.1e} (<= {MASS_RESIDUAL:.0e}), pressure {worst_pressure:.1e} (<= {PRESSURE_RESIDUAL:.0e}), \
         sqrt law {worst_law:.1e} (<= {SQRT_LAW:.0e}), {took:.2?} (< {HYDRAULICS_BUDGET:?})"
    );
    let ok = worst_mass <= MASS_RESIDUAL && worst_pressure <= PRESSURE_RESIDUAL && worst_law <= SQRT_LAW && took < HYDRAULICS_BUDGET;
    if ok { Ok(detail) } else { Err(detail) }
}

fn thermal() -> Check {
    let start = Instant::now();
    let g = common::single_pipe(50.0, 0.2);
    let (c1, c2) = pipe_coefficients(&g.edge(0).attributes, g.fluid());
    let m = 0.5;
    let lam = c1 * m + c2;
    let t_ss = (c1 * m * 80.0 - c2 * 15.0) / lam;
    let t = 3.0 / lam;
    let exact = t_ss + (20.0 - t_ss) * (-lam * t).exp();
    let net = ThermalNetwork::new(&g);
    let r = net.advance(&[20.0], &[m], &bc(), t, 1e-9).map_err(|e| e.to_string())?;
    let closed = (r.temperatures[0] - exact).abs() / exact;

    let s = generate(&GeneratorOptions::default());
    let g = NetworkGraph::from_spec(&s.network).map_err(|e| e.to_string())?;
    let st = FlowSolver::new(&g).given_supply(g.nominal_zeta(), 8.0).map_err(|e| e.to_string())?;
    let net = ThermalNetwork::new(&g);
    let mut temps = net.uniform(60.0);
    let (mut plant, mut imbalance) = (0.0, 0.0);
    for _ in 0..144 {
        let r = net.advance(&temps, &st.edge_flows, &bc(), 600.0, 1e-4).map_err(|e| e.to_string())?;
        plant += r.audit.plant_in;
        imbalance += r.audit.imbalance();
        temps = r.temperatures;
    }
    let audit = imbalance.abs() / plant.abs();
    let took = start.elapsed();
    let detail = format!(
        "closed form {closed:.1e} (<= {CLOSED_FORM:.0e}), 24 h audit {audit:.1e} (<= {AUDIT:.0e}), {took:.2?} (< {THERMAL_BUDGET:?})"
    );
    if closed <= CLOSED_FORM && audit <= AUDIT && took < THERMAL_BUDGET { Ok(detail) } else { Err(detail) }
}

fn partitioner() -> Check {
    let mut graphs: Vec<DMatrix<f64>> = (2..=6).flat_map(common::all_connected_graphs).collect();
    graphs.extend(common::graph_families(12).into_iter().map(|(_, w)| w));
    graphs.extend(common::random_site_graphs(200, 12));
    let mut r = common::rng(11);
    for t in 0..200 {
        graphs.push(common::random_connected_graph(&mut r, 3 + t % 10, t % 6));
    }
    let mut worst = 0.0f64;
    for w in &graphs {
        let (a, _) = fiedler_bipartition(w).map_err(|e| e.to_string())?;
        worst = worst.max(ncut_value(w, &a) / common::exhaustive_min_ncut(w));
    }
    let mut closed = true;
    let mut counts = Vec::new();
    for seed in [1, 7, 42, 1234] {
        let s = generate(&GeneratorOptions { seed, ..Default::default() });
        let g = NetworkGraph::from_spec(&s.network).map_err(|e| e.to_string())?;
        let p = recursive_partition(&g, 5).map_err(|e| e.to_string())?;
        counts.push(p.subsystems.len());
        for sub in &p.subsystems {
            let ok = FlowSolver::new(&sub.graph)
                .given_supply(sub.graph.nominal_zeta(), 1.0)
                .map(|st| st.edge_flows.iter().all(|m| *m > 0.0))
                .unwrap_or(false);
            closed &= ok;
        }
    }
    let detail = format!(
        "{} graphs, worst Ncut ratio {worst:.4} (<= {NCUT_RATIO}), reference layouts give {counts:?} subsystems, closed {closed}",
        graphs.len()
    );
    if worst <= NCUT_RATIO && closed && counts.iter().all(|&c| c == 5) { Ok(detail) } else { Err(detail) }
}

fn coordinator() -> Check {
    let start = Instant::now();
    let graphs = common::reduced_graphs();
    let mut r = common::rng(5);
    let mut feasible = 0;
    for trial in 0..100 {
        let reduced = common::scaled_reduced(&graphs[trial % graphs.len()], [0.0, 1e-3, 1e-2, 1.0][r.gen_range(0..4)]);
        let n = reduced.edges.iter().filter(|e| matches!(e.kind, ReducedKind::Subsystem(_))).count();
        let p = SelectionProblem { reduced: &reduced, tables: common::random_tables(&mut r, n, 100_000), epsilon_pa: 0.1 };
        match (select_optimal(&p), common::brute_force(&p)) {
            (Ok(sel), Some((cost, choice))) => {
                if sel.total_cost_kg != cost || sel.choice != choice {
                    return Err(format!("trial {trial}: {} {:?} vs {cost} {choice:?}", sel.total_cost_kg, sel.choice));
                }
                let chosen: Vec<_> = sel
                    .choice
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| p.tables[j].iter().find(|c| c.index == i).copied().unwrap())
                    .collect();
                common::verify_balance(&reduced, &chosen, &sel, p.epsilon_pa).map_err(|e| format!("trial {trial}: {e}"))?;
                feasible += 1;
            }
            (Err(CoordinatorError::NoFeasibleSelection), None) => {}
            (a, b) => return Err(format!("trial {trial}: {a:?} vs {b:?}")),
        }
    }
    let took = start.elapsed();
    let detail = format!("100 problems ({feasible} feasible) match enumeration, {took:.2?} (< {COORDINATOR_BUDGET:?})");
    if took < COORDINATOR_BUDGET { Ok(detail) } else { Err(detail) }
}

fn low_level() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sc = common::reference_scenario(dir.path(), &GeneratorOptions { duration_s: 3600.0, ..Default::default() });
    let sim = Simulator::new(&sc);
    let h = Hierarchy::build(&sc).map_err(|e| e.to_string())?;
    let state = sim.initial_state().map_err(|e| e.to_string())?;
    let candidates = sc.config.candidates.values();
    let (mut solutions, mut worst, mut violations) = (0, 0.0f64, 0);
    for (j, model) in h.models.iter().enumerate() {
        let problem = local_problem_for(&sim, &h, j, &state, sc.config.t0_c);
        for e in &sweep_candidates(model, &problem, &candidates, None).entries {
            let Some(sol) = &e.solution else { continue };
            solutions += 1;
            let (cost, flex) = replay(model, &problem, sol, 1e-6).map_err(|e| e.to_string())?;
            worst = worst.max((cost - sol.cost_kg).abs() / sol.cost_kg);
            for stage in &flex {
                for (u, f) in stage.iter().enumerate() {
                    let slack = ENVELOPE_TOLERANCE * problem.capacity_j_k[u];
                    if *f < problem.lower_j[u] - slack || *f > problem.upper_j[u] + slack {
                        violations += 1;
                    }
                }
            }
        }
    }
    let detail =
        format!("{solutions} solutions, worst cost error {worst:.1e} (<= {REPLAY_COST}), {violations} envelope violations");
    if solutions > 0 && worst <= REPLAY_COST && violations == 0 { Ok(detail) } else { Err(detail) }
}

struct DayRun {
    dominance: Check,
    supply: Check,
}

fn full_day() -> Result<DayRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sc = common::reference_scenario(dir.path(), &GeneratorOptions::default());
    let start = Instant::now();
    let n = run_nominal(&sc).map_err(|e| e.to_string())?;
    let o = run_optimized(&sc).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let c = compare(&n, &o);
    let dev = max_equivalent_deviation(&o);
    let detail = format!(
        "{} steps, bypass {:.4e} -> {:.4e} kg, reduction {:.1}% (>= {:.0}%), max deviation {dev:.4} K (<= 2 K), {took:.0?} (<= 30 min)",
        o.steps.len(),
        c.nominal.bypass_mass_kg,
        c.optimized.bypass_mass_kg,
        100.0 * c.bypass_reduction,
        100.0 * BYPASS_REDUCTION_MIN,
    );
    let ok = o.steps.len() == sc.config.steps()
        && c.bypass_reduction >= BYPASS_REDUCTION_MIN
        && dev <= DEVIATION_MAX_K
        && took <= FULL_RUN_BUDGET;
    let supply = format!(
        "supplied mass {:.4e} -> {:.4e} kg, ratio {:.4} (expected in [{}, {}])",
        c.nominal.supply_mass_kg, c.optimized.supply_mass_kg, c.supply_ratio, SUPPLY_RATIO.0, SUPPLY_RATIO.1
    );
    let in_range = c.supply_ratio >= SUPPLY_RATIO.0 && c.supply_ratio <= SUPPLY_RATIO.1;
    Ok(DayRun {
        dominance: if ok { Ok(detail) } else { Err(detail) },
        supply: if in_range { Ok(supply) } else { Err(supply) },
    })
}

fn zero_flexibility() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = GeneratorOptions { comfort_band_k: 0.0, duration_s: ZERO_FLEX_STEPS * 600.0, ..Default::default() };
    let sc = common::reference_scenario(dir.path(), &opts);
    let n = run_nominal(&sc).map_err(|e| e.to_string())?;
    let o = run_optimized(&sc).map_err(|e| e.to_string())?;
    let (nb, ob) = (n.totals.bypass_mass_kg, o.totals.bypass_mass_kg);
    let gap = (ob - nb).abs() / nb;
    let detail = format!(
        "{} steps, bypass {nb:.4e} vs {ob:.4e} kg, gap {:.2}% (<= {:.0}%)",
        o.steps.len(),
        100.0 * gap,
        100.0 * ZERO_FLEX_AGREEMENT
    );
    if gap <= ZERO_FLEX_AGREEMENT { Ok(detail) } else { Err(detail) }
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = GeneratorOptions { duration_s: 1800.0, ..Default::default() };
    let mut bytes = Vec::new();
    for k in 0..2 {
        let sc = common::reference_scenario(&dir.path().join(format!("s{k}")), &opts);
        let o = run_optimized(&sc).map_err(|e| e.to_string())?;
        let out = dir.path().join(format!("run{k}"));
        let ledger = Ledger { config: &sc.config, buildings: &sc.buildings, run: &o, comparison: None, failure: None };
        write_ledger(&out, &ledger).map_err(|e| e.to_string())?;
        bytes.push(std::fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())?);
    }
    let detail = format!("metrics.csv {} and {} bytes", bytes[0].len(), bytes[1].len());
    if bytes[0] == bytes[1] { Ok(detail) } else { Err(format!("{detail}, contents differ")) }
}

fn report(id: &str, name: &str, check: &Check) -> bool {
    match check {
        Ok(d) => println!("PASS {id} {name}: {d}"),
        Err(d) => println!("FAIL {id} {name}: {d}"),
    }
    check.is_ok()
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report("1", "hydraulics", &hydraulics());
    ok &= report("2", "thermal", &thermal());
    ok &= report("3", "partitioner", &partitioner());
    ok &= report("4", "coordinator", &coordinator());
    ok &= report("5", "low-level replay", &low_level());
    match full_day() {
        Ok(day) => {
            ok &= report("6", "24 h dominance and safety", &day.dominance);
            // Reported, not asserted.
            report("6c", "supplied mass ratio", &day.supply);
        }
        Err(e) => ok &= report("6", "24 h dominance and safety", &Err(e)),
    }
    ok &= report("7", "zero flexibility", &zero_flexibility());
    ok &= report("8", "determinism", &determinism());
    if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
