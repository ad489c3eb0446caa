#![allow(dead_code)]

use dhn_core::coordinator::{feasibility_check, Candidate, SelectionProblem};
use dhn_core::generator::{generate, GeneratorOptions};
use dhn_core::network::{EdgeKind, EdgeSpec, FluidProperties, NetworkGraph, NetworkSpecFile, NodeSpec, PipeAttributes};
use dhn_core::partition::{ncut_value, recursive_partition, reduce_graph, ReducedGraph};
use dhn_core::scenario::Scenario;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random feed tree mirrored by a return tree; every leaf has a user and
/// a bypass in parallel, some inner nodes have a user too. At most
/// `max_edges` edges.
pub fn random_tree_network(seed: u64, max_edges: usize) -> NetworkGraph {
    let mut r = rng(seed);
    // Each extra feed node costs a feed and a return pipe plus up to a user
    // and a bypass.
    let max_nodes = (max_edges / 4).max(1);
    let inner = r.gen_range(1..=max_nodes);
    let mut parent = vec![usize::MAX];
    for i in 1..=inner {
        parent.push(r.gen_range(0..i));
    }
    let n = parent.len();
    let mut has_child = vec![false; n];
    for &p in &parent[1..] {
        has_child[p] = true;
    }
    let mut nodes = Vec::new();
    for i in 0..n {
        nodes.push(NodeSpec { id: format!("f{i}"), site: Some(format!("s{i}")) });
        nodes.push(NodeSpec { id: format!("r{i}"), site: Some(format!("s{i}")) });
    }
    let mut edges = Vec::new();
    let mut pipe = |r: &mut ChaCha8Rng, id: String, tail: String, head: String, kind: EdgeKind, len: (f64, f64)| {
        let attributes = PipeAttributes::new(r.gen_range(len.0..len.1), r.gen_range(0.15..0.40), 0.01, 1.5);
        edges.push(EdgeSpec { id, tail, head, kind, attributes });
    };
    for i in 1..n {
        let p = parent[i];
        pipe(&mut r, format!("fe{i}"), format!("f{p}"), format!("f{i}"), EdgeKind::Feed, (10.0, 100.0));
        pipe(&mut r, format!("re{i}"), format!("r{i}"), format!("r{p}"), EdgeKind::Return, (10.0, 100.0));
    }
    for i in 1..n {
        if !has_child[i] || r.gen_bool(0.5) {
            pipe(&mut r, format!("u{i}"), format!("f{i}"), format!("r{i}"), EdgeKind::User, (5.0, 20.0));
        }
        if !has_child[i] {
            pipe(&mut r, format!("b{i}"), format!("f{i}"), format!("r{i}"), EdgeKind::Bypass, (3.0, 3.0 + 1e-9));
        }
    }
    let spec = NetworkSpecFile {
        format: 1,
        fluid: FluidProperties::water(),
        root: "f0".into(),
        terminal: "r0".into(),
        nodes,
        edges,
    };
    NetworkGraph::from_spec(&spec).expect("random tree is valid")
}

/// Smallest normalized cut over all two-way splits.
pub fn exhaustive_min_ncut(w: &DMatrix<f64>) -> f64 {
    let n = w.nrows();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << (n - 1)) {
        // Node n-1 always on side B.
        let a: Vec<usize> = (0..n - 1).filter(|&i| mask & (1 << i) != 0).collect();
        best = best.min(ncut_value(w, &a));
    }
    best
}

/// Connected weighted graph on `n` nodes: a random spanning tree plus
/// extra edges.
pub fn random_connected_graph(r: &mut ChaCha8Rng, n: usize, extra: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(n, n);
    for i in 1..n {
        let j = r.gen_range(0..i);
        let x = r.gen_range(0.1..10.0);
        w[(i, j)] = x;
        w[(j, i)] = x;
    }
    for _ in 0..extra {
        let i = r.gen_range(0..n);
        let j = r.gen_range(0..n);
        if i != j {
            let x = r.gen_range(0.1..10.0);
            w[(i, j)] = x;
            w[(j, i)] = x;
        }
    }
    w
}

/// Reduced graphs of partitioned generated networks.
pub fn reduced_graphs() -> Vec<ReducedGraph> {
    let mut out = Vec::new();
    for (seed, users, groups) in [(1, 6, 2), (2, 10, 3), (3, 14, 4), (7, 18, 5)] {
        let s = generate(&GeneratorOptions { seed, users, ..Default::default() });
        let g = NetworkGraph::from_spec(&s.network).unwrap();
        let p = recursive_partition(&g, groups).unwrap();
        out.push(reduce_graph(&g, &p));
    }
    out
}

/// Random candidate tables on one reduced graph. Heads come from a short
/// shared ladder so that balanced selections exist in many instances.
pub fn random_tables(r: &mut ChaCha8Rng, subsystems: usize, max_combinations: usize) -> Vec<Vec<Candidate>> {
    let per = ((max_combinations as f64).powf(1.0 / subsystems as f64).floor() as usize).clamp(1, 12);
    (0..subsystems)
        .map(|_| {
            let count = r.gen_range(1..=per);
            (0..count)
                .map(|i| {
                    let head = 0.5 * 1.5f64.powi(r.gen_range(0..10));
                    Candidate {
                        index: i,
                        head_pa: head,
                        cost_kg: r.gen_range(0.0..100.0f64).round(),
                        supply_flow: r.gen_range(0.05..2.0),
                    }
                })
                .collect()
        })
        .collect()
}

/// Cheapest balanced selection by enumerating every combination; ties go
/// to the lexicographically smallest index vector.
pub fn brute_force(p: &SelectionProblem) -> Option<(f64, Vec<usize>)> {
    let sizes: Vec<usize> = p.tables.iter().map(Vec::len).collect();
    let mut pos = vec![0usize; sizes.len()];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let chosen: Vec<Candidate> = pos.iter().enumerate().map(|(j, &i)| p.tables[j][i]).collect();
        if feasibility_check(p, &chosen).unwrap().is_some() {
            let cost: f64 = chosen.iter().map(|c| c.cost_kg).sum();
            let idx: Vec<usize> = chosen.iter().map(|c| c.index).collect();
            let better = match &best {
                None => true,
                Some((bc, bi)) => cost < *bc || (cost == *bc && idx < *bi),
            };
            if better {
                best = Some((cost, idx));
            }
        }
        let mut j = 0;
        loop {
            if j == pos.len() {
                return best;
            }
            pos[j] += 1;
            if pos[j] < sizes[j] {
                break;
            }
            pos[j] = 0;
            j += 1;
        }
    }
}

/// Generated reference scenario loaded back from disk.
pub fn reference_scenario(dir: &std::path::Path, opts: &GeneratorOptions) -> Scenario {
    let path = generate(opts).write(dir).unwrap();
    Scenario::load(path).unwrap()
}

/// A single feed pipe from plant to return header.
pub fn single_pipe(length_m: f64, diameter_m: f64) -> NetworkGraph {
    let spec = NetworkSpecFile {
        format: 1,
        fluid: FluidProperties::water(),
        root: "r".into(),
        terminal: "t".into(),
        nodes: vec![NodeSpec { id: "r".into(), site: None }, NodeSpec { id: "t".into(), site: None }],
        edges: vec![EdgeSpec {
            id: "p".into(),
            tail: "r".into(),
            head: "t".into(),
            kind: EdgeKind::Feed,
            attributes: PipeAttributes::new(length_m, diameter_m, 0.01, 1.5),
        }],
    };
    NetworkGraph::from_spec(&spec).unwrap()
}

/// Every connected simple graph on `n` labelled nodes, unit weights.
pub fn all_connected_graphs(n: usize) -> Vec<DMatrix<f64>> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut out = Vec::new();
    for mask in 0u64..(1 << pairs.len()) {
        let mut w = DMatrix::zeros(n, n);
        for (k, &(i, j)) in pairs.iter().enumerate() {
            if mask & (1 << k) != 0 {
                w[(i, j)] = 1.0;
                w[(j, i)] = 1.0;
            }
        }
        if connected(&w) {
            out.push(w);
        }
    }
    out
}

pub fn connected(w: &DMatrix<f64>) -> bool {
    let n = w.nrows();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for u in 0..n {
            if w[(v, u)] > 0.0 && !seen[u] {
                seen[u] = true;
                stack.push(u);
            }
        }
    }
    seen.iter().all(|&s| s)
}

/// Paths, cycles, stars, ladders, grids, barbells and complete graphs with
/// up to `max_n` nodes.
pub fn graph_families(max_n: usize) -> Vec<(String, DMatrix<f64>)> {
    let edge = |w: &mut DMatrix<f64>, i: usize, j: usize| {
        w[(i, j)] = 1.0;
        w[(j, i)] = 1.0;
    };
    let mut out = Vec::new();
    for n in 2..=max_n {
        let mut w = DMatrix::zeros(n, n);
        (1..n).for_each(|i| edge(&mut w, i - 1, i));
        out.push((format!("path{n}"), w.clone()));
        if n >= 3 {
            edge(&mut w, 0, n - 1);
            out.push((format!("cycle{n}"), w));
        }
        let mut w = DMatrix::zeros(n, n);
        (1..n).for_each(|i| edge(&mut w, 0, i));
        out.push((format!("star{n}"), w));
        let mut w = DMatrix::zeros(n, n);
        (0..n).for_each(|i| (i + 1..n).for_each(|j| edge(&mut w, i, j)));
        out.push((format!("complete{n}"), w));
        if n % 2 == 0 && n >= 4 {
            let h = n / 2;
            let mut w = DMatrix::zeros(n, n);
            for i in 0..h {
                edge(&mut w, i, i + h);
                if i + 1 < h {
                    edge(&mut w, i, i + 1);
                    edge(&mut w, i + h, i + 1 + h);
                }
            }
            out.push((format!("ladder{n}"), w));
        }
        if n % 2 == 0 && n >= 6 {
            let h = n / 2;
            let mut w = DMatrix::zeros(n, n);
            (0..h).for_each(|i| (i + 1..h).for_each(|j| edge(&mut w, i, j)));
            (h..n).for_each(|i| (i + 1..n).for_each(|j| edge(&mut w, i, j)));
            edge(&mut w, h - 1, h);
            out.push((format!("barbell{n}"), w));
        }
    }
    for (r, c) in [(2, 3), (3, 3), (3, 4), (2, 6)] {
        let n = r * c;
        let mut w = DMatrix::zeros(n, n);
        for i in 0..r {
            for j in 0..c {
                if j + 1 < c {
                    edge(&mut w, i * c + j, i * c + j + 1);
                }
                if i + 1 < r {
                    edge(&mut w, i * c + j, (i + 1) * c + j);
                }
            }
        }
        out.push((format!("grid{r}x{c}"), w));
    }
    out
}

/// Site graphs of random supply trees: weights are pipe conductances.
pub fn random_site_graphs(count: usize, max_n: usize) -> Vec<DMatrix<f64>> {
    (0..count as u64)
        .filter_map(|seed| {
            let g = random_tree_network(seed, 4 * (max_n - 1));
            let w = dhn_core::partition::site_adjacency(&g);
            (w.nrows() >= 2 && w.nrows() <= max_n).then_some(w)
        })
        .collect()
}

/// Independent check of a returned selection: flow conservation at every
/// reduced node, subsystem drops within `ε` of their heads and pass-through
/// drops equal to their friction loss.
pub fn verify_balance(r: &ReducedGraph, chosen: &[Candidate], sel: &dhn_core::coordinator::Selection, eps: f64) -> Result<(), String> {
    use dhn_core::partition::ReducedKind;
    let mut net = vec![0.0; r.nodes.len()];
    for (k, e) in r.edges.iter().enumerate() {
        net[e.tail] += sel.edge_flows[k];
        net[e.head] -= sel.edge_flows[k];
    }
    net[r.root] -= sel.total_supply;
    net[r.terminal] += sel.total_supply;
    let scale = sel.total_supply.max(1.0);
    if let Some(v) = net.iter().find(|v| v.abs() > 1e-6 * scale) {
        return Err(format!("mass residual {v}"));
    }
    let p = &sel.node_pressures;
    let ptol = 1e-7 * p.iter().fold(1.0f64, |a, b| a.max(b.abs()));
    for (k, e) in r.edges.iter().enumerate() {
        let drop = p[e.tail] - p[e.head];
        match e.kind {
            ReducedKind::Subsystem(j) => {
                if (sel.edge_flows[k] - chosen[j].supply_flow).abs() > 1e-9 * scale {
                    return Err(format!("subsystem {j} flow differs from its candidate"));
                }
                if (drop - chosen[j].head_pa).abs() > eps + ptol {
                    return Err(format!("subsystem {j}: drop {drop} vs head {}", chosen[j].head_pa));
                }
            }
            ReducedKind::PassThrough(_) => {
                let m = sel.edge_flows[k];
                let z = e.zeta.unwrap_or(0.0);
                if (drop - z * m * m.abs()).abs() > ptol {
                    return Err(format!("pass-through edge {k}: drop {drop} vs loss {}", z * m * m.abs()));
                }
            }
        }
    }
    Ok(())
}

/// Copy of a reduced graph with pass-through loss coefficients scaled.
pub fn scaled_reduced(r: &ReducedGraph, factor: f64) -> ReducedGraph {
    let mut out = r.clone();
    for e in &mut out.edges {
        e.zeta = e.zeta.map(|z| z * factor);
    }
    out
}
