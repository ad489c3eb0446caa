//! Spectral partitioning into hydraulically closed subsystems.
//!
//! Feed and return nodes that share a site are contracted before the
//! spectral step, so a route's feed and return pipes always end up on the
//! same side. Users are grouped by recursive normalized-cut bisection of
//! the site graph; each pipe is then owned by the groups whose users draw
//! flow through it. Pipes shared by several groups become pass-through
//! connectors in the reduced graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::network::{EdgeKind, NetworkError, NetworkGraph};

const DENSE_LIMIT: usize = 64;
/// Leading nontrivial eigenvectors used as starting points, beyond any
/// degenerate Fiedler eigenspace.
const EXTRA_STARTS: usize = 3;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("node {0} has zero weighted degree")]
    IsolatedNode(usize),
    #[error("eigensolver failed: {0}")]
    EigensolverFailure(String),
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Symmetric node-pair weights `1/(ρV)` summed over connecting pipes.
pub fn undirected_weighted_adjacency(g: &NetworkGraph) -> DMatrix<f64> {
    let n = g.node_count();
    let mut w = DMatrix::zeros(n, n);
    let rho = g.fluid().density_kg_m3;
    for e in g.edges() {
        let k = 1.0 / (rho * e.attributes.volume());
        w[(e.tail, e.head)] += k;
        w[(e.head, e.tail)] += k;
    }
    w
}

/// Same weights with feed/return twins contracted to their shared site.
/// Pipes inside one site (users, bypasses) become self-loops and are dropped.
pub fn site_adjacency(g: &NetworkGraph) -> DMatrix<f64> {
    let n = g.site_count();
    let mut w = DMatrix::zeros(n, n);
    let rho = g.fluid().density_kg_m3;
    for e in g.edges() {
        let (a, b) = (g.site_of(e.tail), g.site_of(e.head));
        if a == b {
            continue;
        }
        let k = 1.0 / (rho * e.attributes.volume());
        w[(a, b)] += k;
        w[(b, a)] += k;
    }
    w
}

fn degrees(w: &DMatrix<f64>) -> Result<Vec<f64>, PartitionError> {
    let d: Vec<f64> = (0..w.nrows()).map(|i| w.row(i).sum()).collect();
    if let Some(i) = d.iter().position(|x| !(*x > 0.0)) {
        return Err(PartitionError::IsolatedNode(i));
    }
    Ok(d)
}

/// `I − D^{-1/2} W D^{-1/2}`.
pub fn normalized_laplacian(w: &DMatrix<f64>) -> Result<DMatrix<f64>, PartitionError> {
    let d = degrees(w)?;
    let n = w.nrows();
    let mut l = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            if w[(i, j)] != 0.0 {
                l[(i, j)] -= w[(i, j)] / (d[i] * d[j]).sqrt();
            }
        }
    }
    Ok(l)
}

/// Normalized-cut value of a two-way split.
pub fn ncut_value(w: &DMatrix<f64>, side_a: &[usize]) -> f64 {
    let n = w.nrows();
    let mut in_a = vec![false; n];
    for &i in side_a {
        in_a[i] = true;
    }
    let (mut cut, mut assoc_a, mut assoc_b) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let x = w[(i, j)];
            if in_a[i] {
                assoc_a += x;
            } else {
                assoc_b += x;
            }
            if in_a[i] && !in_a[j] {
                cut += x;
            }
        }
    }
    let term = |assoc: f64| if assoc > 0.0 { cut / assoc } else { 0.0 };
    term(assoc_a) + term(assoc_b)
}

/// Eigenvector of the second-smallest eigenvalue of `l`, with its eigenvalue.
pub fn fiedler_vector(l: &DMatrix<f64>, degrees_sqrt: &[f64]) -> Result<(f64, Vec<f64>), PartitionError> {
    let n = l.nrows();
    if n < 2 {
        return Err(PartitionError::EigensolverFailure("need at least two nodes".into()));
    }
    if n < DENSE_LIMIT {
        let eig = SymmetricEigen::new(l.clone());
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let k = idx[1];
        return Ok((eig.eigenvalues[k], eig.eigenvectors.column(k).iter().cloned().collect()));
    }
    // Inverse iteration on L with the known kernel vector shifted away.
    let v0 = DVector::from_column_slice(degrees_sqrt);
    let v0 = &v0 / v0.norm();
    let m = l + &v0 * v0.transpose() * 2.0;
    let chol = m
        .cholesky()
        .ok_or_else(|| PartitionError::EigensolverFailure("shifted Laplacian is not definite".into()))?;
    let mut x = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_75).fract());
    x -= &v0 * v0.dot(&x);
    x /= x.norm();
    let mut lambda = f64::INFINITY;
    for _ in 0..5000 {
        let mut y = chol.solve(&x);
        y -= &v0 * v0.dot(&y);
        let ny = y.norm();
        if !(ny > 0.0) {
            return Err(PartitionError::EigensolverFailure("inverse iteration collapsed".into()));
        }
        y /= ny;
        let next = (y.transpose() * l * &y)[(0, 0)];
        let resid = (l * &y - &y * next).norm();
        x = y;
        if (next - lambda).abs() <= 1e-14 * next.abs().max(1e-300) || resid < 1e-10 {
            return Ok((next, x.iter().cloned().collect()));
        }
        lambda = next;
    }
    Err(PartitionError::EigensolverFailure("inverse iteration did not converge".into()))
}

/// Two-way split driven by the Fiedler vector: the threshold cut with the
/// smallest Ncut along the leading eigenvectors, each refined by
/// node moves, keeping the best. Side A always contains
/// node 0.
pub fn fiedler_bipartition(w: &DMatrix<f64>) -> Result<(Vec<usize>, Vec<usize>), PartitionError> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for x in fiedler_space(w)? {
        if let Some((_, a, _)) = sweep_splits(w, &x).into_iter().next() {
            let a = refine_split(w, a);
            let q = ncut_value(w, &a);
            if best.as_ref().is_none_or(|(b, _)| q < *b - 1e-12 * b.abs()) {
                best = Some((q, a));
            }
        }
    }
    let (_, a) = best.ok_or_else(|| PartitionError::EigensolverFailure("need at least two nodes".into()))?;
    Ok(oriented(w.nrows(), a))
}

/// Sign split of the Fiedler vector. Side A always contains node 0;
/// entries that are numerically zero join side A.
pub fn fiedler_sign_split(w: &DMatrix<f64>) -> Result<(Vec<usize>, Vec<usize>), PartitionError> {
    let x = fiedler_of(w)?;
    Ok(sign_split(&x))
}

/// Cut indicators `D^{-1/2} v` of the Fiedler eigenspace and the next
/// few eigenvectors. Large graphs use the single Fiedler vector from
/// inverse iteration.
fn fiedler_space(w: &DMatrix<f64>) -> Result<Vec<Vec<f64>>, PartitionError> {
    let n = w.nrows();
    if n >= DENSE_LIMIT || n < 3 {
        return Ok(vec![fiedler_of(w)?]);
    }
    let d = degrees(w)?;
    let l = normalized_laplacian(w)?;
    let eig = SymmetricEigen::new(l);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let l2 = eig.eigenvalues[idx[1]];
    let tol = 1e-9 * l2.abs().max(1.0);
    Ok(idx[1..]
        .iter()
        .enumerate()
        .take_while(|&(i, &k)| i < EXTRA_STARTS || eig.eigenvalues[k] - l2 <= tol)
        .map(|(_, &k)| k)
        .map(|k| eig.eigenvectors.column(k).iter().zip(&d).map(|(v, di)| v / di.sqrt()).collect())
        .collect())
}

/// Fiduccia-Mattheyses passes: every node moves once per pass, best move
/// first even when it raises the Ncut, and the best prefix of the pass is
/// kept. Passes repeat while they improve. Both sides stay non-empty;
/// ties go to the lowest node index.
fn refine_split(w: &DMatrix<f64>, side_a: Vec<usize>) -> Vec<usize> {
    let n = w.nrows();
    let mut in_a = vec![false; n];
    side_a.iter().for_each(|&i| in_a[i] = true);
    let members = |in_a: &[bool]| (0..n).filter(|&i| in_a[i]).collect::<Vec<_>>();
    let mut current = ncut_value(w, &side_a);
    loop {
        let mut trial = in_a.clone();
        let mut locked = vec![false; n];
        let mut best_q = current;
        let mut best_len = 0;
        let mut moves = Vec::new();
        for _ in 0..n {
            let size_a = trial.iter().filter(|&&x| x).count();
            let mut pick: Option<(f64, usize)> = None;
            for v in (0..n).filter(|&v| !locked[v]) {
                if (trial[v] && size_a == 1) || (!trial[v] && size_a == n - 1) {
                    continue;
                }
                trial[v] = !trial[v];
                let q = ncut_value(w, &members(&trial));
                trial[v] = !trial[v];
                if pick.is_none_or(|(b, _)| q < b) {
                    pick = Some((q, v));
                }
            }
            let Some((q, v)) = pick else { break };
            trial[v] = !trial[v];
            locked[v] = true;
            moves.push(v);
            if q < best_q - 1e-12 * best_q.abs() {
                best_q = q;
                best_len = moves.len();
            }
        }
        if best_len == 0 {
            return members(&in_a);
        }
        for &v in &moves[..best_len] {
            in_a[v] = !in_a[v];
        }
        current = best_q;
    }
}

fn oriented(n: usize, a: Vec<usize>) -> (Vec<usize>, Vec<usize>) {
    let b: Vec<usize> = (0..n).filter(|i| !a.contains(i)).collect();
    if a.contains(&0) { (a, b) } else { (b, a) }
}

fn fiedler_of(w: &DMatrix<f64>) -> Result<Vec<f64>, PartitionError> {
    let d = degrees(w)?;
    let l = normalized_laplacian(w)?;
    let ds: Vec<f64> = d.iter().map(|x| x.sqrt()).collect();
    let (_, v) = fiedler_vector(&l, &ds)?;
    // Cut indicator lives in D^{-1/2} v.
    let mut x: Vec<f64> = v.iter().zip(&ds).map(|(a, b)| a / b).collect();
    let scale = x.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let zero = 1e-10 * scale;
    let first = x.iter().position(|v| v.abs() > zero).unwrap_or(0);
    let flip = if x[0].abs() > zero { x[0] < 0.0 } else { x[first] < 0.0 };
    if flip {
        x.iter_mut().for_each(|v| *v = -*v);
    }
    for v in x.iter_mut() {
        if v.abs() <= zero {
            *v = 0.0;
        }
    }
    Ok(x)
}

fn sign_split(x: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let a: Vec<usize> = (0..x.len()).filter(|&i| x[i] >= 0.0).collect();
    let b: Vec<usize> = (0..x.len()).filter(|&i| x[i] < 0.0).collect();
    (a, b)
}

/// All threshold splits along the Fiedler ordering, best Ncut first.
fn sweep_splits(w: &DMatrix<f64>, x: &[f64]) -> Vec<(f64, Vec<usize>, Vec<usize>)> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut out = Vec::new();
    for k in 1..order.len() {
        let mut a: Vec<usize> = order[..k].to_vec();
        let mut b: Vec<usize> = order[k..].to_vec();
        a.sort_unstable();
        b.sort_unstable();
        out.push((ncut_value(w, &a), a, b));
    }
    out.sort_by(|p, q| p.0.total_cmp(&q.0));
    out
}

// ---------------------------------------------------------------------------
// Subsystems

/// One hydraulically closed part of the network that contains users.
#[derive(Debug, Clone)]
pub struct Subsystem {
    /// Global edge ids, ascending.
    pub edges: Vec<usize>,
    /// Global node ids of the local root and terminal.
    pub root: usize,
    pub terminal: usize,
    /// Global ids of the user edges.
    pub users: Vec<usize>,
    /// Local graph; its edge `k` is global edge `edges[k]`.
    pub graph: NetworkGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "type", content = "index", rename_all = "snake_case")]
pub enum Assignment {
    Subsystem(usize),
    PassThrough(usize),
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub subsystems: Vec<Subsystem>,
    /// Global edge ids of pass-through pipes.
    pub pass_through: Vec<usize>,
    pub assignment: Vec<Assignment>,
    /// Edges whose endpoints fell into different spectral groups.
    pub cut_edges: Vec<usize>,
}

/// Edges on any directed path from the root to `v` (upstream) or from `v`
/// to the terminal (downstream).
fn upstream_edges(g: &NetworkGraph, v: usize) -> Vec<usize> {
    let mut seen = vec![false; g.node_count()];
    let mut out = Vec::new();
    let mut stack = vec![v];
    seen[v] = true;
    while let Some(x) = stack.pop() {
        for &e in g.in_edges(x) {
            out.push(e);
            let t = g.edge(e).tail;
            if !seen[t] {
                seen[t] = true;
                stack.push(t);
            }
        }
    }
    out
}

fn downstream_edges(g: &NetworkGraph, v: usize) -> Vec<usize> {
    let mut seen = vec![false; g.node_count()];
    let mut out = Vec::new();
    let mut stack = vec![v];
    seen[v] = true;
    while let Some(x) = stack.pop() {
        for &e in g.out_edges(x) {
            out.push(e);
            let h = g.edge(e).head;
            if !seen[h] {
                seen[h] = true;
                stack.push(h);
            }
        }
    }
    out
}

/// Build subsystems from a user → group map.
pub fn partition_from_groups(g: &NetworkGraph, user_group: &BTreeMap<usize, usize>) -> Result<Partition, PartitionError> {
    let m = g.edge_count();
    let mut owners: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); m];
    for (&u, &grp) in user_group {
        let e = g.edge(u);
        owners[u].insert(grp);
        for x in upstream_edges(g, e.tail).into_iter().chain(downstream_edges(g, e.head)) {
            owners[x].insert(grp);
        }
    }
    // Pipes that carry no user's flow inherit the owners of their feeding pipes.
    for &v in g.topological_nodes() {
        for &e in g.out_edges(v) {
            if owners[e].is_empty() {
                let mut inherit = BTreeSet::new();
                for &i in g.in_edges(v) {
                    inherit.extend(owners[i].iter().copied());
                }
                owners[e] = inherit;
            }
        }
    }

    let mut group_edges: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut pass_through = Vec::new();
    for (e, o) in owners.iter().enumerate() {
        if o.len() == 1 {
            group_edges.entry(*o.iter().next().unwrap()).or_default().push(e);
        } else {
            pass_through.push(e);
        }
    }

    let mut subsystems = Vec::new();
    for (grp, edges) in group_edges {
        for comp in weak_components(g, &edges) {
            let sub = closed_subsystem(g, &comp).map_err(|reason| {
                PartitionError::InfeasiblePartition(format!("group {grp}: {reason}"))
            })?;
            subsystems.push(sub);
        }
    }
    // Components without users carry no decision and become pass-through pipes.
    let (with_users, without): (Vec<_>, Vec<_>) = subsystems.into_iter().partition(|s| !s.users.is_empty());
    for s in without {
        pass_through.extend(s.edges);
    }
    pass_through.sort_unstable();
    let mut subsystems = with_users;
    subsystems.sort_by_key(|s| s.edges[0]);

    let mut assignment = vec![Assignment::PassThrough(0); m];
    for (j, s) in subsystems.iter().enumerate() {
        for &e in &s.edges {
            assignment[e] = Assignment::Subsystem(j);
        }
    }
    for (j, &e) in pass_through.iter().enumerate() {
        assignment[e] = Assignment::PassThrough(j);
    }
    let cut_edges = Vec::new();
    Ok(Partition { subsystems, pass_through, assignment, cut_edges })
}

fn weak_components(g: &NetworkGraph, edges: &[usize]) -> Vec<Vec<usize>> {
    let mut parent: BTreeMap<usize, usize> = BTreeMap::new();
    fn find(p: &mut BTreeMap<usize, usize>, x: usize) -> usize {
        let px = *p.entry(x).or_insert(x);
        if px == x {
            x
        } else {
            let r = find(p, px);
            p.insert(x, r);
            r
        }
    }
    for &e in edges {
        let (a, b) = (g.edge(e).tail, g.edge(e).head);
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent.insert(ra.max(rb), ra.min(rb));
        }
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &e in edges {
        let r = find(&mut parent, g.edge(e).tail);
        comps.entry(r).or_default().push(e);
    }
    let mut out: Vec<Vec<usize>> = comps.into_values().collect();
    out.sort_by_key(|c| c[0]);
    out
}

fn closed_subsystem(g: &NetworkGraph, edges: &[usize]) -> Result<Subsystem, String> {
    let inside: BTreeSet<usize> = edges.iter().copied().collect();
    let nodes: BTreeSet<usize> = edges.iter().flat_map(|&e| [g.edge(e).tail, g.edge(e).head]).collect();
    let mut entries = Vec::new();
    let mut exits = Vec::new();
    for &v in &nodes {
        let ins_in = g.in_edges(v).iter().filter(|e| inside.contains(e)).count();
        let outs_in = g.out_edges(v).iter().filter(|e| inside.contains(e)).count();
        let ins_out = g.in_edges(v).len() - ins_in;
        let outs_out = g.out_edges(v).len() - outs_in;
        let boundary = ins_out + outs_out > 0 || v == g.root() || v == g.terminal();
        if !boundary {
            continue;
        }
        if ins_in == 0 && outs_in > 0 {
            entries.push(v);
        } else if outs_in == 0 && ins_in > 0 {
            exits.push(v);
        } else {
            return Err(format!("node `{}` exchanges flow with the outside mid-route", g.node_name(v)));
        }
    }
    if entries.len() != 1 || exits.len() != 1 {
        return Err(format!("{} entry and {} exit nodes", entries.len(), exits.len()));
    }
    let (root, terminal) = (entries[0], exits[0]);
    let graph = g.subgraph(edges, root, terminal).map_err(|e| e.to_string())?;
    let users = edges.iter().copied().filter(|&e| g.edge(e).kind == EdgeKind::User).collect();
    Ok(Subsystem { edges: edges.to_vec(), root, terminal, users, graph })
}

/// Sites hosting each user (by the user's tail node).
fn user_sites(g: &NetworkGraph) -> BTreeMap<usize, usize> {
    g.user_edges().into_iter().map(|u| (u, g.site_of(g.edge(u).tail))).collect()
}

fn induced(w: &DMatrix<f64>, nodes: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(nodes.len(), nodes.len(), |i, j| w[(nodes[i], nodes[j])])
}

fn components_of(w: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = w.nrows();
    let mut comp = vec![usize::MAX; n];
    let mut out = Vec::new();
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut members = vec![s];
        comp[s] = id;
        let mut q = VecDeque::from([s]);
        while let Some(v) = q.pop_front() {
            for u in 0..n {
                if w[(v, u)] > 0.0 && comp[u] == usize::MAX {
                    comp[u] = id;
                    members.push(u);
                    q.push_back(u);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Recursively bisect the site graph until `n_groups` user-bearing groups
/// exist, then build closed subsystems.
pub fn recursive_partition(g: &NetworkGraph, n_groups: usize) -> Result<Partition, PartitionError> {
    let users = user_sites(g);
    if n_groups == 0 {
        return Err(PartitionError::InfeasiblePartition("at least one subsystem is required".into()));
    }
    let w = site_adjacency(g);
    let count_users = |sites: &[usize]| users.values().filter(|s| sites.contains(s)).count();
    // Site groups that host at least one user.
    let all_sites: Vec<usize> = (0..g.site_count()).collect();
    let mut groups: Vec<Vec<usize>> = vec![all_sites];

    let to_user_map = |groups: &[Vec<usize>]| {
        let mut map = BTreeMap::new();
        for (k, grp) in groups.iter().enumerate() {
            for (&u, s) in &users {
                if grp.contains(s) {
                    map.insert(u, k);
                }
            }
        }
        map
    };

    loop {
        let current = partition_from_groups(g, &to_user_map(&groups))?;
        if current.subsystems.len() >= n_groups {
            if current.subsystems.len() > n_groups {
                return Err(PartitionError::InfeasiblePartition(format!(
                    "grouping produced {} closed subsystems, more than the requested {n_groups}",
                    current.subsystems.len()
                )));
            }
            let mut site_group = vec![usize::MAX; g.site_count()];
            for (k, grp) in groups.iter().enumerate() {
                for &s in grp {
                    site_group[s] = k;
                }
            }
            let mut current = current;
            current.cut_edges = (0..g.edge_count())
                .filter(|&e| site_group[g.site_of(g.edge(e).tail)] != site_group[g.site_of(g.edge(e).head)])
                .collect();
            return Ok(current);
        }
        // Largest group by user count; ties go to the lower index.
        let mut order: Vec<usize> = (0..groups.len()).filter(|&k| count_users(&groups[k]) >= 2).collect();
        order.sort_by(|&a, &b| count_users(&groups[b]).cmp(&count_users(&groups[a])).then(a.cmp(&b)));
        let mut progressed = false;
        for k in order {
            let sites = groups[k].clone();
            let sub = induced(&w, &sites);
            let comps = components_of(&sub);
            let candidates: Vec<(Vec<usize>, Vec<usize>)> = if comps.len() > 1 {
                let a = comps[0].clone();
                let b: Vec<usize> = comps[1..].iter().flatten().copied().collect();
                vec![(a, b)]
            } else {
                let x = fiedler_of(&sub)?;
                let mut c = vec![fiedler_bipartition(&sub)?, sign_split(&x)];
                c.extend(sweep_splits(&sub, &x).into_iter().map(|(_, a, b)| (a, b)));
                c
            };
            let before = current.subsystems.len();
            for (attempt, (a, b)) in candidates.into_iter().enumerate() {
                let ga: Vec<usize> = a.iter().map(|&i| sites[i]).collect();
                let gb: Vec<usize> = b.iter().map(|&i| sites[i]).collect();
                if count_users(&ga) == 0 || count_users(&gb) == 0 {
                    continue;
                }
                let mut trial = groups.clone();
                trial[k] = ga;
                trial.push(gb);
                match partition_from_groups(g, &to_user_map(&trial)) {
                    Ok(p) if p.subsystems.len() > before && p.subsystems.len() <= n_groups => {
                        if attempt > 0 {
                            log::debug!("best split of group {k} was not closed; used fallback cut #{attempt}");
                        }
                        groups = trial;
                        progressed = true;
                        break;
                    }
                    _ => continue,
                }
            }
            if progressed {
                break;
            }
        }
        if !progressed {
            return Err(PartitionError::InfeasiblePartition(format!(
                "cannot split further into {n_groups} closed subsystems"
            )));
        }
    }
}

// ---------------------------------------------------------------------------
// Reduced graph

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "type", content = "index", rename_all = "snake_case")]
pub enum ReducedKind {
    Subsystem(usize),
    /// A pass-through pipe, by global edge id.
    PassThrough(usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct ReducedEdge {
    pub tail: usize,
    pub head: usize,
    pub kind: ReducedKind,
    /// Loss coefficient of pass-through pipes.
    pub zeta: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReducedGraph {
    /// Global node id of each reduced node.
    pub nodes: Vec<usize>,
    pub root: usize,
    pub terminal: usize,
    pub edges: Vec<ReducedEdge>,
}

impl ReducedGraph {
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nodes.len(), self.edges.len());
        for (j, e) in self.edges.iter().enumerate() {
            m[(e.tail, j)] += 1.0;
            m[(e.head, j)] -= 1.0;
        }
        m
    }

    pub fn subsystem_edge(&self, j: usize) -> Option<usize> {
        self.edges.iter().position(|e| e.kind == ReducedKind::Subsystem(j))
    }
}

pub fn reduce_graph(g: &NetworkGraph, p: &Partition) -> ReducedGraph {
    let mut nodes: Vec<usize> = Vec::new();
    let mut index = BTreeMap::new();
    let mut id = |v: usize, nodes: &mut Vec<usize>| {
        *index.entry(v).or_insert_with(|| {
            nodes.push(v);
            nodes.len() - 1
        })
    };
    let root = id(g.root(), &mut nodes);
    let terminal = id(g.terminal(), &mut nodes);
    let mut edges = Vec::new();
    for (j, s) in p.subsystems.iter().enumerate() {
        let t = id(s.root, &mut nodes);
        let h = id(s.terminal, &mut nodes);
        edges.push(ReducedEdge { tail: t, head: h, kind: ReducedKind::Subsystem(j), zeta: None });
    }
    for &e in &p.pass_through {
        let t = id(g.edge(e).tail, &mut nodes);
        let h = id(g.edge(e).head, &mut nodes);
        edges.push(ReducedEdge {
            tail: t,
            head: h,
            kind: ReducedKind::PassThrough(e),
            zeta: Some(g.nominal_zeta()[e]),
        });
    }
    ReducedGraph { nodes, root, terminal, edges }
}

/// Inspection/export form of a partition.
#[derive(Debug, Serialize)]
pub struct PartitionExport {
    pub format: u32,
    pub assignment: BTreeMap<String, String>,
    pub subsystems: Vec<SubsystemExport>,
    pub reduced_graph: ReducedExport,
}

#[derive(Debug, Serialize)]
pub struct SubsystemExport {
    pub id: String,
    pub root: String,
    pub terminal: String,
    pub users: Vec<String>,
    pub edges: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct ReducedExport {
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String, String)>,
}

pub fn subsystem_label(j: usize) -> String {
    format!("S{}", j + 1)
}

pub fn export(g: &NetworkGraph, p: &Partition, r: &ReducedGraph) -> PartitionExport {
    let label = |a: &Assignment| match a {
        Assignment::Subsystem(j) => subsystem_label(*j),
        Assignment::PassThrough(_) => "pass".to_string(),
    };
    PartitionExport {
        format: 1,
        assignment: g.edges().iter().zip(&p.assignment).map(|(e, a)| (e.name.clone(), label(a))).collect(),
        subsystems: p
            .subsystems
            .iter()
            .enumerate()
            .map(|(j, s)| SubsystemExport {
                id: subsystem_label(j),
                root: g.node_name(s.root).into(),
                terminal: g.node_name(s.terminal).into(),
                users: s.users.iter().map(|&u| g.edge(u).name.clone()).collect(),
                edges: s.edges.iter().map(|&e| g.edge(e).name.clone()).collect(),
            })
            .collect(),
        reduced_graph: ReducedExport {
            nodes: r.nodes.iter().map(|&v| g.node_name(v).to_string()).collect(),
            edges: r
                .edges
                .iter()
                .map(|e| {
                    let name = match e.kind {
                        ReducedKind::Subsystem(j) => subsystem_label(j),
                        ReducedKind::PassThrough(x) => g.edge(x).name.clone(),
                    };
                    (name, g.node_name(r.nodes[e.tail]).into(), g.node_name(r.nodes[e.head]).into())
                })
                .collect(),
        },
    }
}
