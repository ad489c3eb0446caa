//! Typed directed-graph model of a district heating network.
//!
//! The plant is represented by a pair of nodes: the supply root (no incoming
//! edges) and the return terminal (no outgoing edges). Every edge is a pipe
//! tagged as feed, return, bypass or user (substation) segment. Incidence
//! uses `+1` at the tail and `-1` at the head, so `Λ·ṁ` is net outflow.

use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current version of the network file schema.
pub const NETWORK_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("edge `{edge}` references unknown node `{node}`")]
    DanglingReference { edge: String, node: String },
    #[error("graph is disconnected: node `{0}` cannot be reached")]
    DisconnectedGraph(String),
    #[error("root/terminal violation: {0}")]
    RootTerminalViolation(String),
    #[error("duplicate identifier `{0}`")]
    DuplicateId(String),
    #[error("invalid attributes on edge `{edge}`: {reason}")]
    InvalidAttributes { edge: String, reason: String },
    #[error("graph contains a directed cycle through node `{0}`")]
    Cycle(String),
    #[error("user edge `{0}` has no parallel bypass path")]
    Unbypassable(String),
    #[error("unsupported network format version {0}")]
    Format(u32),
    #[error("invalid fluid properties: {0}")]
    Fluid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Feed,
    Return,
    Bypass,
    User,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 4] = [EdgeKind::Feed, EdgeKind::Return, EdgeKind::Bypass, EdgeKind::User];
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EdgeKind::Feed => "feed",
            EdgeKind::Return => "return",
            EdgeKind::Bypass => "bypass",
            EdgeKind::User => "user",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidProperties {
    pub density_kg_m3: f64,
    pub cp_j_kg_k: f64,
}

impl FluidProperties {
    /// Water at district-heating supply temperature.
    pub fn water() -> Self {
        Self { density_kg_m3: 971.0, cp_j_kg_k: 4179.0 }
    }

    fn validate(&self) -> Result<(), NetworkError> {
        if !(self.density_kg_m3 > 0.0) || !(self.cp_j_kg_k > 0.0) {
            return Err(NetworkError::Fluid(format!(
                "density {} and cp {} must be positive",
                self.density_kg_m3, self.cp_j_kg_k
            )));
        }
        Ok(())
    }
}

impl Default for FluidProperties {
    fn default() -> Self {
        Self::water()
    }
}

/// Geometry, friction and heat-loss data of one pipe segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipeAttributes {
    pub length_m: f64,
    pub diameter_m: f64,
    pub friction: f64,
    pub htc_w_m2k: f64,
    /// Explicit loss coefficient. Used for user valves, whose nominal
    /// coefficient is not a pipe property.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
}

impl PipeAttributes {
    pub fn new(length_m: f64, diameter_m: f64, friction: f64, htc_w_m2k: f64) -> Self {
        Self { length_m, diameter_m, friction, htc_w_m2k, zeta: None }
    }

    pub fn cross_section(&self) -> f64 {
        PI * (self.diameter_m / 2.0).powi(2)
    }

    pub fn volume(&self) -> f64 {
        self.cross_section() * self.length_m
    }

    pub fn surface_area(&self) -> f64 {
        PI * self.diameter_m * self.length_m
    }

    fn validate(&self, edge: &str) -> Result<(), NetworkError> {
        let bad = |reason: &str| NetworkError::InvalidAttributes { edge: edge.to_string(), reason: reason.into() };
        if !(self.length_m > 0.0) {
            return Err(bad("length must be positive"));
        }
        if !(self.diameter_m > 0.0) {
            return Err(bad("diameter must be positive"));
        }
        if !(self.friction > 0.0) {
            return Err(bad("friction factor must be positive"));
        }
        if !(self.htc_w_m2k >= 0.0) {
            return Err(bad("heat transfer coefficient must be non-negative"));
        }
        if let Some(z) = self.zeta {
            if !(z > 0.0) || !z.is_finite() {
                return Err(bad("explicit loss coefficient must be positive"));
            }
        }
        Ok(())
    }
}

/// Darcy–Weisbach loss coefficient `ζ` such that `ΔP = ζ·ṁ²`.
pub fn loss_coefficient(attr: &PipeAttributes, fluid: &FluidProperties) -> f64 {
    let area = attr.cross_section();
    attr.friction * attr.length_m / (attr.diameter_m * 2.0 * fluid.density_kg_m3 * area * area)
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    /// Physical location shared by a feed node and its return twin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub id: String,
    pub tail: String,
    pub head: String,
    pub kind: EdgeKind,
    #[serde(flatten)]
    pub attributes: PipeAttributes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpecFile {
    pub format: u32,
    pub fluid: FluidProperties,
    pub root: String,
    pub terminal: String,
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<EdgeSpec>,
}

impl NetworkSpecFile {
    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network spec serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), NetworkError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Graph

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub name: String,
    pub tail: usize,
    pub head: usize,
    pub kind: EdgeKind,
    pub attributes: PipeAttributes,
}

/// Immutable network graph with derived connectivity structures.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    node_names: Vec<String>,
    node_sites: Vec<usize>,
    site_names: Vec<String>,
    root: usize,
    term: usize,
    edges: Vec<Edge>,
    fluid: FluidProperties,
    zeta: Vec<f64>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
    topo_nodes: Vec<usize>,
    node_index: HashMap<String, usize>,
    edge_index: HashMap<String, usize>,
}

impl NetworkGraph {
    pub fn from_spec(spec: &NetworkSpecFile) -> Result<Self, NetworkError> {
        if spec.format != NETWORK_FORMAT {
            return Err(NetworkError::Format(spec.format));
        }
        spec.fluid.validate()?;
        let mut node_index = HashMap::new();
        let mut node_names = Vec::with_capacity(spec.nodes.len());
        let mut site_index: HashMap<String, usize> = HashMap::new();
        let mut site_names = Vec::new();
        let mut node_sites = Vec::with_capacity(spec.nodes.len());
        for n in &spec.nodes {
            if node_index.insert(n.id.clone(), node_names.len()).is_some() {
                return Err(NetworkError::DuplicateId(n.id.clone()));
            }
            node_names.push(n.id.clone());
            let site = n.site.clone().unwrap_or_else(|| n.id.clone());
            let next = site_names.len();
            let s = *site_index.entry(site.clone()).or_insert_with(|| {
                site_names.push(site);
                next
            });
            node_sites.push(s);
        }
        let lookup = |edge: &str, node: &str| {
            node_index
                .get(node)
                .copied()
                .ok_or_else(|| NetworkError::DanglingReference { edge: edge.into(), node: node.into() })
        };
        let root = lookup("<root>", &spec.root)?;
        let term = lookup("<terminal>", &spec.terminal)?;
        if root == term {
            return Err(NetworkError::RootTerminalViolation("root and terminal must differ".into()));
        }
        let mut edges = Vec::with_capacity(spec.edges.len());
        let mut edge_index = HashMap::new();
        for e in &spec.edges {
            if edge_index.insert(e.id.clone(), edges.len()).is_some() {
                return Err(NetworkError::DuplicateId(e.id.clone()));
            }
            let tail = lookup(&e.id, &e.tail)?;
            let head = lookup(&e.id, &e.head)?;
            if tail == head {
                return Err(NetworkError::InvalidAttributes { edge: e.id.clone(), reason: "self loop".into() });
            }
            e.attributes.validate(&e.id)?;
            edges.push(Edge { name: e.id.clone(), tail, head, kind: e.kind, attributes: e.attributes });
        }
        Self::assemble(node_names, node_sites, site_names, root, term, edges, spec.fluid, node_index, edge_index)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        node_names: Vec<String>,
        node_sites: Vec<usize>,
        site_names: Vec<String>,
        root: usize,
        term: usize,
        edges: Vec<Edge>,
        fluid: FluidProperties,
        node_index: HashMap<String, usize>,
        edge_index: HashMap<String, usize>,
    ) -> Result<Self, NetworkError> {
        let n = node_names.len();
        let mut out_edges = vec![Vec::new(); n];
        let mut in_edges = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            out_edges[e.tail].push(i);
            in_edges[e.head].push(i);
        }
        if !in_edges[root].is_empty() {
            return Err(NetworkError::RootTerminalViolation(format!(
                "root `{}` has indegree {}",
                node_names[root],
                in_edges[root].len()
            )));
        }
        if !out_edges[term].is_empty() {
            return Err(NetworkError::RootTerminalViolation(format!(
                "terminal `{}` has outdegree {}",
                node_names[term],
                out_edges[term].len()
            )));
        }

        // Undirected connectivity (root and terminal are joined through the plant).
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        seen[term] = true;
        queue.push_back(term);
        while let Some(v) = queue.pop_front() {
            for &e in out_edges[v].iter().chain(&in_edges[v]) {
                let w = if edges[e].tail == v { edges[e].head } else { edges[e].tail };
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(NetworkError::DisconnectedGraph(node_names[v].clone()));
        }

        // Kahn topological order; fixed flow directions require a DAG.
        let mut indeg: Vec<usize> = in_edges.iter().map(Vec::len).collect();
        let mut ready: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut topo_nodes = Vec::with_capacity(n);
        while let Some(v) = ready.pop_front() {
            topo_nodes.push(v);
            for &e in &out_edges[v] {
                let h = edges[e].head;
                indeg[h] -= 1;
                if indeg[h] == 0 {
                    ready.push_back(h);
                }
            }
        }
        if topo_nodes.len() != n {
            let v = (0..n).find(|&v| indeg[v] > 0).unwrap_or(0);
            return Err(NetworkError::Cycle(node_names[v].clone()));
        }
        if let Some(&v) = topo_nodes.iter().find(|&&v| in_edges[v].is_empty() && v != root) {
            return Err(NetworkError::RootTerminalViolation(format!(
                "node `{}` is a second source",
                node_names[v]
            )));
        }
        if let Some(&v) = topo_nodes.iter().find(|&&v| out_edges[v].is_empty() && v != term) {
            return Err(NetworkError::RootTerminalViolation(format!("node `{}` is a second sink", node_names[v])));
        }

        let zeta = edges
            .iter()
            .map(|e| e.attributes.zeta.unwrap_or_else(|| loss_coefficient(&e.attributes, &fluid)))
            .collect();

        let graph = Self {
            node_names,
            node_sites,
            site_names,
            root,
            term,
            edges,
            fluid,
            zeta,
            out_edges,
            in_edges,
            topo_nodes,
            node_index,
            edge_index,
        };
        graph.check_bypass_paths()?;
        Ok(graph)
    }

    /// Every user edge must be parallel to a path that avoids all user edges.
    fn check_bypass_paths(&self) -> Result<(), NetworkError> {
        for (i, e) in self.edges.iter().enumerate() {
            if e.kind != EdgeKind::User {
                continue;
            }
            let mut seen = vec![false; self.node_count()];
            let mut stack = vec![e.tail];
            seen[e.tail] = true;
            let mut found = false;
            while let Some(v) = stack.pop() {
                if v == e.head {
                    found = true;
                    break;
                }
                for &o in &self.out_edges[v] {
                    let oe = &self.edges[o];
                    if oe.kind != EdgeKind::User && !seen[oe.head] {
                        seen[oe.head] = true;
                        stack.push(oe.head);
                    }
                }
            }
            if !found {
                return Err(NetworkError::Unbypassable(self.edges[i].name.clone()));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        Self::from_spec(&NetworkSpecFile::read(path)?)
    }

    pub fn to_spec(&self) -> NetworkSpecFile {
        NetworkSpecFile {
            format: NETWORK_FORMAT,
            fluid: self.fluid,
            root: self.node_names[self.root].clone(),
            terminal: self.node_names[self.term].clone(),
            nodes: self
                .node_names
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    let site = &self.site_names[self.node_sites[i]];
                    NodeSpec { id: id.clone(), site: (site != id).then(|| site.clone()) }
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeSpec {
                    id: e.name.clone(),
                    tail: self.node_names[e.tail].clone(),
                    head: self.node_names[e.head].clone(),
                    kind: e.kind,
                    attributes: e.attributes,
                })
                .collect(),
        }
    }

    /// Extract the subgraph spanned by `edge_ids`, with new plant nodes.
    ///
    /// Returned edges keep the order of `edge_ids`; sites are preserved.
    pub fn subgraph(&self, edge_ids: &[usize], root: usize, term: usize) -> Result<NetworkGraph, NetworkError> {
        let mut map: HashMap<usize, usize> = HashMap::new();
        let mut node_names = Vec::new();
        let mut node_sites_global = Vec::new();
        let mut add = |v: usize, names: &mut Vec<String>| {
            *map.entry(v).or_insert_with(|| {
                names.push(self.node_names[v].clone());
                node_sites_global.push(self.node_sites[v]);
                names.len() - 1
            })
        };
        let r = add(root, &mut node_names);
        let t = add(term, &mut node_names);
        let mut edges = Vec::with_capacity(edge_ids.len());
        for &e in edge_ids {
            let src = &self.edges[e];
            let tail = add(src.tail, &mut node_names);
            let head = add(src.head, &mut node_names);
            edges.push(Edge { name: src.name.clone(), tail, head, kind: src.kind, attributes: src.attributes });
        }
        // Compact site numbering.
        let mut site_map: HashMap<usize, usize> = HashMap::new();
        let mut site_names = Vec::new();
        let node_sites = node_sites_global
            .iter()
            .map(|&s| {
                *site_map.entry(s).or_insert_with(|| {
                    site_names.push(self.site_names[s].clone());
                    site_names.len() - 1
                })
            })
            .collect();
        let node_index = node_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let edge_index = edges.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        let mut g = Self::assemble(node_names, node_sites, site_names, r, t, edges, self.fluid, node_index, edge_index)?;
        // Keep explicit loss coefficients identical to the parent graph.
        for (k, &e) in edge_ids.iter().enumerate() {
            g.zeta[k] = self.zeta[e];
        }
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.node_names.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn terminal(&self) -> usize {
        self.term
    }

    pub fn fluid(&self) -> &FluidProperties {
        &self.fluid
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, i: usize) -> &Edge {
        &self.edges[i]
    }

    pub fn node_name(&self, v: usize) -> &str {
        &self.node_names[v]
    }

    pub fn node_id(&self, name: &str) -> Option<usize> {
        self.node_index.get(name).copied()
    }

    pub fn edge_id(&self, name: &str) -> Option<usize> {
        self.edge_index.get(name).copied()
    }

    pub fn site_of(&self, v: usize) -> usize {
        self.node_sites[v]
    }

    pub fn site_count(&self) -> usize {
        self.site_names.len()
    }

    pub fn site_name(&self, s: usize) -> &str {
        &self.site_names[s]
    }

    pub fn out_edges(&self, v: usize) -> &[usize] {
        &self.out_edges[v]
    }

    pub fn in_edges(&self, v: usize) -> &[usize] {
        &self.in_edges[v]
    }

    /// Nodes in topological order (root first).
    pub fn topological_nodes(&self) -> &[usize] {
        &self.topo_nodes
    }

    /// Nominal loss coefficient of every edge.
    pub fn nominal_zeta(&self) -> &[f64] {
        &self.zeta
    }

    pub fn edges_of_kind(&self, kind: EdgeKind) -> Vec<usize> {
        self.edges.iter().enumerate().filter(|(_, e)| e.kind == kind).map(|(i, _)| i).collect()
    }

    pub fn user_edges(&self) -> Vec<usize> {
        self.edges_of_kind(EdgeKind::User)
    }

    /// Signed `|V|×|E|` incidence matrix: `+1` at the tail, `-1` at the head.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.node_count(), self.edge_count());
        for (j, e) in self.edges.iter().enumerate() {
            m[(e.tail, j)] = 1.0;
            m[(e.head, j)] = -1.0;
        }
        m
    }

    /// Directed `|V|×|V|` adjacency matrix (edge multiplicities).
    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.node_count(), self.node_count());
        for e in &self.edges {
            m[(e.tail, e.head)] += 1.0;
        }
        m
    }
}
