//! Weighted brain graphs, their Laplacian, and the master equations
//! coupled across nodes by Laplacian transport.
//!
//! Network states are stored species-major: for `V` nodes the block
//! `y[s·V .. (s+1)·V]` holds species `s` at every node, where species 0 is
//! the monomer and species `s ≥ 1` is the `(s+1)`-mer. The dynamic model
//! appends one log-gap clearance block per aggregate size.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{
    aggregate_moments, aggregation_kernel, clearance_gap_coordinate, ClearanceSpec,
    KineticParameters, ModelKind, ModelVariant, RateView, SizeDistribution, NEGATIVITY_TOL,
};
use crate::solver::{Direction, EventFunction, OdeSystem, ScalarSeries, Trajectory};

/// Graphs with fewer nodes are stored densely.
pub const DENSE_BELOW: usize = 64;

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Dense(Vec<f64>),
    /// Neighbour lists sorted by node index.
    Sparse(Vec<Vec<(usize, f64)>>),
}

/// Undirected weighted graph with labelled nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Connectome {
    labels: Vec<String>,
    storage: Storage,
}

impl Connectome {
    /// Builds a graph from undirected edges. Repeated edges are summed; an
    /// edge listed in both orientations must carry the same weight and is
    /// counted once.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(s, t, w) in edges {
            if s >= n_nodes || t >= n_nodes {
                return Err(Error::Graph(format!(
                    "edge ({s}, {t}) refers to a node outside 0..{n_nodes}"
                )));
            }
            if s == t {
                return Err(Error::Graph(format!("self-loop at node {s}")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Graph(format!("edge ({s}, {t}) has invalid weight {w}")));
            }
            *directed.entry((s, t)).or_insert(0.0) += w;
        }
        let mut undirected: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (&(s, t), &w) in &directed {
            let key = (s.min(t), s.max(t));
            match (directed.get(&(t, s)), s < t) {
                (Some(&back), true) => {
                    if back != w {
                        return Err(Error::Graph(format!(
                            "edge ({s}, {t}) has weight {w} but ({t}, {s}) has {back}"
                        )));
                    }
                    undirected.insert(key, w);
                }
                (Some(_), false) => {}
                (None, _) => {
                    undirected.insert(key, w);
                }
            }
        }
        let labels = (0..n_nodes).map(|i| i.to_string()).collect();
        let mut lists = vec![Vec::new(); n_nodes];
        for (&(s, t), &w) in &undirected {
            if w == 0.0 {
                continue;
            }
            lists[s].push((t, w));
            lists[t].push((s, w));
        }
        for l in &mut lists {
            l.sort_by_key(|e| e.0);
        }
        let storage = if n_nodes < DENSE_BELOW {
            let mut dense = vec![0.0; n_nodes * n_nodes];
            for (s, l) in lists.iter().enumerate() {
                for &(t, w) in l {
                    dense[s * n_nodes + t] = w;
                }
            }
            Storage::Dense(dense)
        } else {
            Storage::Sparse(lists)
        };
        Ok(Self { labels, storage })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_nodes() {
            return Err(Error::Dimension {
                expected: self.n_nodes(),
                got: labels.len(),
            });
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    /// Resolves a node by exact label or by integer index.
    pub fn resolve(&self, node: &str) -> Result<usize> {
        if let Some(i) = self.labels.iter().position(|l| l == node) {
            return Ok(i);
        }
        match node.trim().parse::<usize>() {
            Ok(i) if i < self.n_nodes() => Ok(i),
            _ => Err(Error::NotFound(format!("no node labelled {node:?}"))),
        }
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        match &self.storage {
            Storage::Dense(d) => d[i * self.n_nodes() + j],
            Storage::Sparse(l) => l[i]
                .binary_search_by_key(&j, |e| e.0)
                .map(|k| l[i][k].1)
                .unwrap_or(0.0),
        }
    }

    /// Neighbours of `i` with edge weights, in index order.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, f64)> {
        match &self.storage {
            Storage::Dense(d) => {
                let n = self.n_nodes();
                (0..n)
                    .filter_map(|j| {
                        let w = d[i * n + j];
                        (w != 0.0).then_some((j, w))
                    })
                    .collect()
            }
            Storage::Sparse(l) => l[i].clone(),
        }
    }

    /// Undirected edges `(i, j, w)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.n_nodes() {
            for (j, w) in self.neighbors(i) {
                if i < j {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).len()
    }

    pub fn dense_adjacency(&self) -> DMatrix<f64> {
        let n = self.n_nodes();
        DMatrix::from_fn(n, n, |i, j| self.weight(i, j))
    }

    /// Unweighted hop counts from `source`; `None` for unreachable nodes.
    pub fn hop_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_nodes()];
        let mut queue = std::collections::VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(i) = queue.pop_front() {
            let d = dist[i].unwrap();
            for (j, _) in self.neighbors(i) {
                if dist[j].is_none() {
                    dist[j] = Some(d + 1);
                    queue.push_back(j);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.n_nodes() == 0 || self.hop_distances(0).iter().all(Option::is_some)
    }
}

/// Reads an edge list with header `source,target,weight`. The node count
/// is `n_nodes` when given, otherwise one more than the largest index.
pub fn load_connectome(edges: &Path, n_nodes: Option<usize>) -> Result<Connectome> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(edges)?;
    let headers = rdr.headers()?.clone();
    let expected = ["source", "target", "weight"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Graph(format!(
            "edge list header must be source,target,weight, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut list = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_idx = |k: usize| -> Result<usize> {
            rec[k].parse().map_err(|_| {
                Error::Graph(format!("line {}: bad node index {:?}", line + 2, &rec[k]))
            })
        };
        let s = parse_idx(0)?;
        let t = parse_idx(1)?;
        let w: f64 = rec[2]
            .parse()
            .map_err(|_| Error::Graph(format!("line {}: bad weight {:?}", line + 2, &rec[2])))?;
        list.push((s, t, w));
    }
    let inferred = list.iter().map(|e| e.0.max(e.1) + 1).max().unwrap_or(0);
    let n = match n_nodes {
        Some(n) if n < inferred => {
            return Err(Error::Graph(format!(
                "edge list refers to node {} but only {n} nodes are declared",
                inferred - 1
            )))
        }
        Some(n) => n,
        None => inferred,
    };
    Connectome::from_edges(n, &list)
}

/// Reads node labels from a CSV with header `index,label` (further
/// columns, such as coordinates, are ignored).
pub fn load_node_labels(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "index" || &headers[1] != "label" {
        return Err(Error::Graph("node metadata header must start with index,label".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let i: usize = rec[0]
            .parse()
            .map_err(|_| Error::Graph(format!("bad node index {:?}", &rec[0])))?;
        rows.push((i, rec[1].to_string()));
    }
    rows.sort_by_key(|r| r.0);
    for (k, (i, _)) in rows.iter().enumerate() {
        if *i != k {
            return Err(Error::Graph(format!("node indices must be 0..V without gaps, found {i} at {k}")));
        }
    }
    Ok(rows.into_iter().map(|r| r.1).collect())
}

/// Writes the edge list, one undirected edge per row with `source < target`.
pub fn save_connectome(c: &Connectome, edges: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(edges)?;
    w.write_record(["source", "target", "weight"])?;
    for (s, t, wt) in c.edges() {
        w.write_record([s.to_string(), t.to_string(), format!("{wt:?}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_node_labels(c: &Connectome, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "label"])?;
    for (i, l) in c.labels().iter().enumerate() {
        w.write_record([i.to_string(), l.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Watts–Strogatz graph: a ring where each node links to its `k/2`
/// nearest neighbours on either side, with each link rewired to a random
/// target with probability `rewire_prob`. Edge weights are drawn
/// uniformly from `[0.5, 1.5)`.
pub fn generate_small_world(n_nodes: usize, k: usize, rewire_prob: f64, seed: u64) -> Result<Connectome> {
    if n_nodes < 2 {
        return Err(Error::Graph(format!("need at least 2 nodes, got {n_nodes}")));
    }
    if k == 0 || k % 2 != 0 || k >= n_nodes {
        return Err(Error::Graph(format!("k must be even with 0 < k < V, got k = {k}, V = {n_nodes}")));
    }
    if !(0.0..=1.0).contains(&rewire_prob) {
        return Err(Error::Graph(format!("rewire probability must be in [0, 1], got {rewire_prob}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adj: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); n_nodes];
    for i in 0..n_nodes {
        for j in 1..=k / 2 {
            let t = (i + j) % n_nodes;
            adj[i].insert(t);
            adj[t].insert(i);
        }
    }
    for j in 1..=k / 2 {
        for i in 0..n_nodes {
            let t = (i + j) % n_nodes;
            if rng.random::<f64>() >= rewire_prob || !adj[i].contains(&t) {
                continue;
            }
            if adj[i].len() >= n_nodes - 1 {
                continue;
            }
            let new_t = loop {
                let c = rng.random_range(0..n_nodes);
                if c != i && !adj[i].contains(&c) {
                    break c;
                }
            };
            adj[i].remove(&t);
            adj[t].remove(&i);
            adj[i].insert(new_t);
            adj[new_t].insert(i);
        }
    }
    let mut edges = Vec::new();
    for (i, set) in adj.iter().enumerate() {
        for &t in set {
            if i < t {
                edges.push((i, t));
            }
        }
    }
    let weighted: Vec<(usize, usize, f64)> = edges
        .into_iter()
        .map(|(i, t)| (i, t, rng.random_range(0.5..1.5)))
        .collect();
    Connectome::from_edges(n_nodes, &weighted)
}

/// Path `0 – 1 – … – (V−1)` with uniform weight.
pub fn generate_path(n_nodes: usize, weight: f64) -> Result<Connectome> {
    if n_nodes < 2 {
        return Err(Error::Graph(format!("need at least 2 nodes, got {n_nodes}")));
    }
    let edges: Vec<_> = (0..n_nodes - 1).map(|i| (i, i + 1, weight)).collect();
    Connectome::from_edges(n_nodes, &edges)
}

/// Star with centre 0 and one leaf per weight.
pub fn generate_star(weights: &[f64]) -> Result<Connectome> {
    let edges: Vec<_> = weights.iter().enumerate().map(|(k, &w)| (0, k + 1, w)).collect();
    Connectome::from_edges(weights.len() + 1, &edges)
}

/// Unnormalised graph Laplacian `L = D − A`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLaplacian {
    degree: Vec<f64>,
    storage: Storage,
}

pub fn laplacian(c: &Connectome) -> GraphLaplacian {
    let n = c.n_nodes();
    let degree = (0..n)
        .map(|i| c.neighbors(i).iter().map(|e| e.1).sum())
        .collect();
    GraphLaplacian {
        degree,
        storage: c.storage.clone(),
    }
}

impl GraphLaplacian {
    pub fn n_nodes(&self) -> usize {
        self.degree.len()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let n = self.n_nodes();
        let a = match &self.storage {
            Storage::Dense(d) => d[i * n + j],
            Storage::Sparse(l) => l[i]
                .binary_search_by_key(&j, |e| e.0)
                .map(|k| l[i][k].1)
                .unwrap_or(0.0),
        };
        if i == j {
            self.degree[i] - a
        } else {
            -a
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n_nodes();
        DMatrix::from_fn(n, n, |i, j| self.entry(i, j))
    }

    /// `out = L x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n_nodes();
        match &self.storage {
            Storage::Dense(d) => {
                for i in 0..n {
                    let row = &d[i * n..(i + 1) * n];
                    let mut acc = self.degree[i] * x[i];
                    for (j, &w) in row.iter().enumerate() {
                        acc -= w * x[j];
                    }
                    out[i] = acc;
                }
            }
            Storage::Sparse(l) => {
                for i in 0..n {
                    let mut acc = self.degree[i] * x[i];
                    for &(j, w) in &l[i] {
                        acc -= w * x[j];
                    }
                    out[i] = acc;
                }
            }
        }
    }

    /// `out −= ρ L x`.
    fn apply_scaled_sub(&self, rho: f64, x: &[f64], out: &mut [f64]) {
        let n = self.n_nodes();
        match &self.storage {
            Storage::Dense(d) => {
                for i in 0..n {
                    let row = &d[i * n..(i + 1) * n];
                    let mut acc = self.degree[i] * x[i];
                    for (j, &w) in row.iter().enumerate() {
                        acc -= w * x[j];
                    }
                    out[i] -= rho * acc;
                }
            }
            Storage::Sparse(l) => {
                for i in 0..n {
                    let mut acc = self.degree[i] * x[i];
                    for &(j, w) in &l[i] {
                        acc -= w * x[j];
                    }
                    out[i] -= rho * acc;
                }
            }
        }
    }

    /// Eigenvalues in ascending order.
    pub fn spectrum(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.to_dense()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Second-smallest eigenvalue; positive exactly when the graph is
    /// connected.
    pub fn algebraic_connectivity(&self) -> f64 {
        let ev = self.spectrum();
        if ev.len() < 2 {
            0.0
        } else {
            ev[1]
        }
    }
}

/// Size-dependent transport coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum DiffusionSchedule {
    /// Same coefficient for every species.
    Constant { rho: f64 },
    /// `ρ_i = ρ_0 / i³`; monomers move with `ρ_0`.
    CubeInverse { rho_0: f64 },
}

impl DiffusionSchedule {
    pub fn rho(&self, size: usize) -> f64 {
        match self {
            DiffusionSchedule::Constant { rho } => *rho,
            DiffusionSchedule::CubeInverse { rho_0 } => rho_0 / (size as f64).powi(3),
        }
    }

    /// The same schedule with every coefficient multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            DiffusionSchedule::Constant { rho } => DiffusionSchedule::Constant { rho: rho * factor },
            DiffusionSchedule::CubeInverse { rho_0 } => DiffusionSchedule::CubeInverse { rho_0: rho_0 * factor },
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match self {
            DiffusionSchedule::Constant { rho } => *rho,
            DiffusionSchedule::CubeInverse { rho_0 } => *rho_0,
        };
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Config(format!("diffusion coefficient must be >= 0, got {v}")));
        }
        Ok(())
    }
}

/// Master equations on every node coupled by Laplacian transport.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    params: KineticParameters,
    physical: KineticParameters,
    variant: ModelVariant,
    laplacian: GraphLaplacian,
    n_max: usize,
    rho: Vec<f64>,
    clearance: Vec<ClearanceSpec>,
    static_rates: Vec<Option<Vec<f64>>>,
    dynamic: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    time_dependent: bool,
}

impl NetworkModel {
    /// `clearance` holds one law per node, or a single law shared by all.
    pub fn new(
        params: &KineticParameters,
        variant: ModelVariant,
        connectome: &Connectome,
        schedule: DiffusionSchedule,
        clearance: Vec<ClearanceSpec>,
        n_max: usize,
    ) -> Result<Self> {
        params.validate()?;
        schedule.validate()?;
        let v = connectome.n_nodes();
        if v == 0 {
            return Err(Error::Graph("empty connectome".into()));
        }
        if n_max < 2 {
            return Err(Error::Config(format!("N_max must be >= 2, got {n_max}")));
        }
        let clearance = match clearance.len() {
            1 => vec![clearance[0].clone(); v],
            n if n == v => clearance,
            n => return Err(Error::Dimension { expected: v, got: n }),
        };
        let is_dyn = variant.kind == ModelKind::InVivoDynamicClearance;
        let mut static_rates = Vec::with_capacity(v);
        let mut dynamic = Vec::with_capacity(v);
        let mut time_dependent = false;
        for law in clearance.iter() {
            law.validate(n_max)?;
            match law {
                ClearanceSpec::Dynamic { basal, damage, .. } => {
                    if !is_dyn {
                        return Err(Error::Config(
                            "dynamic clearance needs the dynamic-clearance model variant".into(),
                        ));
                    }
                    static_rates.push(None);
                    dynamic.push(Some((
                        basal.clone(),
                        damage.iter().map(|b| b / params.rescale_c).collect(),
                    )));
                }
                _ => {
                    if is_dyn {
                        return Err(Error::Config(
                            "the dynamic-clearance model needs dynamic clearance at every node".into(),
                        ));
                    }
                    time_dependent |= law.is_time_dependent();
                    static_rates.push(law.static_rates(n_max));
                    dynamic.push(None);
                }
            }
        }
        Ok(Self {
            params: params.scaled(variant.nucleation),
            physical: *params,
            variant,
            laplacian: laplacian(connectome),
            n_max,
            rho: (1..=n_max).map(|s| schedule.rho(s)).collect(),
            clearance,
            static_rates,
            dynamic,
            time_dependent,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.laplacian.n_nodes()
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn scale(&self) -> f64 {
        self.physical.rescale_c
    }

    pub fn physical_params(&self) -> &KineticParameters {
        &self.physical
    }

    fn is_dynamic(&self) -> bool {
        self.variant.kind == ModelKind::InVivoDynamicClearance
    }

    pub fn dim(&self) -> usize {
        let v = self.n_nodes();
        if self.is_dynamic() {
            v * (2 * self.n_max - 1)
        } else {
            v * self.n_max
        }
    }

    /// Flat scaled state from one physical distribution per node.
    pub fn initial_state(&self, nodes: &[SizeDistribution]) -> Result<Vec<f64>> {
        let v = self.n_nodes();
        if nodes.len() != v {
            return Err(Error::Dimension {
                expected: v,
                got: nodes.len(),
            });
        }
        let c = self.scale();
        let mut y = vec![0.0; self.dim()];
        for (j, d) in nodes.iter().enumerate() {
            if d.n_max() != self.n_max {
                return Err(Error::Dimension {
                    expected: self.n_max,
                    got: d.n_max(),
                });
            }
            y[j] = d.m * c;
            for (k, p) in d.p.iter().enumerate() {
                y[(k + 1) * v + j] = p * c;
            }
            if let ClearanceSpec::Dynamic { initial, basal, .. } = &self.clearance[j] {
                for k in 0..self.n_max - 1 {
                    y[(self.n_max + k) * v + j] = clearance_gap_coordinate(initial[k], basal[k]);
                }
            }
        }
        Ok(y)
    }

    /// Every node at monomer `m_0`, aggregate-free, except `seed_node`
    /// which also carries dimers at `seed_p2`.
    pub fn seeded_state(&self, seed_node: usize, seed_p2: f64) -> Result<Vec<f64>> {
        if seed_node >= self.n_nodes() {
            return Err(Error::NotFound(format!("seed node {seed_node} out of range")));
        }
        let nodes: Vec<_> = (0..self.n_nodes())
            .map(|j| {
                let p2 = if j == seed_node { seed_p2 } else { 0.0 };
                SizeDistribution::seeded(self.physical.m_0, self.n_max, p2)
            })
            .collect();
        self.initial_state(&nodes)
    }

    /// Physical distribution at node `j`.
    pub fn node_distribution(&self, y: &[f64], j: usize) -> SizeDistribution {
        let v = self.n_nodes();
        let c = self.scale();
        SizeDistribution {
            m: y[j] / c,
            p: (1..self.n_max).map(|s| y[s * v + j] / c).collect(),
        }
    }

    /// Physical aggregate mass at node `j`.
    pub fn node_mass(&self, y: &[f64], j: usize) -> f64 {
        let v = self.n_nodes();
        let mut mass = 0.0;
        for s in 1..self.n_max {
            mass += (s + 1) as f64 * y[s * v + j];
        }
        mass / self.scale()
    }

    pub fn node_number(&self, y: &[f64], j: usize) -> f64 {
        let v = self.n_nodes();
        (1..self.n_max).map(|s| y[s * v + j]).sum::<f64>() / self.scale()
    }

    /// Current clearance rates at node `j` (dynamic model only).
    pub fn node_clearance(&self, y: &[f64], j: usize) -> Option<Vec<f64>> {
        let v = self.n_nodes();
        self.dynamic[j].as_ref().map(|(basal, _)| {
            basal
                .iter()
                .enumerate()
                .map(|(k, mu)| mu + y[(self.n_max + k) * v + j].exp())
                .collect()
        })
    }

    /// Sum of one species over all nodes (physical units).
    pub fn species_total(&self, y: &[f64], species: usize) -> f64 {
        let v = self.n_nodes();
        y[species * v..(species + 1) * v].iter().sum::<f64>() / self.scale()
    }

    /// Right-hand side in scaled units.
    pub fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let v = self.n_nodes();
        let n = self.n_max;
        let hold = self.variant.kind != ModelKind::InVitroClosed;
        let mut p = vec![0.0; n - 1];
        let mut dp = vec![0.0; n - 1];
        let mut gap = vec![0.0; if self.is_dynamic() { n - 1 } else { 0 }];
        for j in 0..v {
            for s in 1..n {
                p[s - 1] = y[s * v + j];
            }
            let m = y[j];
            let dm = if let Some((basal, damage)) = &self.dynamic[j] {
                for k in 0..n - 1 {
                    gap[k] = y[(n + k) * v + j];
                }
                let dm = aggregation_kernel(
                    &self.params,
                    &self.variant,
                    m,
                    &p,
                    RateView::LogGap { basal, gap: &gap },
                    hold,
                    &mut dp,
                );
                let mass = aggregate_moments(&p).mass;
                for k in 0..n - 1 {
                    dy[(n + k) * v + j] = -damage[k] * mass;
                }
                dm
            } else {
                let rates = match &self.static_rates[j] {
                    _ if !hold => RateView::Zero,
                    Some(r) => RateView::PerSize(r),
                    None => RateView::Uniform(self.clearance[j].uniform_rate(t).unwrap_or(0.0)),
                };
                aggregation_kernel(&self.params, &self.variant, m, &p, rates, hold, &mut dp)
            };
            dy[j] = dm;
            for s in 1..n {
                dy[s * v + j] = dp[s - 1];
            }
        }
        let species = v * n;
        let lap = &self.laplacian;
        let rho = &self.rho;
        let transport = |(s, (out, x)): (usize, (&mut [f64], &[f64]))| {
            if rho[s] != 0.0 {
                lap.apply_scaled_sub(rho[s], x, out);
            }
        };
        if species >= 4096 {
            dy[..species]
                .par_chunks_mut(v)
                .zip(y[..species].par_chunks(v))
                .enumerate()
                .for_each(transport);
        } else {
            dy[..species]
                .chunks_mut(v)
                .zip(y[..species].chunks(v))
                .enumerate()
                .for_each(transport);
        }
    }
}

impl OdeSystem for NetworkModel {
    fn dim(&self) -> usize {
        NetworkModel::dim(self)
    }

    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        NetworkModel::eval(self, t, y, dy)
    }

    fn discontinuities(&self, t0: f64, t1: f64) -> Vec<f64> {
        if !self.time_dependent {
            return Vec::new();
        }
        let mut all: Vec<f64> = self
            .clearance
            .iter()
            .flat_map(|c| c.discontinuities(t0, t1))
            .collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }

    fn nonnegative(&self) -> Option<(std::ops::Range<usize>, f64)> {
        let first = if self.variant.kind == ModelKind::InVitroClosed {
            self.n_nodes()
        } else {
            0
        };
        Some((first..self.n_nodes() * self.n_max, -NEGATIVITY_TOL * self.params.m_0))
    }

    fn default_abs_tol(&self) -> Option<f64> {
        Some(1e-14 * self.params.m_0)
    }
}

/// Derivative of the network state (scaled units).
pub fn rhs_network(model: &NetworkModel, t: f64, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: y.len(),
        });
    }
    let mut dy = vec![0.0; y.len()];
    model.eval(t, y, &mut dy);
    Ok(dy)
}

pub const INVASION_LABEL: &str = "invasion";

/// One event per node firing when its aggregate mass rises through
/// `theta · m_0`.
pub fn invasion_events(model: &NetworkModel, theta: f64) -> Vec<EventFunction<'_>> {
    let level = theta * model.physical.m_0;
    (0..model.n_nodes())
        .map(|j| {
            EventFunction::new(format!("{INVASION_LABEL}:{j}"), Direction::Rising, move |_t, y: &[f64]| {
                model.node_mass(y, j) - level
            })
        })
        .collect()
}

/// When a node's mass first reached the invasion threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Invasion {
    pub node: usize,
    /// `None` if the node never crossed.
    pub time: Option<f64>,
    /// 1-based rank among invaded nodes.
    pub rank: Option<usize>,
}

/// Ranks nodes by first crossing of `theta · m_0`, ties broken by node
/// index. Nodes already above threshold at the start count as invaded at
/// the first stored time. Crossing times come from the trajectory's
/// invasion events when present, otherwise from its stored samples.
pub fn invasion_order(traj: &Trajectory, model: &NetworkModel, theta: f64) -> Vec<Invasion> {
    let level = theta * model.physical.m_0;
    let t0 = traj.times[0];
    let y0 = &traj.states[0];
    let from_events = traj
        .events
        .iter()
        .any(|e| e.label.starts_with(INVASION_LABEL));
    let mut out: Vec<Invasion> = (0..model.n_nodes())
        .map(|j| {
            let time = if model.node_mass(y0, j) >= level {
                Some(t0)
            } else if from_events {
                let label = format!("{INVASION_LABEL}:{j}");
                traj.events.iter().find(|e| e.label == label).map(|e| e.t)
            } else {
                let s: ScalarSeries = traj.series(|y| model.node_mass(y, j));
                s.first_crossing(level, Direction::Rising)
            };
            Invasion {
                node: j,
                time,
                rank: None,
            }
        })
        .collect();
    out.sort_by(|a, b| match (a.time, b.time) {
        (Some(x), Some(y)) => x.total_cmp(&y).then(a.node.cmp(&b.node)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.node.cmp(&b.node),
    });
    for (k, inv) in out.iter_mut().enumerate() {
        if inv.time.is_some() {
            inv.rank = Some(k + 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::MasterEquation;
    use crate::solver::{integrate, IntegrationConfig, OutputGrid};

    #[test]
    fn two_node_graph() {
        let c = Connectome::from_edges(2, &[(0, 1, 2.5)]).unwrap();
        assert_eq!(c.weight(0, 1), 2.5);
        assert_eq!(c.weight(1, 0), 2.5);
        assert_eq!(c.weight(0, 0), 0.0);
        let l = laplacian(&c);
        assert_eq!(l.to_dense(), DMatrix::from_row_slice(2, 2, &[2.5, -2.5, -2.5, 2.5]));
    }

    #[test]
    fn empty_graph_has_zero_laplacian() {
        let c = Connectome::from_edges(3, &[]).unwrap();
        let l = laplacian(&c);
        assert!(l.to_dense().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn edge_validation() {
        assert!(Connectome::from_edges(2, &[(0, 0, 1.0)]).is_err());
        assert!(Connectome::from_edges(2, &[(0, 1, -1.0)]).is_err());
        assert!(Connectome::from_edges(2, &[(0, 1, 1.0), (1, 0, 2.0)]).is_err());
        assert!(Connectome::from_edges(2, &[(0, 2, 1.0)]).is_err());
        // Both orientations with equal weight describe one edge.
        let c = Connectome::from_edges(2, &[(0, 1, 1.5), (1, 0, 1.5)]).unwrap();
        assert_eq!(c.weight(0, 1), 1.5);
        // Repeats are summed.
        let c = Connectome::from_edges(2, &[(0, 1, 1.0), (0, 1, 0.5)]).unwrap();
        assert_eq!(c.weight(0, 1), 1.5);
    }

    #[test]
    fn ring_lattice_degrees() {
        let c = generate_small_world(20, 4, 0.0, 1).unwrap();
        for i in 0..20 {
            assert_eq!(c.degree(i), 4);
        }
        assert!(generate_small_world(20, 3, 0.1, 1).is_err());
        assert!(generate_small_world(4, 4, 0.1, 1).is_err());
    }

    #[test]
    fn small_world_is_deterministic_and_connected() {
        let a = generate_small_world(83, 4, 0.1, 7).unwrap();
        let b = generate_small_world(83, 4, 0.1, 7).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_dense());
        let c = generate_small_world(83, 4, 0.1, 8).unwrap();
        assert_ne!(a, c);
        assert!(laplacian(&a).algebraic_connectivity() > 1e-9);
        assert!(a.is_connected());
    }

    #[test]
    fn laplacian_rows_sum_to_zero_and_kill_constants() {
        for c in [
            generate_small_world(30, 4, 0.3, 3).unwrap(),
            generate_small_world(90, 6, 0.2, 3).unwrap(),
        ] {
            let l = laplacian(&c);
            let n = c.n_nodes();
            for i in 0..n {
                let row: f64 = (0..n).map(|j| l.entry(i, j)).sum();
                assert!(row.abs() < 1e-12);
                for j in 0..n {
                    if i != j {
                        assert!(l.entry(i, j) <= 0.0);
                    }
                }
            }
            let mut out = vec![1.0; n];
            l.apply(&vec![3.0; n], &mut out);
            assert!(out.iter().all(|v| v.abs() < 1e-12));
            let spec = l.spectrum();
            assert!(spec[0].abs() < 1e-10);
            assert!(spec.iter().all(|e| *e > -1e-10));
            assert_eq!(spec.iter().filter(|e| e.abs() < 1e-10).count(), 1);
        }
    }

    #[test]
    fn disconnected_graph_has_two_zero_modes() {
        let c = Connectome::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        let l = laplacian(&c);
        assert!(l.algebraic_connectivity().abs() < 1e-12);
        assert!(!c.is_connected());
    }

    #[test]
    fn label_resolution() {
        let c = generate_path(3, 1.0)
            .unwrap()
            .with_labels(vec!["entorhinal cortex".into(), "b".into(), "c".into()])
            .unwrap();
        assert_eq!(c.resolve("entorhinal cortex").unwrap(), 0);
        assert_eq!(c.resolve("2").unwrap(), 2);
        assert!(c.resolve("posterior cingulate").is_err());
        assert!(c.resolve("7").is_err());
    }

    #[test]
    fn single_node_matches_homogeneous_model() {
        let p = KineticParameters::abeta42().with_rescale(1e6);
        let law = ClearanceSpec::Constant { lambda: 1e3 };
        let n_max = 40;
        let c = Connectome::from_edges(1, &[]).unwrap();
        let net = NetworkModel::new(
            &p,
            ModelVariant::in_vivo(),
            &c,
            DiffusionSchedule::Constant { rho: 1.0 },
            vec![law.clone()],
            n_max,
        )
        .unwrap();
        let hom = MasterEquation::new(&p, ModelVariant::in_vivo(), law, n_max).unwrap();
        let init = SizeDistribution::seeded(p.m_0, n_max, 1e-4 * p.m_0);
        let y_net = net.initial_state(std::slice::from_ref(&init)).unwrap();
        let y_hom = hom.initial_state(&init).unwrap();
        assert_eq!(y_net, y_hom);
        let cfg = IntegrationConfig::default();
        let a = integrate(&net, &y_net, (0.0, 0.01), &cfg, &[]).unwrap();
        let b = integrate(&hom, &y_hom, (0.0, 0.01), &cfg, &[]).unwrap();
        assert_eq!(a.times, b.times);
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn uniform_state_evolves_like_single_region() {
        let p = KineticParameters::abeta42().with_rescale(1e6);
        let law = ClearanceSpec::Constant { lambda: 2e3 };
        let n_max = 30;
        let c = generate_small_world(12, 4, 0.2, 5).unwrap();
        let net = NetworkModel::new(
            &p,
            ModelVariant::in_vivo(),
            &c,
            DiffusionSchedule::Constant { rho: 50.0 },
            vec![law.clone()],
            n_max,
        )
        .unwrap();
        let hom = MasterEquation::new(&p, ModelVariant::in_vivo(), law, n_max).unwrap();
        let init = SizeDistribution::seeded(p.m_0, n_max, 1e-3 * p.m_0);
        let y_net = net.initial_state(&vec![init.clone(); 12]).unwrap();
        let y_hom = hom.initial_state(&init).unwrap();
        let cfg = IntegrationConfig::default().with_output(OutputGrid::Ends);
        let a = integrate(&net, &y_net, (0.0, 0.005), &cfg, &[]).unwrap();
        let b = integrate(&hom, &y_hom, (0.0, 0.005), &cfg, &[]).unwrap();
        let mb = hom.mass(b.last_state());
        for j in 0..12 {
            let ma = net.node_mass(a.last_state(), j);
            assert!((ma - mb).abs() <= 1e-9 * mb, "node {j}: {ma} vs {mb}");
        }
    }

    #[test]
    fn dynamic_network_requires_dynamic_laws() {
        let p = KineticParameters::abeta42();
        let c = generate_path(3, 1.0).unwrap();
        let sched = DiffusionSchedule::Constant { rho: 1.0 };
        assert!(NetworkModel::new(
            &p,
            ModelVariant::dynamic(),
            &c,
            sched,
            vec![ClearanceSpec::Constant { lambda: 1.0 }],
            10
        )
        .is_err());
        assert!(NetworkModel::new(
            &p,
            ModelVariant::in_vivo(),
            &c,
            sched,
            vec![ClearanceSpec::dynamic_uniform(10, 2.0, 1.0, 1.0)],
            10
        )
        .is_err());
        assert!(NetworkModel::new(
            &p,
            ModelVariant::in_vivo(),
            &c,
            sched,
            vec![ClearanceSpec::Constant { lambda: 1.0 }; 2],
            10
        )
        .is_err());
        let ok = NetworkModel::new(
            &p,
            ModelVariant::dynamic(),
            &c,
            sched,
            vec![ClearanceSpec::dynamic_uniform(10, 2e4, 9e3, 1.0)],
            10,
        )
        .unwrap();
        assert_eq!(ok.dim(), 3 * 19);
        let y = ok.seeded_state(0, 1e-9).unwrap();
        let l = ok.node_clearance(&y, 1).unwrap();
        assert!(l.iter().all(|x| (x - 2e4).abs() < 1e-9));
    }

    #[test]
    fn cube_inverse_schedule() {
        let s = DiffusionSchedule::CubeInverse { rho_0: 8.0 };
        assert_eq!(s.rho(1), 8.0);
        assert_eq!(s.rho(2), 1.0);
        assert_eq!(s.scaled(2.0).rho(2), 2.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn laplacian_symmetric_psd(n in 6usize..40, seed in 0u64..1000, p in 0.0f64..1.0) {
                let c = generate_small_world(n, 4, p, seed).unwrap();
                let l = laplacian(&c);
                for i in 0..n {
                    for j in 0..n {
                        prop_assert_eq!(l.entry(i, j), l.entry(j, i));
                    }
                }
                prop_assert!(l.spectrum()[0] > -1e-9);
            }

            #[test]
            fn transport_conserves_each_species(seed in 0u64..500) {
                let mut p = KineticParameters::abeta42();
                p.k_n = 0.0;
                p.k_2 = 0.0;
                p.k_plus = 0.0;
                let c = generate_small_world(10, 4, 0.3, seed).unwrap();
                let net = NetworkModel::new(
                    &p,
                    ModelVariant::in_vivo(),
                    &c,
                    DiffusionSchedule::Constant { rho: 1.0 },
                    vec![ClearanceSpec::Constant { lambda: 0.0 }],
                    5,
                ).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let y: Vec<f64> = (0..net.dim()).map(|_| rng.random::<f64>()).collect();
                let dy = rhs_network(&net, 0.0, &y).unwrap();
                for s in 0..5 {
                    let total: f64 = dy[s * 10..(s + 1) * 10].iter().sum();
                    prop_assert!(total.abs() < 1e-12);
                }
            }
        }
    }
}
