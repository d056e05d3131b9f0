use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Edge, KnowledgeGraph};
use super::hash::{hash_u64s, unit_interval};
use super::{DataError, Result};

/// A hop-bounded slice of a parent graph around a set of seed entities.
///
/// Edges keep the parent's id space. After [`perturb_structure`] the edge
/// tuples may no longer occur in the parent edge list (that is the point of
/// a structural perturbation); endpoints and relations always stay inside
/// the parent's indices.
#[derive(Debug, Clone)]
pub struct EntitySubgraph<'g> {
    pub graph: &'g KnowledgeGraph,
    pub seeds: BTreeSet<usize>,
    pub edges: Vec<Edge>,
    pub hop_bound: usize,
}

impl<'g> EntitySubgraph<'g> {
    /// Seed nodes plus all edge endpoints, ascending.
    pub fn node_ids(&self) -> Vec<usize> {
        let mut nodes: BTreeSet<usize> = self.seeds.clone();
        for &(h, _, t) in &self.edges {
            nodes.insert(h);
            nodes.insert(t);
        }
        nodes.into_iter().collect()
    }

    /// Nodes incident to at least one included edge, ascending.
    ///
    /// This is the set of entities the fusion stage may resolve mentions
    /// against: a seed that lost all its edges carries no structural signal.
    pub fn connected_node_ids(&self) -> Vec<usize> {
        let mut nodes: BTreeSet<usize> = BTreeSet::new();
        for &(h, _, t) in &self.edges {
            nodes.insert(h);
            nodes.insert(t);
        }
        nodes.into_iter().collect()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Extract the subgraph reachable within `hops` undirected hops of any seed.
///
/// An edge is included iff one of its endpoints lies within `hops - 1` of a
/// seed, so every included endpoint is within `hops`. `hops = 0` yields the
/// seed nodes and no edges.
pub fn extract_subgraph<'g>(
    graph: &'g KnowledgeGraph,
    seeds: &BTreeSet<usize>,
    hops: usize,
) -> Result<EntitySubgraph<'g>> {
    if seeds.is_empty() {
        return Err(DataError::UnknownEntity("<empty seed set>".into()));
    }
    for &s in seeds {
        if s >= graph.n_entities() {
            return Err(DataError::UnknownEntity(format!("node id {s}")));
        }
    }
    // Multi-source BFS over undirected adjacency up to depth hops - 1.
    let mut dist: HashMap<usize, usize> = HashMap::new();
    let mut queue = VecDeque::new();
    for &s in seeds {
        dist.insert(s, 0);
        queue.push_back(s);
    }
    let inner = match hops {
        0 => {
            return Ok(EntitySubgraph {
                graph,
                seeds: seeds.clone(),
                edges: Vec::new(),
                hop_bound: 0,
            })
        }
        h => h - 1,
    };
    while let Some(v) = queue.pop_front() {
        let d = dist[&v];
        if d >= inner {
            continue;
        }
        for &(_, t) in graph.outgoing(v) {
            if !dist.contains_key(&t) {
                dist.insert(t, d + 1);
                queue.push_back(t);
            }
        }
        for &(_, h) in graph.incoming(v) {
            if !dist.contains_key(&h) {
                dist.insert(h, d + 1);
                queue.push_back(h);
            }
        }
    }
    let edges: Vec<Edge> = graph
        .edges()
        .iter()
        .copied()
        .filter(|&(h, _, t)| dist.contains_key(&h) || dist.contains_key(&t))
        .collect();
    Ok(EntitySubgraph {
        graph,
        seeds: seeds.clone(),
        edges,
        hop_bound: hops,
    })
}

/// Resolve seed entity names against the graph, failing on unknown names.
pub fn seeds_by_name(graph: &KnowledgeGraph, names: &[&str]) -> Result<BTreeSet<usize>> {
    names
        .iter()
        .map(|n| {
            graph
                .entity_id(n)
                .ok_or_else(|| DataError::UnknownEntity(n.to_string()))
        })
        .collect()
}

/// Keep each edge iff `hash(edge, seed)` maps below `p`.
///
/// Threshold sampling makes coverage levels nested for a fixed seed:
/// the p = 0.3 edge set is a subset of the p = 0.7 edge set, so coverage
/// sweeps compare monotone graph slices rather than independent resamples.
/// Seed nodes are always retained as nodes.
pub fn sample_coverage<'g>(
    sub: &EntitySubgraph<'g>,
    p: f64,
    seed: u64,
) -> Result<EntitySubgraph<'g>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DataError::OutOfRange {
            what: "coverage p",
            value: p,
        });
    }
    let edges: Vec<Edge> = sub
        .edges
        .iter()
        .copied()
        .filter(|&(h, r, t)| {
            unit_interval(hash_u64s(seed, &[h as u64, r as u64, t as u64])) < p
        })
        .collect();
    Ok(EntitySubgraph {
        graph: sub.graph,
        seeds: sub.seeds.clone(),
        edges,
        hop_bound: sub.hop_bound,
    })
}

/// The supported structural corruption modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    DeleteEdges,
    RelabelRelations,
    SwapEndpoints,
}

impl PerturbMode {
    pub const ALL: [PerturbMode; 3] = [
        PerturbMode::DeleteEdges,
        PerturbMode::RelabelRelations,
        PerturbMode::SwapEndpoints,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbMode::DeleteEdges => "delete_edges",
            PerturbMode::RelabelRelations => "relabel_relations",
            PerturbMode::SwapEndpoints => "swap_endpoints",
        }
    }
}

impl std::str::FromStr for PerturbMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "delete_edges" => Ok(PerturbMode::DeleteEdges),
            "relabel_relations" => Ok(PerturbMode::RelabelRelations),
            "swap_endpoints" => Ok(PerturbMode::SwapEndpoints),
            other => Err(format!("unknown perturbation mode `{other}`")),
        }
    }
}

/// Corrupt the subgraph structure at the given rate, deterministically per
/// seed.
///
/// - `DeleteEdges` drops each edge with probability `rate`.
/// - `RelabelRelations` reassigns each selected edge a uniformly random
///   *different* relation id (requires >= 2 relations).
/// - `SwapEndpoints` rotates the tails of the selected edges so every
///   selected edge receives the tail of another selected edge.
///
/// Duplicate edges produced by a perturbation collapse to one, keeping the
/// edge list a set.
pub fn perturb_structure<'g>(
    sub: &EntitySubgraph<'g>,
    mode: PerturbMode,
    rate: f64,
    seed: u64,
) -> Result<EntitySubgraph<'g>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(DataError::OutOfRange {
            what: "perturbation rate",
            value: rate,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = match mode {
        PerturbMode::DeleteEdges => sub
            .edges
            .iter()
            .copied()
            .filter(|_| !(rng.random::<f64>() < rate))
            .collect(),
        PerturbMode::RelabelRelations => {
            let n_rel = sub.graph.n_relations();
            if n_rel < 2 {
                return Err(DataError::UnsupportedPerturbation(n_rel));
            }
            let mut out = Vec::with_capacity(sub.edges.len());
            for &(h, r, t) in &sub.edges {
                if rng.random::<f64>() < rate {
                    let mut new_r = rng.random_range(0..n_rel - 1);
                    if new_r >= r {
                        new_r += 1;
                    }
                    out.push((h, new_r, t));
                } else {
                    out.push((h, r, t));
                }
            }
            out
        }
        PerturbMode::SwapEndpoints => {
            let selected: Vec<usize> = (0..sub.edges.len())
                .filter(|_| rng.random::<f64>() < rate)
                .collect();
            let mut out = sub.edges.clone();
            if selected.len() >= 2 {
                // Random cyclic rotation: a fixed-point-free permutation of
                // the selected tails.
                let offset = rng.random_range(1..selected.len());
                let tails: Vec<usize> = selected.iter().map(|&i| out[i].2).collect();
                for (k, &i) in selected.iter().enumerate() {
                    out[i].2 = tails[(k + offset) % selected.len()];
                }
            }
            out
        }
    };
    // Dedup while preserving order.
    let mut seen = HashSet::new();
    let edges: Vec<Edge> = edges.into_iter().filter(|e| seen.insert(*e)).collect();
    Ok(EntitySubgraph {
        graph: sub.graph,
        seeds: sub.seeds.clone(),
        edges,
        hop_bound: sub.hop_bound,
    })
}
