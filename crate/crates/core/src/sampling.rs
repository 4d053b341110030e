//! Mini-batch samplers: multi-hop subgraphs around supervision edges,
//! corrupted negatives, and schema-constrained random walks.
//!
//! Every sampler is a pure function of its arguments; randomness comes from
//! a ChaCha stream keyed by the caller's seed.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::split::corrupt_destination;
use crate::graph::{MonitorEntityGraph, NodeId, NodeType, Relation};

/// Walk attempts before a dead-ended path is padded.
pub const MAX_WALK_RETRIES: usize = 10;
/// Restarts allowed within one attempt when `restart_p > 0`.
const MAX_RESTARTS: usize = 1000;

/// Mixes `parts` into `base` (splitmix64 finaliser per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

/// Nodes reached from a batch of seed edges, with the edges used to reach
/// them. Local indices are per type; `nodes[t][i]` is the graph index of
/// local node `i` of type `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    pub seeds: Vec<(usize, usize)>,
    pub nodes: [Vec<usize>; 3],
    /// Per relation, `(local src, local dst)` pairs, sorted.
    pub edges: [Vec<(usize, usize)>; 3],
}

impl Subgraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.iter().map(Vec::len).sum()
    }

    pub fn local(&self, n: NodeId) -> Option<usize> {
        self.nodes[n.ty.slot()].binary_search(&n.index).ok()
    }

    pub fn global(&self, ty: NodeType, local: usize) -> NodeId {
        NodeId::new(ty, self.nodes[ty.slot()][local])
    }

    /// Every node of the graph and every edge. Used for full-graph inference.
    pub fn full(g: &MonitorEntityGraph) -> Self {
        Self {
            seeds: Vec::new(),
            nodes: g.counts().map(|c| (0..c).collect()),
            edges: Relation::ALL.map(|r| g.edges(r).to_vec()),
        }
    }
}

/// Samples up to `fanout` neighbours per node, relation and hop, starting
/// from both endpoints of every seed `(monitor, dimension)` edge. Seed edges
/// are never used as message edges. `fanout = None` keeps all neighbours.
pub fn sample_subgraph(
    g: &MonitorEntityGraph,
    batch: &[(usize, usize)],
    hops: usize,
    fanout: Option<usize>,
    seed: u64,
) -> Result<Subgraph> {
    if batch.is_empty() {
        return Err(Error::Sampling("empty seed batch".into()));
    }
    if hops == 0 || fanout == Some(0) {
        return Err(Error::Sampling("hops and fanout must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let excluded: HashSet<(usize, usize)> = batch.iter().copied().collect();
    let mut seen: BTreeSet<NodeId> = BTreeSet::new();
    for &(m, d) in batch {
        seen.insert(NodeId::monitor(m));
        seen.insert(NodeId::dimension(d));
    }
    let mut frontier: Vec<NodeId> = seen.iter().copied().collect();
    let mut edges: [BTreeSet<(usize, usize)>; 3] = Default::default();
    for _ in 0..hops {
        let mut next = BTreeSet::new();
        for &v in &frontier {
            for rel in Relation::ALL {
                let is_src = v.ty == rel.src_type();
                if !is_src && v.ty != rel.dst_type() {
                    continue;
                }
                let mut nbrs: Vec<usize> = g.neighbors(rel, v).to_vec();
                if rel == Relation::MonitorDimension {
                    nbrs.retain(|&u| {
                        let e = if is_src { (v.index, u) } else { (u, v.index) };
                        !excluded.contains(&e)
                    });
                }
                if let Some(f) = fanout {
                    if nbrs.len() > f {
                        let picked = rand::seq::index::sample(&mut rng, nbrs.len(), f);
                        let mut keep: Vec<usize> = picked.into_iter().map(|i| nbrs[i]).collect();
                        keep.sort_unstable();
                        nbrs = keep;
                    }
                }
                let other_ty = if is_src { rel.dst_type() } else { rel.src_type() };
                for u in nbrs {
                    let e = if is_src { (v.index, u) } else { (u, v.index) };
                    edges[rel.slot()].insert(e);
                    let w = NodeId::new(other_ty, u);
                    if seen.insert(w) {
                        next.insert(w);
                    }
                }
            }
        }
        frontier = next.into_iter().collect();
    }
    let mut nodes: [Vec<usize>; 3] = Default::default();
    for n in &seen {
        nodes[n.ty.slot()].push(n.index);
    }
    let locals: [BTreeMap<usize, usize>; 3] =
        std::array::from_fn(|t| nodes[t].iter().enumerate().map(|(i, &g)| (g, i)).collect());
    let edges = std::array::from_fn(|r| {
        let rel = Relation::ALL[r];
        let (st, dt) = (rel.src_type().slot(), rel.dst_type().slot());
        edges[r]
            .iter()
            .map(|&(s, d)| (locals[st][&s], locals[dt][&d]))
            .collect()
    });
    Ok(Subgraph {
        seeds: batch.to_vec(),
        nodes,
        edges,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Reproducible per seed.
    Fixed,
    /// Keyed additionally by a per-call stream id (e.g. epoch and batch).
    Dynamic { stream: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeBatch {
    /// Corrupted `(monitor, dimension)` pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Index of the positive each negative was derived from.
    pub owner: Vec<usize>,
    pub ratio: f64,
}

/// `round(ratio · |positives|)` negatives; negative `j` corrupts the
/// dimension of positive `j mod |positives|`, uniformly over dimensions not
/// linked to the monitor in `g`.
pub fn sample_negatives(
    g: &MonitorEntityGraph,
    positives: &[(usize, usize)],
    ratio: f64,
    mode: NegativeMode,
    seed: u64,
) -> Result<NegativeBatch> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::Sampling(format!("negative ratio {ratio} must be positive")));
    }
    if positives.is_empty() {
        return Err(Error::Sampling("no positives to corrupt".into()));
    }
    let mut rng = match mode {
        NegativeMode::Fixed => rng_for(seed, &[0x4E45_47]),
        NegativeMode::Dynamic { stream } => rng_for(seed, &[0x4E45_47, stream]),
    };
    let n = (ratio * positives.len() as f64).round() as usize;
    let mut pairs = Vec::with_capacity(n);
    let mut owner = Vec::with_capacity(n);
    for j in 0..n {
        let i = j % positives.len();
        let m = positives[i].0;
        let d = corrupt_destination(g, Relation::MonitorDimension, m, 1, false, &mut rng)?[0];
        pairs.push((m, d));
        owner.push(i);
    }
    Ok(NegativeBatch { pairs, owner, ratio })
}

/// A walk following the monitor → metric → dimension → metric → monitor
/// schema (or its reverse when starting at a dimension).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathSample {
    pub nodes: Vec<NodeId>,
    /// `relations[i]` joins `nodes[i]` and `nodes[i + 1]`.
    pub relations: Vec<Relation>,
    /// `false` marks padding after a dead end.
    pub mask: Vec<bool>,
    pub seed: u64,
}

impl PathSample {
    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn is_padded(&self) -> bool {
        self.mask.iter().any(|&m| !m)
    }
}

/// Path lengths the schema admits: `2 + 4j`.
pub fn is_schema_length(len: usize) -> bool {
    len >= 2 && (len - 2) % 4 == 0
}

/// Node type cycle for walks from `start`.
fn schema_types(start: NodeType) -> Result<[NodeType; 4]> {
    match start {
        NodeType::Monitor => Ok([NodeType::Monitor, NodeType::Metric, NodeType::Dimension, NodeType::Metric]),
        NodeType::Dimension => Ok([NodeType::Dimension, NodeType::Metric, NodeType::Monitor, NodeType::Metric]),
        NodeType::Metric => Err(Error::Sampling("walks start at monitors or dimensions".into())),
    }
}

fn relation_between(a: NodeType, b: NodeType) -> Relation {
    use NodeType::*;
    match (a, b) {
        (Monitor, Metric) | (Metric, Monitor) => Relation::MonitorMetric,
        (Metric, Dimension) | (Dimension, Metric) => Relation::MetricDimension,
        _ => Relation::MonitorDimension,
    }
}

/// Samples `samples` walks of `len` steps from `target`. Each step moves to
/// a uniformly chosen neighbour of the type the schema requires next.
pub fn sample_paths(
    g: &MonitorEntityGraph,
    target: NodeId,
    len: usize,
    samples: usize,
    restart_p: f64,
    seed: u64,
) -> Result<Vec<PathSample>> {
    if !is_schema_length(len) {
        return Err(Error::Sampling(format!("path length {len} is not of the form 2 + 4j")));
    }
    if samples == 0 {
        return Err(Error::Sampling("at least one path sample is required".into()));
    }
    if !(0.0..1.0).contains(&restart_p) {
        return Err(Error::Sampling(format!("restart probability {restart_p} must lie in [0, 1)")));
    }
    let types = schema_types(target.ty)?;
    let first_rel = relation_between(types[0], types[1]);
    if g.neighbors(first_rel, target).is_empty() {
        return Err(Error::Sampling(format!("{target} has no {} neighbour to start a walk", types[1])));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut best: Vec<NodeId> = vec![target];
        for _attempt in 0..MAX_WALK_RETRIES {
            let walk = walk_once(g, target, &types, len, restart_p, &mut rng);
            let done = walk.len() == len + 1;
            if walk.len() > best.len() {
                best = walk;
            }
            if done {
                break;
            }
        }
        let real = best.len();
        let last = *best.last().expect("walk holds the target");
        best.resize(len + 1, last);
        let relations = (0..len)
            .map(|i| relation_between(types[i % 4], types[(i + 1) % 4]))
            .collect();
        out.push(PathSample {
            nodes: best,
            relations,
            mask: (0..=len).map(|i| i < real).collect(),
            seed,
        });
    }
    Ok(out)
}

fn walk_once(
    g: &MonitorEntityGraph,
    target: NodeId,
    types: &[NodeType; 4],
    len: usize,
    restart_p: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<NodeId> {
    let mut walk = vec![target];
    let mut restarts = 0;
    while walk.len() <= len {
        if restart_p > 0.0 && walk.len() > 1 && restarts < MAX_RESTARTS && rng.random::<f64>() < restart_p {
            walk.truncate(1);
            restarts += 1;
            continue;
        }
        let step = walk.len() - 1;
        let cur = walk[step];
        let next_ty = types[(step + 1) % 4];
        let nbrs = g.neighbors(relation_between(cur.ty, next_ty), cur);
        if nbrs.is_empty() {
            break;
        }
        walk.push(NodeId::new(next_ty, nbrs[rng.random_range(0..nbrs.len())]));
    }
    walk
}
