//! Heterogeneous monitor / metric / dimension graph.
//!
//! Nodes are addressed by `(type, index)`. Every node also has a global
//! position (monitors first, then metrics, then dimensions) that doubles as
//! its row in feature and embedding tables.

pub mod features;
pub mod generator;
pub mod io;
pub mod split;
pub mod stats;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{init_node_features, pseudo_embedding, Features};
pub use generator::{generate_synthetic, GeneratorConfig, Relevance};
pub use io::{import_csv, load_graph, save_graph};
pub use split::{split_edges, EdgeSplit};
pub use stats::{degree_distribution, fit_power_law, hurwitz_zeta, DegreeHistogram, PowerLawFit, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    Monitor,
    Metric,
    Dimension,
}

impl NodeType {
    pub const ALL: [NodeType; 3] = [NodeType::Monitor, NodeType::Metric, NodeType::Dimension];

    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeType::Monitor => "monitor",
            NodeType::Metric => "metric",
            NodeType::Dimension => "dimension",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    #[serde(rename = "type")]
    pub ty: NodeType,
    pub index: usize,
}

impl NodeId {
    pub fn new(ty: NodeType, index: usize) -> Self {
        Self { ty, index }
    }

    pub fn monitor(index: usize) -> Self {
        Self::new(NodeType::Monitor, index)
    }

    pub fn metric(index: usize) -> Self {
        Self::new(NodeType::Metric, index)
    }

    pub fn dimension(index: usize) -> Self {
        Self::new(NodeType::Dimension, index)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ty, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "monitor_associated_with_dimension")]
    MonitorDimension,
    #[serde(rename = "metric_has_dimension")]
    MetricDimension,
    #[serde(rename = "monitor_emits_metric")]
    MonitorMetric,
}

impl Relation {
    pub const ALL: [Relation; 3] = [
        Relation::MonitorDimension,
        Relation::MetricDimension,
        Relation::MonitorMetric,
    ];

    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn src_type(self) -> NodeType {
        match self {
            Relation::MonitorDimension | Relation::MonitorMetric => NodeType::Monitor,
            Relation::MetricDimension => NodeType::Metric,
        }
    }

    pub fn dst_type(self) -> NodeType {
        match self {
            Relation::MonitorDimension | Relation::MetricDimension => NodeType::Dimension,
            Relation::MonitorMetric => NodeType::Metric,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::MonitorDimension => "monitor_associated_with_dimension",
            Relation::MetricDimension => "metric_has_dimension",
            Relation::MonitorMetric => "monitor_emits_metric",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Relation::MonitorDimension => "md",
            Relation::MetricDimension => "kd",
            Relation::MonitorMetric => "mk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s || r.short() == s)
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Compressed adjacency: `targets[offsets[i]..offsets[i + 1]]` are the sorted
/// neighbours of row `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Csr {
    /// `pairs` must be sorted and free of duplicates.
    fn from_sorted(rows: usize, pairs: impl Iterator<Item = (usize, usize)>) -> Self {
        let mut offsets = vec![0; rows + 1];
        let mut targets = Vec::new();
        for (s, d) in pairs {
            offsets[s + 1] += 1;
            targets.push(d);
        }
        for i in 0..rows {
            offsets[i + 1] += offsets[i];
        }
        Self { offsets, targets }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, row: usize) -> &[usize] {
        &self.targets[self.offsets[row]..self.offsets[row + 1]]
    }

    pub fn degree(&self, row: usize) -> usize {
        self.offsets[row + 1] - self.offsets[row]
    }

    pub fn contains(&self, row: usize, target: usize) -> bool {
        self.neighbors(row).binary_search(&target).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.targets.len()
    }
}

/// Names of every node, per type. Counts are implied by the lengths.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeTable {
    pub names: [Vec<String>; 3],
}

impl NodeTable {
    pub fn new(monitors: Vec<String>, metrics: Vec<String>, dimensions: Vec<String>) -> Self {
        Self {
            names: [monitors, metrics, dimensions],
        }
    }

    /// Names of the form `monitor-0`, `metric-3`, ...
    pub fn numbered(monitors: usize, metrics: usize, dimensions: usize) -> Self {
        let make = |ty: NodeType, n: usize| (0..n).map(|i| format!("{ty}-{i}")).collect();
        Self::new(
            make(NodeType::Monitor, monitors),
            make(NodeType::Metric, metrics),
            make(NodeType::Dimension, dimensions),
        )
    }

    pub fn count(&self, ty: NodeType) -> usize {
        self.names[ty.slot()].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorEntityGraph {
    nodes: NodeTable,
    edges: [Vec<(usize, usize)>; 3],
    fwd: [Csr; 3],
    rev: [Csr; 3],
    features: Option<Features>,
    seed: Option<u64>,
}

impl MonitorEntityGraph {
    /// Validates and indexes a graph. Edges may arrive in any order; they are
    /// stored sorted by `(src, dst)`.
    pub fn build(
        nodes: NodeTable,
        edges: &[(Relation, NodeId, NodeId)],
        features: Option<Features>,
    ) -> Result<Self> {
        for ty in NodeType::ALL {
            if let Some(i) = nodes.names[ty.slot()].iter().position(|n| n.is_empty()) {
                return Err(Error::Graph(format!("{ty} {i} has an empty name")));
            }
        }
        let mut sets: [BTreeSet<(usize, usize)>; 3] = Default::default();
        for &(rel, src, dst) in edges {
            if src.ty != rel.src_type() || dst.ty != rel.dst_type() {
                return Err(Error::Graph(format!(
                    "schema violation: {src} -> {dst} under {rel} (expects {} -> {})",
                    rel.src_type(),
                    rel.dst_type()
                )));
            }
            for n in [src, dst] {
                if n.index >= nodes.count(n.ty) {
                    return Err(Error::Graph(format!(
                        "dangling node {n}: only {} {} nodes",
                        nodes.count(n.ty),
                        n.ty
                    )));
                }
            }
            if !sets[rel.slot()].insert((src.index, dst.index)) {
                return Err(Error::Graph(format!("duplicate edge {src} -> {dst} under {rel}")));
            }
        }
        let edges: [Vec<(usize, usize)>; 3] = sets.map(|s| s.into_iter().collect());
        Self::from_sorted_edges(nodes, edges, features, None)
    }

    pub(crate) fn from_sorted_edges(
        nodes: NodeTable,
        edges: [Vec<(usize, usize)>; 3],
        features: Option<Features>,
        seed: Option<u64>,
    ) -> Result<Self> {
        let fwd = std::array::from_fn(|r| {
            let rel = Relation::ALL[r];
            Csr::from_sorted(nodes.count(rel.src_type()), edges[r].iter().copied())
        });
        let rev = std::array::from_fn(|r| {
            let rel = Relation::ALL[r];
            let mut flipped: Vec<(usize, usize)> = edges[r].iter().map(|&(s, d)| (d, s)).collect();
            flipped.sort_unstable();
            Csr::from_sorted(nodes.count(rel.dst_type()), flipped.into_iter())
        });
        let g = Self {
            nodes,
            edges,
            fwd,
            rev,
            features: None,
            seed,
        };
        match features {
            Some(f) => g.with_features(f),
            None => Ok(g),
        }
    }

    /// Attaches intrinsic features, replacing any existing ones.
    pub fn with_features(mut self, features: Features) -> Result<Self> {
        if features.rows() != self.num_nodes() {
            return Err(Error::Graph(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                self.num_nodes()
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub(crate) fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    /// Same nodes and features with a different `monitor_associated_with_dimension`
    /// edge set. Used to hide held-out edges from message passing.
    pub fn with_md_edges(&self, md: &[(usize, usize)]) -> Result<Self> {
        let edges: Vec<(Relation, NodeId, NodeId)> = md
            .iter()
            .map(|&(m, d)| (Relation::MonitorDimension, NodeId::monitor(m), NodeId::dimension(d)))
            .chain(self.typed_edges(Relation::MetricDimension))
            .chain(self.typed_edges(Relation::MonitorMetric))
            .collect();
        Ok(Self::build(self.nodes.clone(), &edges, self.features.clone())?.with_seed(self.seed))
    }

    fn typed_edges(&self, rel: Relation) -> impl Iterator<Item = (Relation, NodeId, NodeId)> + '_ {
        self.edges[rel.slot()].iter().map(move |&(s, d)| {
            (rel, NodeId::new(rel.src_type(), s), NodeId::new(rel.dst_type(), d))
        })
    }

    pub fn count(&self, ty: NodeType) -> usize {
        self.nodes.count(ty)
    }

    pub fn counts(&self) -> [usize; 3] {
        NodeType::ALL.map(|t| self.count(t))
    }

    pub fn num_nodes(&self) -> usize {
        self.counts().iter().sum()
    }

    pub fn nodes(&self) -> &NodeTable {
        &self.nodes
    }

    pub fn name(&self, n: NodeId) -> &str {
        &self.nodes.names[n.ty.slot()][n.index]
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn edges(&self, rel: Relation) -> &[(usize, usize)] {
        &self.edges[rel.slot()]
    }

    pub fn num_edges(&self, rel: Relation) -> usize {
        self.edges[rel.slot()].len()
    }

    /// Forward adjacency: destinations of `src` under `rel`.
    pub fn out(&self, rel: Relation) -> &Csr {
        &self.fwd[rel.slot()]
    }

    /// Reverse adjacency: sources pointing at `dst` under `rel`.
    pub fn inc(&self, rel: Relation) -> &Csr {
        &self.rev[rel.slot()]
    }

    pub fn has_edge(&self, rel: Relation, src: usize, dst: usize) -> bool {
        self.fwd[rel.slot()].contains(src, dst)
    }

    /// Neighbours of `n` under `rel`, in whichever direction `n` participates.
    pub fn neighbors(&self, rel: Relation, n: NodeId) -> &[usize] {
        if n.ty == rel.src_type() {
            self.fwd[rel.slot()].neighbors(n.index)
        } else if n.ty == rel.dst_type() {
            self.rev[rel.slot()].neighbors(n.index)
        } else {
            &[]
        }
    }

    /// Row of `n` in node-level tables.
    pub fn global_index(&self, n: NodeId) -> usize {
        self.offset(n.ty) + n.index
    }

    pub fn offset(&self, ty: NodeType) -> usize {
        NodeType::ALL[..ty.slot()].iter().map(|&t| self.count(t)).sum()
    }

    pub fn node_at(&self, global: usize) -> NodeId {
        let mut rest = global;
        for ty in NodeType::ALL {
            if rest < self.count(ty) {
                return NodeId::new(ty, rest);
            }
            rest -= self.count(ty);
        }
        panic!("global index {global} out of range");
    }

    pub fn features(&self) -> Option<&Features> {
        self.features.as_ref()
    }

    pub fn d_feat(&self) -> usize {
        self.features.as_ref().map_or(0, |f| f.dim())
    }

    /// Dimensions emitted by at least one metric of `monitor`, sorted.
    pub fn closure(&self, monitor: usize) -> Vec<usize> {
        let mut out = BTreeSet::new();
        for &k in self.out(Relation::MonitorMetric).neighbors(monitor) {
            out.extend(self.out(Relation::MetricDimension).neighbors(k).iter().copied());
        }
        out.into_iter().collect()
    }

    /// Checks that every `monitor_associated_with_dimension` edge is backed
    /// by a metric of the monitor that emits the dimension.
    pub fn closure_violations(&self) -> usize {
        self.edges(Relation::MonitorDimension)
            .iter()
            .filter(|&&(m, d)| {
                !self
                    .out(Relation::MonitorMetric)
                    .neighbors(m)
                    .iter()
                    .any(|&k| self.has_edge(Relation::MetricDimension, k, d))
            })
            .count()
    }
}
