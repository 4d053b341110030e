//! Graph persistence: a single JSON document, plus CSV edge-list import.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Features, MonitorEntityGraph, NodeId, NodeTable, NodeType, Relation};
use crate::error::{Error, Result};

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Counts {
    monitor: usize,
    metric: usize,
    dimension: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    version: u32,
    counts: Counts,
    seed: Option<u64>,
    d_feat: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    #[serde(rename = "type")]
    ty: NodeType,
    index: usize,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    meta: Meta,
    nodes: Vec<NodeRecord>,
    edges: BTreeMap<String, Vec<[usize; 2]>>,
    /// Keyed by `type:index`.
    features: BTreeMap<String, Vec<f64>>,
}

fn to_file(g: &MonitorEntityGraph) -> GraphFile {
    let [monitor, metric, dimension] = g.counts();
    let mut nodes = Vec::with_capacity(g.num_nodes());
    let mut features = BTreeMap::new();
    for i in 0..g.num_nodes() {
        let n = g.node_at(i);
        nodes.push(NodeRecord {
            ty: n.ty,
            index: n.index,
            name: g.name(n).to_string(),
        });
        if let Some(f) = g.features() {
            features.insert(n.to_string(), f.row(i).to_vec());
        }
    }
    let edges = Relation::ALL
        .into_iter()
        .map(|r| (r.as_str().to_string(), g.edges(r).iter().map(|&(s, d)| [s, d]).collect()))
        .collect();
    GraphFile {
        meta: Meta {
            version: GRAPH_FORMAT_VERSION,
            counts: Counts {
                monitor,
                metric,
                dimension,
            },
            seed: g.seed(),
            d_feat: g.d_feat(),
        },
        nodes,
        edges,
        features,
    }
}

fn from_file(f: GraphFile) -> Result<MonitorEntityGraph> {
    if f.meta.version != GRAPH_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "graph format version {} (expected {GRAPH_FORMAT_VERSION})",
            f.meta.version
        )));
    }
    let counts = [f.meta.counts.monitor, f.meta.counts.metric, f.meta.counts.dimension];
    let mut names: [Vec<Option<String>>; 3] = counts.map(|c| vec![None; c]);
    for rec in f.nodes {
        let slot = names[rec.ty.slot()]
            .get_mut(rec.index)
            .ok_or_else(|| Error::Format(format!("node {}:{} beyond declared count", rec.ty, rec.index)))?;
        if slot.replace(rec.name).is_some() {
            return Err(Error::Format(format!("node {}:{} listed twice", rec.ty, rec.index)));
        }
    }
    let names = names.map(|v| v.into_iter().collect::<Option<Vec<String>>>());
    let [Some(m), Some(k), Some(d)] = names else {
        return Err(Error::Format("node list does not cover every declared node".into()));
    };
    let table = NodeTable::new(m, k, d);

    let mut edges = Vec::new();
    for (key, list) in &f.edges {
        let rel = Relation::parse(key).ok_or_else(|| Error::Format(format!("unknown relation {key:?}")))?;
        edges.extend(
            list.iter()
                .map(|&[s, d]| (rel, NodeId::new(rel.src_type(), s), NodeId::new(rel.dst_type(), d))),
        );
    }

    let features = if f.meta.d_feat == 0 {
        if !f.features.is_empty() {
            return Err(Error::Format("features present but d_feat is 0".into()));
        }
        None
    } else {
        let total: usize = counts.iter().sum();
        let mut data = vec![0.0; total * f.meta.d_feat];
        let mut seen = 0usize;
        let offsets = [0, counts[0], counts[0] + counts[1]];
        for (key, row) in &f.features {
            let (ty, idx) = key
                .split_once(':')
                .and_then(|(t, i)| Some((NodeType::parse(t)?, i.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::Format(format!("bad feature key {key:?}")))?;
            if idx >= counts[ty.slot()] || row.len() != f.meta.d_feat {
                return Err(Error::Format(format!("feature row {key:?} out of range or wrong width")));
            }
            let g = offsets[ty.slot()] + idx;
            data[g * f.meta.d_feat..(g + 1) * f.meta.d_feat].copy_from_slice(row);
            seen += 1;
        }
        if seen != total {
            return Err(Error::Format(format!("{seen} feature rows for {total} nodes")));
        }
        Some(Features::new(f.meta.d_feat, data)?)
    };
    Ok(MonitorEntityGraph::build(table, &edges, features)
        .map_err(|e| Error::Format(e.to_string()))?
        .with_seed(f.meta.seed))
}

pub fn graph_to_json(g: &MonitorEntityGraph) -> Result<String> {
    Ok(serde_json::to_string(&to_file(g))?)
}

pub fn graph_from_json(text: &str) -> Result<MonitorEntityGraph> {
    let f: GraphFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    from_file(f)
}

pub fn save_graph(g: &MonitorEntityGraph, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &to_file(g))?;
    w.flush()?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<MonitorEntityGraph> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let f: GraphFile = serde_json::from_reader(r).map_err(|e| Error::Format(e.to_string()))?;
    from_file(f)
}

#[derive(Debug, Deserialize)]
struct CsvEdge {
    src: String,
    dst: String,
}

/// Builds a graph from three `src,dst` CSV files of node names, one per
/// relation. Node indices follow the sorted order of names per type.
pub fn import_csv(md: &Path, kd: &Path, mk: &Path) -> Result<MonitorEntityGraph> {
    let mut raw: Vec<(Relation, String, String)> = Vec::new();
    for (rel, path) in [
        (Relation::MonitorDimension, md),
        (Relation::MetricDimension, kd),
        (Relation::MonitorMetric, mk),
    ] {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["src", "dst"] {
            return Err(Error::Format(format!("{}: header must be \"src,dst\"", path.display())));
        }
        for rec in rdr.deserialize::<CsvEdge>() {
            let rec = rec?;
            raw.push((rel, rec.src, rec.dst));
        }
    }
    let mut names: [BTreeSet<String>; 3] = Default::default();
    for (rel, s, d) in &raw {
        names[rel.src_type().slot()].insert(s.clone());
        names[rel.dst_type().slot()].insert(d.clone());
    }
    let index: [BTreeMap<String, usize>; 3] = std::array::from_fn(|t| {
        names[t].iter().enumerate().map(|(i, n)| (n.clone(), i)).collect()
    });
    let edges: Vec<(Relation, NodeId, NodeId)> = raw
        .iter()
        .map(|(rel, s, d)| {
            let (st, dt) = (rel.src_type(), rel.dst_type());
            (*rel, NodeId::new(st, index[st.slot()][s]), NodeId::new(dt, index[dt.slot()][d]))
        })
        .collect();
    let [m, k, d] = names.map(|s| s.into_iter().collect::<Vec<_>>());
    MonitorEntityGraph::build(NodeTable::new(m, k, d), &edges, None)
}
