//! Relation-aware multi-head graph attention with a random-walk path branch.
//!
//! A forward pass has two stages. [`Model::propagate`] runs the stacked
//! attention layers over a [`Subgraph`] and yields one row per node.
//! [`Model::readout`] then encodes sampled meta-paths for a set of target
//! rows, attends over them from each target, and mixes the result with the
//! target's graph representation.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{MonitorEntityGraph, NodeId, NodeType, Relation};
use crate::sampling::{derive_seed, is_schema_length, sample_paths, PathSample, Subgraph};
use crate::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Average over unmasked positions.
    Mean,
    /// The target's own position.
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub out: usize,
    pub heads: usize,
    pub path_lengths: Vec<usize>,
    pub paths_per_node: usize,
    pub restart_p: f64,
    pub pooling: Pooling,
    pub use_rwa: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            layers: 3,
            hidden: 64,
            out: 32,
            heads: 4,
            path_lengths: vec![2, 6, 10],
            paths_per_node: 5,
            restart_p: 0.0,
            pooling: Pooling::Mean,
            use_rwa: true,
            dropout: 0.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            hidden: 256,
            out: 128,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.layers == 0 {
            return bad("at least one attention layer is required".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 || self.out % self.heads != 0 {
            return bad(format!(
                "hidden {} and out {} must be divisible by {} heads",
                self.hidden, self.out, self.heads
            ));
        }
        if self.dropout != 0.0 {
            return bad("dropout is not supported; set it to 0".into());
        }
        if self.use_rwa {
            if self.path_lengths.is_empty() || self.paths_per_node == 0 {
                return bad("the path branch needs at least one path length and one sample".into());
            }
            if let Some(l) = self.path_lengths.iter().find(|&&l| !is_schema_length(l)) {
                return bad(format!("path length {l} is not of the form 2 + 4j"));
            }
        }
        if !(0.0..1.0).contains(&self.restart_p) {
            return bad(format!("restart probability {} must lie in [0, 1)", self.restart_p));
        }
        Ok(())
    }

    /// Width of layer `l`'s output.
    pub fn layer_out(&self, l: usize) -> usize {
        if l + 1 == self.layers {
            self.out
        } else {
            self.hidden
        }
    }

    pub fn max_path_len(&self) -> usize {
        self.path_lengths.iter().copied().max().unwrap_or(0)
    }
}

/// Where each parameter lives in [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    /// `[layer][relation] -> (wq, wk, wv)`
    proj: Vec<[(usize, usize, usize); 3]>,
    update: Vec<usize>,
    path: (usize, usize, usize),
    mix: usize,
}

impl Layout {
    fn new(layers: usize) -> Self {
        let mut next = 0;
        let mut take = || {
            next += 1;
            next - 1
        };
        let mut proj = Vec::new();
        let mut update = Vec::new();
        for _ in 0..layers {
            proj.push(std::array::from_fn(|_| (take(), take(), take())));
            update.push(take());
        }
        let path = (take(), take(), take());
        let mix = take();
        Self { proj, update, path, mix }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub d_feat: usize,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    layout: Layout,
}

/// Uniform `(−a, a)` with `a = √(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

impl Model {
    pub fn new(config: ModelConfig, d_feat: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if d_feat == 0 {
            return Err(Error::InvalidArgument("feature width must be positive".into()));
        }
        let layout = Layout::new(config.layers);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x494E_4954]));
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, rows, cols, rng: &mut ChaCha8Rng| {
            names.push(name);
            params.push(glorot(rows, cols, rng).with_grad());
        };
        for l in 0..config.layers {
            let d_in = if l == 0 { d_feat } else { config.hidden };
            for rel in Relation::ALL {
                for w in ["wq", "wk", "wv"] {
                    add(format!("layer{l}.{}.{w}", rel.short()), d_in, config.hidden, &mut rng);
                }
            }
            add(format!("layer{l}.update"), d_in + config.hidden, config.layer_out(l), &mut rng);
        }
        for w in ["wq", "wk", "wv"] {
            add(format!("path.{w}"), d_feat, config.out, &mut rng);
        }
        add("mix".into(), 2 * config.out, config.out, &mut rng);
        Ok(Self {
            config,
            d_feat,
            names,
            params,
            layout,
        })
    }

    /// Rebuilds a model around stored parameter values.
    pub fn from_params(config: ModelConfig, d_feat: usize, params: Vec<Tensor>) -> Result<Self> {
        let mut m = Self::new(config, d_feat, 0)?;
        if params.len() != m.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter tensors, expected {}",
                params.len(),
                m.params.len()
            )));
        }
        for (i, (old, new)) in m.params.iter().zip(&params).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    m.names[i],
                    new.shape(),
                    old.shape()
                )));
            }
        }
        m.params = params.into_iter().map(Tensor::with_grad).collect();
        Ok(m)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    /// Records every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Params {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.variable(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Params {
            vars,
            layout: self.layout.clone(),
        }
    }

    /// Wraps variables already on a tape, in [`Model::names`] order.
    pub fn wrap(&self, vars: Vec<Var>) -> Result<Params> {
        if vars.len() != self.params.len() {
            return Err(shape_err("wrap", format!("{} variables for {} parameters", vars.len(), self.params.len())));
        }
        Ok(Params {
            vars,
            layout: self.layout.clone(),
        })
    }

    /// Runs the attention layers over `sub`, returning node rows ordered as
    /// [`EdgeIndex::row`] and one attention record per layer.
    pub fn propagate(
        &self,
        tape: &mut Tape,
        p: &Params,
        g: &MonitorEntityGraph,
        sub: &Subgraph,
    ) -> Result<(Var, EdgeIndex, Vec<AttentionRecord>)> {
        let index = EdgeIndex::new(sub);
        let h0 = input_features(g, sub, self.d_feat)?;
        let mut h = tape.constant(h0);
        let mut records = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (next, rec) = self.attention_layer(tape, p, &index, h, l)?;
            h = next;
            records.push(rec);
        }
        Ok((h, index, records))
    }

    /// One relation-aware attention layer.
    pub fn attention_layer(
        &self,
        tape: &mut Tape,
        p: &Params,
        index: &EdgeIndex,
        h: Var,
        l: usize,
    ) -> Result<(Var, AttentionRecord)> {
        let cfg = &self.config;
        let n = index.num_nodes();
        if tape.value(h).rows() != n {
            return Err(shape_err(
                "attention_layer",
                format!("{} input rows for {n} nodes", tape.value(h).rows()),
            ));
        }
        let mut blocks_by_type: [Option<Var>; 3] = [None; 3];
        for t in NodeType::ALL {
            if index.counts[t.slot()] > 0 {
                let rows: Rc<[usize]> = (index.offsets[t.slot()]..index.offsets[t.slot()] + index.counts[t.slot()]).collect();
                blocks_by_type[t.slot()] = Some(tape.gather_rows(h, rows)?);
            }
        }
        let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
        let mut proj: BTreeMap<(usize, NodeType), (Var, Var, Var)> = BTreeMap::new();
        for block in &index.blocks {
            if block.len == 0 {
                continue;
            }
            let r = block.relation.slot();
            let (wq, wk, wv) = p.layout.proj[l][r];
            for t in [block.recv_type, block.send_type] {
                if let std::collections::btree_map::Entry::Vacant(e) = proj.entry((r, t)) {
                    let x = blocks_by_type[t.slot()].expect("endpoint type present");
                    let q = tape.matmul(x, p.vars[wq])?;
                    let k = tape.matmul(x, p.vars[wk])?;
                    let v = tape.matmul(x, p.vars[wv])?;
                    e.insert((q, k, v));
                }
            }
            let (q_recv, _, _) = proj[&(r, block.recv_type)];
            let (_, k_send, v_send) = proj[&(r, block.send_type)];
            qs.push(tape.gather_rows(q_recv, block.recv_local.clone())?);
            ks.push(tape.gather_rows(k_send, block.send_local.clone())?);
            vs.push(tape.gather_rows(v_send, block.send_local.clone())?);
        }
        let (msg, alpha) = if qs.is_empty() {
            (tape.constant(Tensor::zeros(&[n, cfg.hidden])), None)
        } else {
            let q = tape.concat_rows(&qs)?;
            let k = tape.concat_rows(&ks)?;
            let v = tape.concat_rows(&vs)?;
            let scores = tape.head_dot(q, k, cfg.heads)?;
            let scores = tape.scale(scores, 1.0 / (cfg.hidden as f64).sqrt())?;
            let alpha = tape.segment_softmax(scores, index.receivers.clone(), n)?;
            let weighted = tape.head_scale(v, alpha, cfg.heads)?;
            (tape.scatter_add_rows(weighted, index.receivers.clone(), n)?, Some(alpha))
        };
        let joined = tape.concat(h, msg)?;
        let lin = tape.matmul(joined, p.vars[p.layout.update[l]])?;
        let out = tape.relu(lin)?;
        Ok((
            out,
            AttentionRecord {
                layer: l,
                heads: cfg.heads,
                alpha,
                receivers: index.receivers.clone(),
                senders: index.senders.clone(),
                blocks: index.blocks.iter().map(BlockSpan::from).collect(),
            },
        ))
    }

    /// Final representations for `rows` of `h`; `paths[i]` are the walks of
    /// target `i`. Targets without walks use a zero path branch.
    pub fn readout(
        &self,
        tape: &mut Tape,
        p: &Params,
        g: &MonitorEntityGraph,
        h: Var,
        rows: &[usize],
        paths: &[Vec<PathSample>],
    ) -> Result<Readout> {
        let cfg = &self.config;
        if rows.len() != paths.len() {
            return Err(shape_err("readout", format!("{} targets, {} path sets", rows.len(), paths.len())));
        }
        if tape.value(h).cols() != cfg.out {
            return Err(shape_err("readout", format!("rows of width {}, expected {}", tape.value(h).cols(), cfg.out)));
        }
        let t = rows.len();
        let ht = tape.gather_rows(h, rows.iter().copied().collect())?;
        let has_paths = cfg.use_rwa && paths.iter().any(|ps| !ps.is_empty());
        let (rwa, path_attention, rwa_weights, path_owner) = if has_paths {
            let enc = self.path_attention(tape, p, g, paths)?;
            let d_o = cfg.out / cfg.heads;
            let (rwa, w) = rwa_aggregate(tape, ht, enc.embeddings, enc.owner.clone(), d_o)?;
            (rwa, Some(enc.attention), Some(w), enc.owner)
        } else {
            (tape.constant(Tensor::zeros(&[t, cfg.out])), None, None, Rc::from(Vec::new()))
        };
        let joined = tape.concat(ht, rwa)?;
        let reps = tape.matmul(joined, p.vars[p.layout.mix])?;
        Ok(Readout {
            reps,
            path_attention,
            rwa_weights,
            path_owner,
        })
    }

    /// Self-attention over each walk, pooled to one vector per walk.
    /// `paths[i]` belong to target `i`; node inputs are intrinsic features
    /// plus sinusoidal position encodings.
    pub fn path_attention(
        &self,
        tape: &mut Tape,
        p: &Params,
        g: &MonitorEntityGraph,
        paths: &[Vec<PathSample>],
    ) -> Result<EncodedPaths> {
        if paths.iter().all(Vec::is_empty) {
            return Err(Error::InvalidArgument("no paths to encode".into()));
        }
        let cfg = &self.config;
        let feats = g
            .features()
            .ok_or_else(|| Error::InvalidArgument("graph has no node features".into()))?;
        if feats.dim() != self.d_feat {
            return Err(shape_err("readout", format!("features of width {}, model expects {}", feats.dim(), self.d_feat)));
        }
        let mut unique: BTreeMap<usize, usize> = BTreeMap::new();
        let mut node_idx = Vec::new();
        let mut pos_idx = Vec::new();
        let mut mask = Vec::new();
        let mut segments = Vec::new();
        let mut owner = Vec::new();
        let mut pool_w = Vec::new();
        let mut path_of_pos = Vec::new();
        let mut max_len = 0;
        for (ti, ps) in paths.iter().enumerate() {
            for path in ps {
                let start = node_idx.len();
                let len = path.nodes.len();
                if path.mask.len() != len || len == 0 {
                    return Err(Error::InvalidArgument("malformed path sample".into()));
                }
                let real = path.mask.iter().filter(|&&m| m).count();
                if real == 0 {
                    return Err(Error::InvalidArgument("path with every position masked".into()));
                }
                max_len = max_len.max(len);
                let pid = owner.len();
                for (pos, (&node, &m)) in path.nodes.iter().zip(&path.mask).enumerate() {
                    let gi = g.global_index(node);
                    let next = unique.len();
                    node_idx.push(*unique.entry(gi).or_insert(next));
                    pos_idx.push(pos);
                    mask.push(m);
                    path_of_pos.push(pid);
                    pool_w.push(match cfg.pooling {
                        Pooling::Mean if m => 1.0 / real as f64,
                        Pooling::First if pos == 0 => 1.0,
                        _ => 0.0,
                    });
                }
                segments.push((start, len));
                owner.push(ti);
            }
        }
        let mut uniq_rows = vec![0usize; unique.len()];
        for (&gi, &u) in &unique {
            uniq_rows[u] = gi;
        }
        let mut x = Vec::with_capacity(uniq_rows.len() * self.d_feat);
        for &gi in &uniq_rows {
            x.extend_from_slice(feats.row(gi));
        }
        let x = tape.constant(Tensor::matrix(uniq_rows.len(), self.d_feat, x)?);
        let pe = tape.constant(position_encoding(max_len, self.d_feat));
        let node_idx: Rc<[usize]> = node_idx.into();
        let pos_idx: Rc<[usize]> = pos_idx.into();
        let (wq, wk, wv) = p.layout.path;
        let mut project = |w: usize| -> Result<Var> {
            let xw = tape.matmul(x, p.vars[w])?;
            let pw = tape.matmul(pe, p.vars[w])?;
            let a = tape.gather_rows(xw, node_idx.clone())?;
            let b = tape.gather_rows(pw, pos_idx.clone())?;
            tape.add(a, b)
        };
        let q = project(wq)?;
        let k = project(wk)?;
        let v = project(wv)?;
        let attention = tape.seq_attention(
            q,
            k,
            v,
            segments.into(),
            mask.into(),
            cfg.heads,
            1.0 / (cfg.out as f64).sqrt(),
        )?;
        let pooled = tape.scale_rows(attention, pool_w.into())?;
        let n_paths = owner.len();
        let embeddings = tape.scatter_add_rows(pooled, path_of_pos.into(), n_paths)?;
        Ok(EncodedPaths {
            embeddings,
            attention,
            owner: owner.into(),
        })
    }

    /// Representations of every monitor and dimension of `g` with all
    /// message edges of `g`, in global-index order (metric rows are zero).
    pub fn embed_all(&self, g: &MonitorEntityGraph, path_seed: u64) -> Result<Embeddings> {
        let sub = Subgraph::full(g);
        let h = {
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, false);
            let (h, _, _) = self.propagate(&mut tape, &p, g, &sub)?;
            tape.value(h).clone()
        };
        let out = self.config.out;
        let mut reps = vec![0.0; g.num_nodes() * out];
        let targets: Vec<NodeId> = NodeType::ALL
            .into_iter()
            .filter(|&t| t != NodeType::Metric)
            .flat_map(|t| (0..g.count(t)).map(move |i| NodeId::new(t, i)))
            .collect();
        const CHUNK: usize = 256;
        for chunk in targets.chunks(CHUNK) {
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, false);
            let hv = tape.constant(h.clone());
            // In a full subgraph, rows coincide with global indices.
            let rows: Vec<usize> = chunk.iter().map(|&n| g.global_index(n)).collect();
            let paths: Vec<Vec<PathSample>> = chunk
                .iter()
                .map(|&n| self.paths_for(g, n, path_seed))
                .collect::<Result<_>>()?;
            let r = self.readout(&mut tape, &p, g, hv, &rows, &paths)?;
            let v = tape.value(r.reps);
            for (i, &row) in rows.iter().enumerate() {
                reps[row * out..(row + 1) * out].copy_from_slice(v.row(i));
            }
        }
        Ok(Embeddings {
            dim: out,
            offsets: [0, g.offset(NodeType::Metric), g.offset(NodeType::Dimension)],
            reps,
        })
    }

    /// Walks of every configured length for `target`, keyed by `seed` and
    /// the target. Empty when the path branch is off or no walk can start.
    pub fn paths_for(&self, g: &MonitorEntityGraph, target: NodeId, seed: u64) -> Result<Vec<PathSample>> {
        let cfg = &self.config;
        if !cfg.use_rwa {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for &len in &cfg.path_lengths {
            let s = derive_seed(seed, &[target.ty.slot() as u64, target.index as u64, len as u64]);
            match sample_paths(g, target, len, cfg.paths_per_node, cfg.restart_p, s) {
                Ok(ps) => out.extend(ps),
                Err(Error::Sampling(_)) if g.neighbors(first_relation(target.ty), target).is_empty() => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}

fn first_relation(t: NodeType) -> Relation {
    match t {
        NodeType::Dimension => Relation::MetricDimension,
        _ => Relation::MonitorMetric,
    }
}

/// Parameters recorded on one tape.
pub struct Params {
    pub vars: Vec<Var>,
    layout: Layout,
}

impl Params {
    pub fn mix(&self) -> Var {
        self.vars[self.layout.mix]
    }
}

/// Standard sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn position_encoding(positions: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; positions * dim];
    for p in 0..positions {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data[p * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(positions, dim, data).expect("sized")
}

fn input_features(g: &MonitorEntityGraph, sub: &Subgraph, d_feat: usize) -> Result<Tensor> {
    let feats = g
        .features()
        .ok_or_else(|| Error::InvalidArgument("graph has no node features".into()))?;
    if feats.dim() != d_feat {
        return Err(shape_err(
            "propagate",
            format!("features of width {}, model expects {d_feat}", feats.dim()),
        ));
    }
    let mut data = Vec::with_capacity(sub.num_nodes() * d_feat);
    for t in NodeType::ALL {
        for &i in &sub.nodes[t.slot()] {
            data.extend_from_slice(feats.row(g.global_index(NodeId::new(t, i))));
        }
    }
    Tensor::matrix(sub.num_nodes(), d_feat, data)
}

/// Directed message edges of one relation.
#[derive(Debug, Clone)]
pub struct EdgeBlock {
    pub relation: Relation,
    /// Messages flow from the relation's destination to its source.
    pub reverse: bool,
    pub recv_type: NodeType,
    pub send_type: NodeType,
    /// Offset of this block in the concatenated edge list.
    pub start: usize,
    pub len: usize,
    pub recv_local: Rc<[usize]>,
    pub send_local: Rc<[usize]>,
}

/// Message edges of a subgraph in both directions, concatenated by block.
/// Node rows are monitors, then metrics, then dimensions, each in subgraph
/// local order.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub counts: [usize; 3],
    pub offsets: [usize; 3],
    pub blocks: Vec<EdgeBlock>,
    pub receivers: Rc<[usize]>,
    pub senders: Rc<[usize]>,
}

impl EdgeIndex {
    pub fn new(sub: &Subgraph) -> Self {
        let counts = sub.nodes.each_ref().map(Vec::len);
        let offsets = [0, counts[0], counts[0] + counts[1]];
        let mut blocks = Vec::new();
        let mut receivers = Vec::new();
        let mut senders = Vec::new();
        for rel in Relation::ALL {
            for reverse in [false, true] {
                let edges = &sub.edges[rel.slot()];
                let (recv_type, send_type) = if reverse {
                    (rel.src_type(), rel.dst_type())
                } else {
                    (rel.dst_type(), rel.src_type())
                };
                let (recv_local, send_local): (Vec<usize>, Vec<usize>) = edges
                    .iter()
                    .map(|&(s, d)| if reverse { (s, d) } else { (d, s) })
                    .unzip();
                let start = receivers.len();
                receivers.extend(recv_local.iter().map(|&i| offsets[recv_type.slot()] + i));
                senders.extend(send_local.iter().map(|&i| offsets[send_type.slot()] + i));
                blocks.push(EdgeBlock {
                    relation: rel,
                    reverse,
                    recv_type,
                    send_type,
                    start,
                    len: recv_local.len(),
                    recv_local: recv_local.into(),
                    send_local: send_local.into(),
                });
            }
        }
        Self {
            counts,
            offsets,
            blocks,
            receivers: receivers.into(),
            senders: senders.into(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn num_edges(&self) -> usize {
        self.receivers.len()
    }

    /// Row of a subgraph-local node.
    pub fn row(&self, ty: NodeType, local: usize) -> usize {
        self.offsets[ty.slot()] + local
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpan {
    pub relation: Relation,
    pub reverse: bool,
    pub start: usize,
    pub len: usize,
}

impl From<&EdgeBlock> for BlockSpan {
    fn from(b: &EdgeBlock) -> Self {
        Self {
            relation: b.relation,
            reverse: b.reverse,
            start: b.start,
            len: b.len,
        }
    }
}

/// Normalised attention of one layer: `alpha` is `edges × heads`, rows of
/// edges sharing a receiver sum to one per head.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub heads: usize,
    /// `None` when the subgraph has no message edges.
    pub alpha: Option<Var>,
    pub receivers: Rc<[usize]>,
    pub senders: Rc<[usize]>,
    pub blocks: Vec<BlockSpan>,
}

pub struct Readout {
    /// `targets × out`
    pub reps: Var,
    /// Result of the path self-attention, for [`Tape::seq_attention_probs`].
    pub path_attention: Option<Var>,
    /// `paths × 1` weights over each target's walks.
    pub rwa_weights: Option<Var>,
    /// Target index of each walk.
    pub path_owner: Rc<[usize]>,
}

pub struct EncodedPaths {
    /// `paths × out`
    pub embeddings: Var,
    /// Unpooled attention output, one row per walk position.
    pub attention: Var,
    /// Target index of each walk.
    pub owner: Rc<[usize]>,
}

/// Cross-attention from each target row of `x` over its walk embeddings:
/// weights `softmax_p(x · e_p / √d_o)` and output `Σ_p w_p e_p`. Returns
/// `(x.rows × width, paths × 1 weights)`; targets without walks get zeros.
pub fn rwa_aggregate(tape: &mut Tape, x: Var, paths: Var, owner: Rc<[usize]>, d_o: usize) -> Result<(Var, Var)> {
    let t = tape.value(x).rows();
    if owner.is_empty() {
        return Err(Error::InvalidArgument("no path embeddings to aggregate".into()));
    }
    let xs = tape.gather_rows(x, owner.clone())?;
    let s = tape.head_dot(xs, paths, 1)?;
    let s = tape.scale(s, 1.0 / (d_o as f64).sqrt())?;
    let w = tape.segment_softmax(s, owner.clone(), t)?;
    let weighted = tape.head_scale(paths, w, 1)?;
    let out = tape.scatter_add_rows(weighted, owner, t)?;
    Ok((out, w))
}

/// Final representations indexed by global node position.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    offsets: [usize; 3],
    reps: Vec<f64>,
}

impl Embeddings {
    /// `reps` holds one `dim`-wide row per node in global order
    /// (monitors, metrics, dimensions) for node counts `counts`.
    pub fn new(counts: [usize; 3], dim: usize, reps: Vec<f64>) -> Result<Self> {
        let n: usize = counts.iter().sum();
        if reps.len() != n * dim {
            return Err(shape_err("Embeddings::new", format!("{} values for {n} nodes of width {dim}", reps.len())));
        }
        Ok(Self {
            dim,
            offsets: [0, counts[0], counts[0] + counts[1]],
            reps,
        })
    }

    pub fn get(&self, n: NodeId) -> &[f64] {
        let r = self.offsets[n.ty.slot()] + n.index;
        &self.reps[r * self.dim..(r + 1) * self.dim]
    }

    pub fn logit(&self, monitor: usize, dimension: usize) -> f64 {
        dot(self.get(NodeId::monitor(monitor)), self.get(NodeId::dimension(dimension)))
    }

    pub fn score(&self, monitor: usize, dimension: usize) -> f64 {
        crate::autograd::sigmoid(self.logit(monitor, dimension))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `σ(a · b)` for two representation vectors.
pub fn score_pairs(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("score_pairs", format!("widths {} and {}", a.len(), b.len())));
    }
    Ok(crate::autograd::sigmoid(dot(a, b)))
}

/// Row-wise logits `a_i · b_i` of two `n × d` representation matrices.
pub fn pair_logits(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    tape.head_dot(a, b, 1)
}
