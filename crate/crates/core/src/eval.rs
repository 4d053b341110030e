//! Ranking metrics, candidate ranking, and diagnostic exports: rank
//! stability, per-degree gains, attention heatmaps and a scaling probe.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{generate_synthetic, EdgeSplit, GeneratorConfig, MonitorEntityGraph, NodeId, NodeType, Relation};
use crate::model::{Embeddings, Model, ModelConfig};
use crate::sampling::{rng_for, Subgraph};
use crate::train::{TrainConfig, Trainer};
use crate::Tape;

/// Cutoffs reported for hit rate, precision and recall.
pub const CUTOFFS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub dimension: usize,
    /// `(monitor, cosine similarity)`, most similar first.
    pub similar_monitors: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRecommendation {
    pub monitor: usize,
    /// `(dimension, score)`, best first.
    pub ranked: Vec<(usize, f64)>,
    pub candidates: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evidence: Vec<Evidence>,
}

/// Sorts by score descending, ties broken by dimension id ascending.
pub fn sort_ranking(scored: &mut [(usize, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

pub fn rank_candidates(
    emb: &Embeddings,
    g: &MonitorEntityGraph,
    monitor: usize,
    candidates: &[usize],
    descriptor: &str,
) -> Result<RankedRecommendation> {
    if monitor >= g.count(NodeType::Monitor) {
        return Err(Error::Eval(format!("unknown monitor {monitor}")));
    }
    if candidates.is_empty() {
        return Err(Error::Eval(format!("no candidates for monitor {monitor}")));
    }
    let n_dims = g.count(NodeType::Dimension);
    if let Some(&d) = candidates.iter().find(|&&d| d >= n_dims) {
        return Err(Error::Eval(format!("unknown dimension {d}")));
    }
    let mut ranked: Vec<(usize, f64)> = candidates.iter().map(|&d| (d, emb.score(monitor, d))).collect();
    sort_ranking(&mut ranked);
    Ok(RankedRecommendation {
        monitor,
        ranked,
        candidates: descriptor.to_string(),
        evidence: Vec::new(),
    })
}

fn check_queries(rankings: &[Vec<usize>], relevants: &[Vec<usize>]) -> Result<()> {
    if rankings.len() != relevants.len() {
        return Err(Error::Eval(format!("{} rankings for {} relevance sets", rankings.len(), relevants.len())));
    }
    if rankings.is_empty() {
        return Err(Error::Eval("no queries".into()));
    }
    for (q, (r, rel)) in rankings.iter().zip(relevants).enumerate() {
        if rel.is_empty() {
            return Err(Error::Eval(format!("query {q} has no relevant item")));
        }
        if let Some(x) = rel.iter().find(|x| !r.contains(x)) {
            return Err(Error::Eval(format!("query {q}: relevant item {x} is not among the candidates")));
        }
    }
    Ok(())
}

/// 1-based ranks of the relevant items of one query, ascending.
fn relevant_ranks(ranking: &[usize], relevant: &[usize]) -> Vec<usize> {
    let rel: BTreeSet<usize> = relevant.iter().copied().collect();
    ranking
        .iter()
        .enumerate()
        .filter(|(_, x)| rel.contains(x))
        .map(|(i, _)| i + 1)
        .collect()
}

pub fn metric_mrr(rankings: &[Vec<usize>], relevants: &[Vec<usize>]) -> Result<f64> {
    check_queries(rankings, relevants)?;
    let total: f64 = rankings
        .iter()
        .zip(relevants)
        .map(|(r, rel)| 1.0 / relevant_ranks(r, rel)[0] as f64)
        .sum();
    Ok(total / rankings.len() as f64)
}

/// Binary-gain NDCG at `k`, discount `1 / log2(rank + 1)`.
pub fn metric_ndcg(rankings: &[Vec<usize>], relevants: &[Vec<usize>], k: usize) -> Result<f64> {
    check_queries(rankings, relevants)?;
    if k == 0 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    let disc = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let mut total = 0.0;
    for (r, rel) in rankings.iter().zip(relevants) {
        let dcg: f64 = relevant_ranks(r, rel).into_iter().filter(|&x| x <= k).map(disc).sum();
        let ideal: f64 = (1..=rel.len().min(k)).map(disc).sum();
        total += dcg / ideal;
    }
    Ok(total / rankings.len() as f64)
}

/// `(recall@k, hitrate@k, precision@k)` averaged over queries.
pub fn metric_recall_hr(rankings: &[Vec<usize>], relevants: &[Vec<usize>], k: usize) -> Result<(f64, f64, f64)> {
    check_queries(rankings, relevants)?;
    if k == 0 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    let (mut recall, mut hit, mut prec) = (0.0, 0.0, 0.0);
    for (r, rel) in rankings.iter().zip(relevants) {
        let found = relevant_ranks(r, rel).into_iter().filter(|&x| x <= k).count() as f64;
        recall += found / rel.len() as f64;
        hit += if found > 0.0 { 1.0 } else { 0.0 };
        prec += found / k as f64;
    }
    let n = rankings.len() as f64;
    Ok((recall / n, hit / n, prec / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CandidateMode {
    /// Each test edge ranked against its fixed corrupted negatives.
    Fixed,
    /// Per monitor, all its test dimensions plus `negatives` sampled ones.
    Pool { negatives: usize },
}

impl CandidateMode {
    pub fn describe(&self) -> String {
        match self {
            CandidateMode::Fixed => "positive plus its fixed negatives".into(),
            CandidateMode::Pool { negatives } => format!("test dimensions plus {negatives} sampled negatives"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub monitor: usize,
    pub candidates: Vec<usize>,
    pub relevant: Vec<usize>,
}

/// Test queries. Negatives are never linked to the monitor in `g`.
pub fn build_queries(g: &MonitorEntityGraph, split: &EdgeSplit, mode: CandidateMode, seed: u64) -> Result<Vec<Query>> {
    match mode {
        CandidateMode::Fixed => Ok(split
            .test
            .iter()
            .zip(&split.test_negatives)
            .map(|(&(m, d), negs)| {
                let mut candidates = vec![d];
                candidates.extend_from_slice(negs);
                Query {
                    monitor: m,
                    candidates,
                    relevant: vec![d],
                }
            })
            .collect()),
        CandidateMode::Pool { negatives } => {
            let mut by_monitor: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &(m, d) in &split.test {
                by_monitor.entry(m).or_default().push(d);
            }
            let mut out = Vec::with_capacity(by_monitor.len());
            for (m, relevant) in by_monitor {
                let mut rng = rng_for(seed, &[0x504F_4F4C, m as u64]);
                let negs = crate::graph::split::corrupt_destination(
                    g,
                    Relation::MonitorDimension,
                    m,
                    negatives,
                    true,
                    &mut rng,
                )?;
                let mut candidates = relevant.clone();
                candidates.extend(negs);
                out.push(Query {
                    monitor: m,
                    candidates,
                    relevant,
                });
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub monitor: usize,
    pub ranking: Vec<usize>,
    pub relevant: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    /// Inclusive monitor-degree range.
    pub min_degree: usize,
    pub max_degree: usize,
    pub monitors: usize,
    pub queries: usize,
    /// `None` when no query falls in the bucket.
    pub mrr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub candidates: String,
    pub queries: usize,
    pub mrr: f64,
    pub ndcg_at_5: f64,
    /// At cutoffs 1, 3, 5.
    pub hitrate: [f64; 3],
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub buckets: Vec<BucketMetrics>,
}

/// Degree ranges splitting monitors into `n` groups of near-equal size by
/// their monitor-dimension degree in `g`. Every monitor falls in exactly
/// one range.
pub fn degree_buckets(g: &MonitorEntityGraph, n: usize) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Err(Error::Eval("at least one bucket is required".into()));
    }
    let md = g.out(Relation::MonitorDimension);
    let mut deg: Vec<usize> = (0..md.rows()).map(|m| md.degree(m)).collect();
    if deg.is_empty() {
        return Err(Error::Eval("graph has no monitors".into()));
    }
    deg.sort_unstable();
    let mut bounds = Vec::new();
    let mut lo = 0usize;
    for b in 1..=n {
        let idx = (b * deg.len()).div_ceil(n) - 1;
        let hi = if b == n { usize::MAX } else { deg[idx] };
        if hi >= lo && bounds.last().is_none_or(|&(_, h): &(usize, usize)| hi > h) {
            bounds.push((lo, hi));
            lo = hi.saturating_add(1);
        }
    }
    Ok(bounds)
}

fn bucket_of(bounds: &[(usize, usize)], d: usize) -> usize {
    bounds.iter().position(|&(lo, hi)| d >= lo && d <= hi).expect("buckets cover all degrees")
}

/// Ranks every query with `emb` and reports metrics, bucketed by each
/// monitor's degree in `g`.
pub fn evaluate(
    emb: &Embeddings,
    g: &MonitorEntityGraph,
    queries: &[Query],
    mode: CandidateMode,
    bounds: &[(usize, usize)],
) -> Result<(MetricReport, Vec<QueryResult>)> {
    let mut results = Vec::with_capacity(queries.len());
    for q in queries {
        let r = rank_candidates(emb, g, q.monitor, &q.candidates, "")?;
        results.push(QueryResult {
            monitor: q.monitor,
            ranking: r.ranked.into_iter().map(|(d, _)| d).collect(),
            relevant: q.relevant.clone(),
        });
    }
    let report = report_from_results(&results, g, mode, bounds)?;
    Ok((report, results))
}

pub fn report_from_results(
    results: &[QueryResult],
    g: &MonitorEntityGraph,
    mode: CandidateMode,
    bounds: &[(usize, usize)],
) -> Result<MetricReport> {
    let rankings: Vec<Vec<usize>> = results.iter().map(|r| r.ranking.clone()).collect();
    let relevants: Vec<Vec<usize>> = results.iter().map(|r| r.relevant.clone()).collect();
    let mut hitrate = [0.0; 3];
    let mut precision = [0.0; 3];
    let mut recall = [0.0; 3];
    for (i, &k) in CUTOFFS.iter().enumerate() {
        (recall[i], hitrate[i], precision[i]) = metric_recall_hr(&rankings, &relevants, k)?;
    }
    let md = g.out(Relation::MonitorDimension);
    let mut monitors = vec![0usize; bounds.len()];
    for m in 0..md.rows() {
        monitors[bucket_of(bounds, md.degree(m))] += 1;
    }
    let mut rr_sum = vec![0.0; bounds.len()];
    let mut count = vec![0usize; bounds.len()];
    for r in results {
        let b = bucket_of(bounds, md.degree(r.monitor));
        rr_sum[b] += 1.0 / relevant_ranks(&r.ranking, &r.relevant)[0] as f64;
        count[b] += 1;
    }
    let buckets = bounds
        .iter()
        .enumerate()
        .map(|(i, &(lo, hi))| BucketMetrics {
            min_degree: lo,
            max_degree: hi,
            monitors: monitors[i],
            queries: count[i],
            mrr: (count[i] > 0).then(|| rr_sum[i] / count[i] as f64),
        })
        .collect();
    Ok(MetricReport {
        candidates: mode.describe(),
        queries: results.len(),
        mrr: metric_mrr(&rankings, &relevants)?,
        ndcg_at_5: metric_ndcg(&rankings, &relevants, 5)?,
        hitrate,
        precision,
        recall,
        buckets,
    })
}

/// Embeds with `model` over `eval_graph` and evaluates the test split.
pub fn evaluate_model(
    model: &Model,
    graph: &MonitorEntityGraph,
    eval_graph: &MonitorEntityGraph,
    split: &EdgeSplit,
    mode: CandidateMode,
    path_seed: u64,
    n_buckets: usize,
) -> Result<(MetricReport, Vec<QueryResult>)> {
    let emb = model.embed_all(eval_graph, path_seed)?;
    let queries = build_queries(graph, split, mode, split.seed)?;
    let bounds = degree_buckets(eval_graph, n_buckets)?;
    evaluate(&emb, eval_graph, &queries, mode, &bounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankStability {
    /// `rank_b − rank_a` → count, over every relevant item.
    pub histogram: BTreeMap<i64, usize>,
    pub improved: f64,
    pub unchanged: f64,
    pub worsened: f64,
}

pub fn rank_stability(a: &[QueryResult], b: &[QueryResult]) -> Result<RankStability> {
    if a.len() != b.len() {
        return Err(Error::Eval(format!("{} queries vs {}", a.len(), b.len())));
    }
    let mut histogram = BTreeMap::new();
    let mut total = 0usize;
    let (mut better, mut same, mut worse) = (0usize, 0usize, 0usize);
    for (qa, qb) in a.iter().zip(b) {
        let sa: BTreeSet<usize> = qa.ranking.iter().copied().collect();
        let sb: BTreeSet<usize> = qb.ranking.iter().copied().collect();
        if qa.monitor != qb.monitor || qa.relevant != qb.relevant || sa != sb {
            return Err(Error::Eval(format!("query for monitor {} differs between runs", qa.monitor)));
        }
        for &x in &qa.relevant {
            let ra = qa.ranking.iter().position(|&y| y == x).expect("checked") as i64;
            let rb = qb.ranking.iter().position(|&y| y == x).expect("checked") as i64;
            let delta = rb - ra;
            *histogram.entry(delta).or_insert(0) += 1;
            total += 1;
            match delta.cmp(&0) {
                std::cmp::Ordering::Less => better += 1,
                std::cmp::Ordering::Equal => same += 1,
                std::cmp::Ordering::Greater => worse += 1,
            }
        }
    }
    let n = total.max(1) as f64;
    Ok(RankStability {
        histogram,
        improved: better as f64 / n,
        unchanged: same as f64 / n,
        worsened: worse as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketGain {
    pub min_degree: usize,
    pub max_degree: usize,
    /// MRR with minus MRR without; `None` for buckets without queries.
    pub delta: Option<f64>,
}

pub fn sparsity_gain(with: &MetricReport, without: &MetricReport) -> Result<Vec<BucketGain>> {
    if with.buckets.len() != without.buckets.len() || with.queries != without.queries {
        return Err(Error::Eval("reports cover different buckets or queries".into()));
    }
    with.buckets
        .iter()
        .zip(&without.buckets)
        .map(|(a, b)| {
            if (a.min_degree, a.max_degree, a.queries) != (b.min_degree, b.max_degree, b.queries) {
                return Err(Error::Eval("bucket boundaries differ".into()));
            }
            Ok(BucketGain {
                min_degree: a.min_degree,
                max_degree: a.max_degree,
                delta: a.mrr.zip(b.mrr).map(|(x, y)| x - y),
            })
        })
        .collect()
}

/// Head-averaged attention of one message edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionEdge {
    pub layer: usize,
    pub relation: Relation,
    pub reverse: bool,
    pub receiver: NodeId,
    pub sender: NodeId,
    pub mean: f64,
    /// Population variance across heads.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSnapshot {
    pub heads: usize,
    pub edges: Vec<AttentionEdge>,
}

impl AttentionSnapshot {
    /// Mean across-head variance over every layer and edge of `relation`.
    pub fn head_variance(&self, relation: Relation) -> Result<f64> {
        let v: Vec<f64> = self
            .edges
            .iter()
            .filter(|e| e.relation == relation)
            .map(|e| e.variance)
            .collect();
        if v.is_empty() {
            return Err(Error::Eval(format!("no {relation} edges in the attention records")));
        }
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Attention of every layer over the full message graph `g`.
pub fn attention_snapshot(model: &Model, g: &MonitorEntityGraph) -> Result<AttentionSnapshot> {
    let sub = Subgraph::full(g);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let (_, index, records) = model.propagate(&mut tape, &p, g, &sub)?;
    let heads = model.config.heads;
    let node_of = |row: usize| g.node_at(row);
    let mut edges = Vec::new();
    for rec in &records {
        let Some(alpha) = rec.alpha else { continue };
        let a = tape.value(alpha);
        for span in &rec.blocks {
            for e in span.start..span.start + span.len {
                let row = a.row(e);
                let mean = row.iter().sum::<f64>() / heads as f64;
                let variance = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / heads as f64;
                edges.push(AttentionEdge {
                    layer: rec.layer,
                    relation: span.relation,
                    reverse: span.reverse,
                    receiver: node_of(index.receivers[e]),
                    sender: node_of(index.senders[e]),
                    mean,
                    variance,
                });
            }
        }
    }
    Ok(AttentionSnapshot { heads, edges })
}

/// Writes `layer,relation,direction,receiver,sender,alpha` rows for the
/// edges of `relation` whose receiver is in `nodes` (all when empty).
pub fn attention_heatmap_export(
    snap: &AttentionSnapshot,
    relation: Relation,
    nodes: &[NodeId],
    path: &Path,
) -> Result<f64> {
    let keep: BTreeSet<NodeId> = nodes.iter().copied().collect();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "relation", "direction", "receiver", "sender", "alpha"])?;
    let mut any = false;
    for e in snap.edges.iter().filter(|e| e.relation == relation) {
        if !keep.is_empty() && !keep.contains(&e.receiver) {
            continue;
        }
        any = true;
        w.write_record([
            e.layer.to_string(),
            relation.short().to_string(),
            if e.reverse { "reverse" } else { "forward" }.to_string(),
            e.receiver.to_string(),
            e.sender.to_string(),
            e.mean.to_string(),
        ])?;
    }
    w.flush()?;
    if !any {
        return Err(Error::Eval(format!("no {relation} edges for the requested nodes")));
    }
    snap.head_variance(relation)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares `y = a x + b`; `None` with fewer than two distinct `x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub nodes: usize,
    pub edges: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    /// Fit of seconds against node count; `None` for a single size.
    pub fit: Option<LinearFit>,
}

/// Trains `epochs` epochs on graphs whose counts are `base` scaled to each
/// total node count in `sizes` and records the fastest of `repeats` timings.
pub fn scaling_probe(
    sizes: &[usize],
    base: &GeneratorConfig,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    epochs: usize,
    repeats: usize,
) -> Result<ScalingTable> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes.is_empty() {
        return Err(Error::Eval("sizes must be ascending".into()));
    }
    let base_total = (base.monitors + base.metrics + base.dimensions) as f64;
    let mut rows = Vec::new();
    for &n in sizes {
        let f = n as f64 / base_total;
        let cfg = GeneratorConfig {
            monitors: ((base.monitors as f64 * f).round() as usize).max(1),
            metrics: ((base.metrics as f64 * f).round() as usize).max(1),
            dimensions: ((base.dimensions as f64 * f).round() as usize).max(1),
            groups: ((base.groups as f64 * f).round() as usize).max(1),
            ..base.clone()
        };
        let g = generate_synthetic(&cfg)?;
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let mut t = Trainer::new(&g, model_cfg.clone(), train_cfg.clone())?;
            let start = Instant::now();
            for _ in 0..epochs {
                t.run_epoch()?;
            }
            best = best.min(start.elapsed().as_secs_f64());
        }
        rows.push(ScalingRow {
            nodes: g.num_nodes(),
            edges: Relation::ALL.iter().map(|&r| g.num_edges(r)).sum(),
            seconds: best,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.nodes as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.seconds).collect();
    Ok(ScalingTable {
        fit: linear_fit(&xs, &ys),
        rows,
    })
}

pub fn write_scaling_csv(table: &ScalingTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["nodes", "edges", "seconds"])?;
    for r in &table.rows {
        w.write_record([r.nodes.to_string(), r.edges.to_string(), r.seconds.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        crate::model::dot(a, b) / (na * nb)
    }
}

/// Ranks the dimensions emitted by the monitor's metrics that it does not
/// use yet, keeping the top `k`, each with up to three similar monitors of
/// `g` that already use it.
pub fn recommend(emb: &Embeddings, g: &MonitorEntityGraph, monitor: usize, k: usize) -> Result<RankedRecommendation> {
    if monitor >= g.count(NodeType::Monitor) {
        return Err(Error::Eval(format!("unknown monitor {monitor}")));
    }
    if g.out(Relation::MonitorMetric).degree(monitor) == 0 {
        return Err(Error::Eval(format!("monitor {monitor} has no metrics")));
    }
    let linked = g.out(Relation::MonitorDimension).neighbors(monitor);
    let candidates: Vec<usize> = g
        .closure(monitor)
        .into_iter()
        .filter(|d| linked.binary_search(d).is_err())
        .collect();
    if candidates.is_empty() {
        return Err(Error::Eval(format!("monitor {monitor} already uses every dimension its metrics emit")));
    }
    let mut rec = rank_candidates(emb, g, monitor, &candidates, "closure dimensions not yet linked")?;
    rec.ranked.truncate(k);
    let feats = g.features();
    let me = NodeId::monitor(monitor);
    for &(d, _) in &rec.ranked {
        let holders = g.inc(Relation::MonitorDimension).neighbors(d);
        let mut sims: Vec<(usize, f64)> = holders
            .iter()
            .filter(|&&m| m != monitor)
            .map(|&m| {
                let s = feats.map_or(0.0, |f| {
                    cosine(f.row(g.global_index(me)), f.row(g.global_index(NodeId::monitor(m))))
                });
                (m, s)
            })
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sims.truncate(3);
        rec.evidence.push(Evidence {
            dimension: d,
            similar_monitors: sims,
        });
    }
    Ok(rec)
}

/// One JSON document per line.
pub fn write_json_lines<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
