//! Synthetic monitor entity graphs.
//!
//! Construction order:
//! 1. dimensions are partitioned into correlation groups and every metric
//!    gets a home group;
//! 2. every dimension draws a degree from a discretised Pareto tail with
//!    exponent `α` and links to that many metrics, mostly from its group's
//!    home metrics, so `metric_has_dimension` degrees follow a power law;
//!    metrics left with fewer than two dimensions are topped up;
//! 3. every monitor emits one or more metrics, chosen by heavy-tailed
//!    metric popularity;
//! 4. every monitor picks dimensions from the closure of its metrics. A fixed
//!    fraction of monitors picks a strict subset; which dimensions are kept
//!    is decided either by whole correlation groups or by the mass of
//!    schema-constrained random walks (long-range mode).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use super::features::init_node_features;
use super::{MonitorEntityGraph, NodeTable, Relation};
use crate::error::{Error, Result};

/// How monitors choose dimensions inside their closure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Relevance {
    /// Whole correlation groups are kept together.
    Groups,
    /// Dimensions are kept with probability proportional to
    /// `(walk mass / mean walk mass)^sharpness`, where walk mass is the
    /// probability that a `walk_length`-step walk following the
    /// monitor → metric → dimension → metric → monitor schema ends at the
    /// dimension.
    LongRange { walk_length: usize, sharpness: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub monitors: usize,
    pub metrics: usize,
    pub dimensions: usize,
    /// Tail exponent of the dimension degree distribution.
    pub degree_exponent: f64,
    pub mean_dims_per_metric: f64,
    pub mean_metrics_per_monitor: f64,
    /// Expected fraction of its closure a strict-subset monitor uses.
    pub subset_ratio: f64,
    /// Fraction of monitors that use a strict subset of their closure.
    pub strict_subset_fraction: f64,
    pub groups: usize,
    /// Probability that a metric draws a dimension from its home group.
    pub group_cohesion: f64,
    pub relevance: Relevance,
    pub d_feat: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    /// 2000 monitors, 500 metrics, 900 dimensions.
    pub fn desk() -> Self {
        Self {
            monitors: 2000,
            metrics: 500,
            dimensions: 900,
            degree_exponent: 2.1,
            mean_dims_per_metric: 8.0,
            mean_metrics_per_monitor: 2.0,
            subset_ratio: 0.25,
            strict_subset_fraction: 0.94,
            groups: 60,
            group_cohesion: 0.8,
            relevance: Relevance::Groups,
            d_feat: 32,
            seed: 7,
        }
    }

    /// Node and edge counts shaped like the production graph: 18291
    /// monitors, 4623 metrics, 8356 dimensions, about 109k metric-dimension
    /// and 52k monitor-metric edges. Monitor-dimension edges come out near
    /// 135k: the monitors that use their whole closure alone exceed 52k.
    pub fn paper() -> Self {
        Self {
            monitors: 18291,
            metrics: 4623,
            dimensions: 8356,
            mean_dims_per_metric: 109_213.0 / 4623.0,
            mean_metrics_per_monitor: 52_148.0 / 18_291.0,
            subset_ratio: 0.05,
            groups: 400,
            d_feat: 64,
            ..Self::desk()
        }
    }

    /// Desk preset with dimension choice planted through six-step walks.
    pub fn long_range() -> Self {
        Self {
            relevance: Relevance::LongRange {
                walk_length: 6,
                sharpness: 2.0,
            },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            "long_range" => Some(Self::long_range()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InfeasibleConfig(msg));
        if self.monitors == 0 || self.metrics == 0 || self.dimensions == 0 {
            return bad("node counts must be positive".into());
        }
        if !(self.degree_exponent > 1.0) {
            return bad(format!("degree exponent {} must exceed 1", self.degree_exponent));
        }
        if self.dimensions < 2 {
            return bad("metrics emit at least two dimensions; need ≥ 2 dimensions".into());
        }
        if !(self.mean_dims_per_metric >= 2.0) || self.mean_dims_per_metric > self.dimensions as f64 {
            return bad(format!(
                "mean dimensions per metric {} must lie in [2, {}]",
                self.mean_dims_per_metric, self.dimensions
            ));
        }
        if !(self.mean_metrics_per_monitor >= 1.0) || self.mean_metrics_per_monitor > self.metrics as f64 {
            return bad(format!(
                "mean metrics per monitor {} must lie in [1, {}]",
                self.mean_metrics_per_monitor, self.metrics
            ));
        }
        if !(self.subset_ratio > 0.0 && self.subset_ratio <= 1.0) {
            return bad(format!("subset ratio {} must lie in (0, 1]", self.subset_ratio));
        }
        if !(0.0..=1.0).contains(&self.strict_subset_fraction) {
            return bad("strict subset fraction must lie in [0, 1]".into());
        }
        if self.groups == 0 || self.groups > self.dimensions {
            return bad(format!("{} groups for {} dimensions", self.groups, self.dimensions));
        }
        if !(0.0..=1.0).contains(&self.group_cohesion) {
            return bad("group cohesion must lie in [0, 1]".into());
        }
        if self.d_feat == 0 {
            return bad("feature width must be positive".into());
        }
        if let Relevance::LongRange { walk_length, sharpness } = self.relevance {
            if walk_length < 2 || (walk_length - 2) % 4 != 0 {
                return bad(format!("walk length {walk_length} is not of the form 2 + 4j"));
            }
            if !(sharpness >= 0.0 && sharpness.is_finite()) {
                return bad("sharpness must be finite and non-negative".into());
            }
        }
        Ok(())
    }
}

/// Splits `total` units over `n` bins holding `floor` each, never exceeding `cap`.
fn sizes(rng: &mut ChaCha8Rng, n: usize, mean: f64, floor: usize, cap: usize) -> Vec<usize> {
    let total = ((n as f64 * mean).round() as usize).clamp(n * floor, n * cap);
    let mut out = vec![floor; n];
    let mut open: Vec<usize> = (0..n).filter(|&i| out[i] < cap).collect();
    for _ in 0..total - n * floor {
        let slot = rng.random_range(0..open.len());
        let i = open[slot];
        out[i] += 1;
        if out[i] == cap {
            open.swap_remove(slot);
        }
    }
    out
}

/// Draws `k` distinct items, each with probability proportional to its
/// weight (Efraimidis–Spirakis keys `u^(1/w)`).
fn weighted_sample(rng: &mut ChaCha8Rng, items: &[usize], weights: &[f64], k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = items
        .iter()
        .zip(weights)
        .map(|(&it, &w)| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let key = if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY };
            (key, it)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.truncate(k);
    keyed.into_iter().map(|(_, it)| it).collect()
}

pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<MonitorEntityGraph> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (nm, nk, nd) = (cfg.monitors, cfg.metrics, cfg.dimensions);

    let mut group_of: Vec<usize> = (0..nd).map(|d| d % cfg.groups).collect();
    group_of.shuffle(&mut rng);
    let metric_home: Vec<usize> = (0..nk).map(|_| rng.random_range(0..cfg.groups)).collect();
    let mut home_metrics: Vec<Vec<usize>> = vec![Vec::new(); cfg.groups];
    for (k, &g) in metric_home.iter().enumerate() {
        home_metrics[g].push(k);
    }

    // Dimension degrees: a discretised Pareto tail with the scale chosen so
    // the degrees add up to `metrics × mean_dims_per_metric`.
    let a = cfg.degree_exponent - 1.0;
    let tails: Vec<f64> = (0..nd)
        .map(|_| (1.0 - rng.random::<f64>()).powf(-1.0 / a))
        .collect();
    let degrees_at = |scale: f64| -> Vec<usize> {
        tails
            .iter()
            .map(|&t| ((scale * t).round() as usize).min(nk))
            .collect()
    };
    let target = (nk as f64 * cfg.mean_dims_per_metric).round() as usize;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while degrees_at(hi).iter().sum::<usize>() < target && hi < 1e12 {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if degrees_at(mid).iter().sum::<usize>() < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let dim_degree = degrees_at(hi);

    // Each dimension picks its metrics, mostly among metrics of its group.
    let mut kd: Vec<Vec<usize>> = vec![Vec::new(); nk];
    for d in 0..nd {
        let deg = dim_degree[d];
        if deg == 0 {
            continue;
        }
        let home = &home_metrics[group_of[d]];
        let others: Vec<usize> = (0..nk).filter(|&k| metric_home[k] != group_of[d]).collect();
        let want_home = Binomial::new(deg as u64, cfg.group_cohesion)
            .map_err(|e| Error::InfeasibleConfig(e.to_string()))?
            .sample(&mut rng) as usize;
        let n_home = want_home.max(deg.saturating_sub(others.len())).min(home.len());
        let n_other = (deg - n_home).min(others.len());
        for i in rand::seq::index::sample(&mut rng, home.len(), n_home) {
            kd[home[i]].push(d);
        }
        for i in rand::seq::index::sample(&mut rng, others.len(), n_other) {
            kd[others[i]].push(d);
        }
    }
    // Every metric emits at least two dimensions.
    for (k, dims) in kd.iter_mut().enumerate() {
        while dims.len() < 2 {
            let in_group: Vec<usize> = (0..nd)
                .filter(|&d| group_of[d] == metric_home[k] && !dims.contains(&d))
                .collect();
            let pool: Vec<usize> = if in_group.is_empty() {
                (0..nd).filter(|d| !dims.contains(d)).collect()
            } else {
                in_group
            };
            dims.push(pool[rng.random_range(0..pool.len())]);
        }
        dims.sort_unstable();
    }

    // monitor -> metrics, with heavy-tailed metric popularity
    let metric_w: Vec<f64> = (0..nk)
        .map(|_| (1.0 - rng.random::<f64>()).powf(-1.0 / 1.5))
        .collect();
    let metrics_per_monitor = sizes(&mut rng, nm, cfg.mean_metrics_per_monitor, 1, nk);
    let all_metrics: Vec<usize> = (0..nk).collect();
    let mut mk: Vec<Vec<usize>> = Vec::with_capacity(nm);
    for &n in &metrics_per_monitor {
        let mut chosen = weighted_sample(&mut rng, &all_metrics, &metric_w, n);
        chosen.sort_unstable();
        mk.push(chosen);
    }

    let closures: Vec<Vec<usize>> = mk
        .iter()
        .map(|ks| {
            let mut c: Vec<usize> = ks.iter().flat_map(|&k| kd[k].iter().copied()).collect();
            c.sort_unstable();
            c.dedup();
            c
        })
        .collect();

    // Exactly round(f · n) monitors use a strict subset.
    let mut strict = vec![false; nm];
    if cfg.subset_ratio < 1.0 {
        let mut order: Vec<usize> = (0..nm).collect();
        order.shuffle(&mut rng);
        let n_strict = (cfg.strict_subset_fraction * nm as f64).round() as usize;
        for &m in order.iter().take(n_strict) {
            strict[m] = true;
        }
    }

    let walk = match cfg.relevance {
        Relevance::LongRange { walk_length, .. } => Some(walk_mass(&mk, &kd, nk, nd, walk_length)),
        Relevance::Groups => None,
    };

    let mut md: Vec<(usize, usize)> = Vec::new();
    for m in 0..nm {
        let c = &closures[m];
        if !strict[m] || c.len() < 2 {
            md.extend(c.iter().map(|&d| (m, d)));
            continue;
        }
        let s = 1 + Binomial::new((c.len() - 2) as u64, cfg.subset_ratio)
            .map_err(|e| Error::InfeasibleConfig(e.to_string()))?
            .sample(&mut rng) as usize;
        let chosen = match (&walk, cfg.relevance) {
            (Some(w), Relevance::LongRange { sharpness, .. }) => {
                let mass = w.monitor_mass(m);
                let weights: Vec<f64> = c
                    .iter()
                    .map(|&d| {
                        let lift = mass[d] / w.mean_mass[d].max(f64::MIN_POSITIVE);
                        lift.powf(sharpness).max(1e-300)
                    })
                    .collect();
                weighted_sample(&mut rng, c, &weights, s)
            }
            _ => pick_groups(&mut rng, c, &group_of, s),
        };
        md.extend(chosen.into_iter().map(|d| (m, d)));
    }
    md.sort_unstable();

    let mk_edges: Vec<(usize, usize)> = mk
        .iter()
        .enumerate()
        .flat_map(|(m, ks)| ks.iter().map(move |&k| (m, k)))
        .collect();
    let kd_edges: Vec<(usize, usize)> = kd
        .iter()
        .enumerate()
        .flat_map(|(k, ds)| ds.iter().map(move |&d| (k, d)))
        .collect();

    let nodes = NodeTable::numbered(nm, nk, nd);
    let mut edges: [Vec<(usize, usize)>; 3] = Default::default();
    edges[Relation::MonitorDimension.slot()] = md;
    edges[Relation::MetricDimension.slot()] = kd_edges;
    edges[Relation::MonitorMetric.slot()] = mk_edges;
    let g = MonitorEntityGraph::from_sorted_edges(nodes, edges, None, Some(cfg.seed))?;
    let feats = init_node_features(&g, cfg.d_feat, cfg.seed, None)?;
    g.with_features(feats)
}

/// Keeps whole groups: groups present in the closure are visited in random
/// order (weighted by their size in the closure) and their members are taken
/// until `s` dimensions are chosen.
fn pick_groups(rng: &mut ChaCha8Rng, closure: &[usize], group_of: &[usize], s: usize) -> Vec<usize> {
    let mut by_group: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &d in closure {
        by_group.entry(group_of[d]).or_default().push(d);
    }
    let groups: Vec<usize> = by_group.keys().copied().collect();
    let weights: Vec<f64> = groups.iter().map(|g| by_group[g].len() as f64).collect();
    let order = weighted_sample(rng, &groups, &weights, groups.len());
    let mut out = Vec::with_capacity(s);
    for g in order {
        let mut ds = by_group[&g].clone();
        ds.shuffle(rng);
        for d in ds {
            if out.len() == s {
                return out;
            }
            out.push(d);
        }
    }
    out
}

/// Walk transition structure for the schema
/// monitor → metric → dimension → metric → monitor → ….
struct WalkMass<'a> {
    mk: &'a [Vec<usize>],
    kd: &'a [Vec<usize>],
    km: Vec<Vec<usize>>,
    dk: Vec<Vec<usize>>,
    nk: usize,
    nd: usize,
    steps: usize,
    /// Average end distribution over all monitors.
    mean_mass: Vec<f64>,
}

fn walk_mass<'a>(mk: &'a [Vec<usize>], kd: &'a [Vec<usize>], nk: usize, nd: usize, steps: usize) -> WalkMass<'a> {
    let mut km = vec![Vec::new(); nk];
    for (m, ks) in mk.iter().enumerate() {
        for &k in ks {
            km[k].push(m);
        }
    }
    let mut dk = vec![Vec::new(); nd];
    for (k, ds) in kd.iter().enumerate() {
        for &d in ds {
            dk[d].push(k);
        }
    }
    let mut w = WalkMass {
        mk,
        kd,
        km,
        dk,
        nk,
        nd,
        steps,
        mean_mass: vec![0.0; nd],
    };
    let mut mean = vec![0.0; nd];
    for m in 0..mk.len() {
        for (acc, v) in mean.iter_mut().zip(w.monitor_mass(m)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= mk.len() as f64);
    w.mean_mass = mean;
    w
}

impl WalkMass<'_> {
    /// Distribution over dimensions after `steps` uniform schema steps from `m`.
    fn monitor_mass(&self, m: usize) -> Vec<f64> {
        let spread = |from: &[f64], adj: &[Vec<usize>], n_to: usize| {
            let mut to = vec![0.0; n_to];
            for (i, &p) in from.iter().enumerate() {
                if p == 0.0 || adj[i].is_empty() {
                    continue;
                }
                let share = p / adj[i].len() as f64;
                for &j in &adj[i] {
                    to[j] += share;
                }
            }
            to
        };
        let mut on_m = vec![0.0; self.mk.len()];
        on_m[m] = 1.0;
        let mut remaining = self.steps;
        loop {
            let on_k = spread(&on_m, self.mk, self.nk);
            let on_d = spread(&on_k, self.kd, self.nd);
            remaining -= 2;
            if remaining == 0 {
                return on_d;
            }
            let back_k = spread(&on_d, &self.dk, self.nk);
            on_m = spread(&back_k, &self.km, self.mk.len());
            remaining -= 2;
        }
    }
}
