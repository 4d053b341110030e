//! Train / validation / test partition of the supervised relation.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MonitorEntityGraph, Relation};
use crate::error::{Error, Result};

pub const TRAIN_FRACTION: f64 = 0.8;
pub const VAL_FRACTION: f64 = 0.1;
/// Share of training edges used for message passing; the rest supervise.
pub const MESSAGE_FRACTION: f64 = 0.7;
pub const EVAL_NEGATIVES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSplit {
    pub relation: Relation,
    pub seed: u64,
    pub train_message: Vec<(usize, usize)>,
    pub train_supervision: Vec<(usize, usize)>,
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    /// Corrupted destinations, `EVAL_NEGATIVES` per validation positive.
    pub validation_negatives: Vec<Vec<usize>>,
    pub test_negatives: Vec<Vec<usize>>,
}

impl EdgeSplit {
    pub fn train(&self) -> Vec<(usize, usize)> {
        let mut t = self.train_message.clone();
        t.extend_from_slice(&self.train_supervision);
        t.sort_unstable();
        t
    }
}

/// Draws `k` destinations of `rel` not linked to `src` in `g`, uniformly.
/// Draws are distinct while enough unlinked destinations remain.
pub fn corrupt_destination(
    g: &MonitorEntityGraph,
    rel: Relation,
    src: usize,
    k: usize,
    distinct: bool,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let n = g.count(rel.dst_type());
    let linked = g.out(rel).neighbors(src);
    let free = n - linked.len();
    if free == 0 {
        return Err(Error::Sampling(format!(
            "{} {src} is linked to every {}; no corruption possible",
            rel.src_type(),
            rel.dst_type()
        )));
    }
    let distinct = distinct && free >= k;
    let mut out = Vec::with_capacity(k);
    // Rejection is cheap when few destinations are linked.
    if linked.len() * 2 <= n {
        while out.len() < k {
            let d = rng.random_range(0..n);
            if linked.binary_search(&d).is_ok() || (distinct && out.contains(&d)) {
                continue;
            }
            out.push(d);
        }
        return Ok(out);
    }
    let pool: Vec<usize> = (0..n).filter(|d| linked.binary_search(d).is_err()).collect();
    if distinct {
        out.extend(pool.choose_multiple(rng, k).copied());
    } else {
        out.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
    }
    Ok(out)
}

pub fn split_edges(g: &MonitorEntityGraph, relation: Relation, seed: u64) -> Result<EdgeSplit> {
    let mut edges = g.edges(relation).to_vec();
    let n = edges.len();
    if n < 10 {
        return Err(Error::Sampling(format!("{relation} has {n} edges; at least 10 are needed")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let n_val = (VAL_FRACTION * n as f64).round() as usize;
    let n_msg = (MESSAGE_FRACTION * n_train as f64).round() as usize;
    let mut train_message = edges[..n_msg].to_vec();
    let mut train_supervision = edges[n_msg..n_train].to_vec();
    let mut validation = edges[n_train..n_train + n_val].to_vec();
    let mut test = edges[n_train + n_val..].to_vec();
    for part in [&mut train_message, &mut train_supervision, &mut validation, &mut test] {
        part.sort_unstable();
    }
    let mut negatives = |pos: &[(usize, usize)]| -> Result<Vec<Vec<usize>>> {
        pos.iter()
            .map(|&(s, _)| corrupt_destination(g, relation, s, EVAL_NEGATIVES, true, &mut rng))
            .collect()
    };
    let validation_negatives = negatives(&validation)?;
    let test_negatives = negatives(&test)?;
    Ok(EdgeSplit {
        relation,
        seed,
        train_message,
        train_supervision,
        validation,
        test,
        validation_negatives,
        test_negatives,
    })
}
