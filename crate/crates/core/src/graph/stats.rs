//! Degree statistics and power-law tail fitting.

use serde::{Deserialize, Serialize};

use super::{MonitorEntityGraph, Relation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Src,
    Dst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeHistogram {
    pub relation: Relation,
    pub side: Side,
    /// Degree of every node on the chosen side, by index.
    pub degrees: Vec<usize>,
    /// `counts[k]` = number of nodes with degree `k`.
    pub counts: Vec<usize>,
    /// Fraction of monitors whose dimensions form a strict subset of the
    /// dimensions emitted by their metrics.
    pub strict_subset_fraction: f64,
}

pub fn degree_distribution(g: &MonitorEntityGraph, relation: Relation, side: Side) -> DegreeHistogram {
    let csr = match side {
        Side::Src => g.out(relation),
        Side::Dst => g.inc(relation),
    };
    let degrees: Vec<usize> = (0..csr.rows()).map(|i| csr.degree(i)).collect();
    let max = degrees.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0; max + 1];
    for &d in &degrees {
        counts[d] += 1;
    }
    DegreeHistogram {
        relation,
        side,
        degrees,
        counts,
        strict_subset_fraction: strict_subset_fraction(g),
    }
}

/// Over monitors with a non-empty closure.
pub fn strict_subset_fraction(g: &MonitorEntityGraph) -> f64 {
    let md = g.out(Relation::MonitorDimension);
    let mut eligible = 0usize;
    let mut strict = 0usize;
    for m in 0..md.rows() {
        let closure = g.closure(m);
        if closure.is_empty() {
            continue;
        }
        eligible += 1;
        let used = md.neighbors(m);
        let subset = used.iter().all(|d| closure.binary_search(d).is_ok());
        if subset && used.len() < closure.len() {
            strict += 1;
        }
    }
    if eligible == 0 {
        0.0
    } else {
        strict as f64 / eligible as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub x_min: usize,
    pub n_tail: usize,
    /// Kolmogorov-Smirnov distance between the tail and the fitted law.
    pub ks: f64,
}

/// Hurwitz zeta `ζ(s, q) = Σ_{k≥0} (k + q)^(−s)` for `s > 1`, `q > 0`.
pub fn hurwitz_zeta(s: f64, q: f64) -> f64 {
    const N: usize = 64;
    let direct: f64 = (0..N).map(|k| (k as f64 + q).powf(-s)).sum();
    // Euler-Maclaurin remainder from N onward.
    let a = N as f64 + q;
    direct + a.powf(1.0 - s) / (s - 1.0) + 0.5 * a.powf(-s) + s / 12.0 * a.powf(-s - 1.0)
        - s * (s + 1.0) * (s + 2.0) / 720.0 * a.powf(-s - 3.0)
}

/// Discrete power-law maximum-likelihood fit, maximising
/// `−α Σ ln x − n ln ζ(α, x_min)` over the tail `x ≥ x_min`.
///
/// With `x_min = None` the cutoff minimising the Kolmogorov-Smirnov distance
/// is chosen among cutoffs that keep at least `min_tail` samples.
pub fn fit_power_law(samples: &[usize], x_min: Option<usize>, min_tail: usize) -> Result<PowerLawFit> {
    let mut xs: Vec<usize> = samples.iter().copied().filter(|&x| x > 0).collect();
    xs.sort_unstable();
    let fit_at = |xm: usize| -> Option<PowerLawFit> {
        let start = xs.partition_point(|&x| x < xm);
        let tail = &xs[start..];
        if tail.len() < min_tail.max(2) || tail[0] == tail[tail.len() - 1] {
            return None;
        }
        let n = tail.len() as f64;
        let sum_ln: f64 = tail.iter().map(|&x| (x as f64).ln()).sum();
        let q = xm as f64;
        let nll = |a: f64| a * sum_ln + n * hurwitz_zeta(a, q).ln();
        // Golden-section search; the likelihood is unimodal in α.
        let (mut lo, mut hi) = (1.0 + 1e-6, 8.0);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = hi - phi * (hi - lo);
        let mut d = lo + phi * (hi - lo);
        let (mut fc, mut fd) = (nll(c), nll(d));
        while hi - lo > 1e-7 {
            if fc < fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - phi * (hi - lo);
                fc = nll(c);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + phi * (hi - lo);
                fd = nll(d);
            }
        }
        let alpha = 0.5 * (lo + hi);
        let z0 = hurwitz_zeta(alpha, q);
        let mut ks: f64 = 0.0;
        let mut i = 0;
        while i < tail.len() {
            let x = tail[i];
            let mut j = i;
            while j < tail.len() && tail[j] == x {
                j += 1;
            }
            let model_upto = 1.0 - hurwitz_zeta(alpha, x as f64 + 1.0) / z0;
            ks = ks.max((j as f64 / n - model_upto).abs());
            i = j;
        }
        Some(PowerLawFit {
            alpha,
            x_min: xm,
            n_tail: tail.len(),
            ks,
        })
    };
    let best = match x_min {
        Some(xm) => fit_at(xm.max(1)),
        None => {
            let mut cands: Vec<usize> = xs.clone();
            cands.dedup();
            cands
                .into_iter()
                .filter_map(fit_at)
                .min_by(|a, b| a.ks.total_cmp(&b.ks))
        }
    };
    best.ok_or_else(|| Error::InvalidArgument("not enough positive samples to fit a power law".into()))
}
