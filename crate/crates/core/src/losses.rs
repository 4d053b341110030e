//! Training objective: binary cross-entropy, TOP1-max ranking loss,
//! across-head attention alignment, and their balanced sum.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::AttentionRecord;
use crate::{Tape, Tensor, Var};

/// `−mean(y ln ŷ + (1 − y) ln(1 − ŷ))` over probabilities `probs: n × 1`.
pub fn loss_bce(tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var> {
    let n = tape.value(probs).numel();
    if labels.len() != n {
        return Err(shape_err("loss_bce", format!("{} labels for {n} predictions", labels.len())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let shape = tape.value(probs).shape().to_vec();
    let y = tape.constant(Tensor::new(shape.clone(), labels.to_vec())?);
    let not_y = tape.constant(Tensor::new(shape, labels.iter().map(|l| 1.0 - l).collect())?);
    let log_p = tape.log(probs)?;
    let one_minus = tape.affine(probs, -1.0, 1.0)?;
    let log_q = tape.log(one_minus)?;
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scale(m, -1.0)
}

/// TOP1-max over raw scores. `neg` row `j` belongs to positive `owner[j]`:
/// per positive, `Σ_j softmax(r_neg)_j [σ(r_j − r_pos) + σ(r_j²)]`, averaged
/// over positives that own at least one negative.
pub fn loss_top1max(tape: &mut Tape, pos: Var, neg: Var, owner: &[usize]) -> Result<Var> {
    let n = tape.value(pos).rows();
    let m = tape.value(neg).rows();
    if tape.value(pos).cols() != 1 || tape.value(neg).cols() != 1 {
        return Err(shape_err("loss_top1max", "scores must be column vectors"));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("TOP1-max needs at least one negative".into()));
    }
    if owner.len() != m {
        return Err(shape_err("loss_top1max", format!("{} owners for {m} negatives", owner.len())));
    }
    if let Some(&bad) = owner.iter().find(|&&o| o >= n) {
        return Err(shape_err("loss_top1max", format!("owner {bad} out of {n} positives")));
    }
    let owner: Rc<[usize]> = owner.into();
    let mut owned = vec![false; n];
    owner.iter().for_each(|&o| owned[o] = true);
    let n_owned = owned.iter().filter(|&&o| o).count();
    let s = tape.segment_softmax(neg, owner.clone(), n)?;
    let rp = tape.gather_rows(pos, owner)?;
    let diff = tape.sub(neg, rp)?;
    let t1 = tape.sigmoid(diff)?;
    let sq = tape.square(neg)?;
    let t2 = tape.sigmoid(sq)?;
    let terms = tape.add(t1, t2)?;
    let weighted = tape.mul(s, terms)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, 1.0 / n_owned as f64)
}

/// `λ · (1/L) Σ_l mean((α_l − ᾱ_l)²)` where `ᾱ_l` is the per-edge mean over
/// heads. Layers without message edges contribute zero.
pub fn loss_align(tape: &mut Tape, records: &[AttentionRecord], lambda: f64) -> Result<Var> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no attention records".into()));
    }
    let mut per_layer = Vec::with_capacity(records.len());
    for rec in records {
        let Some(alpha) = rec.alpha else { continue };
        let (e, h) = (tape.value(alpha).rows(), tape.value(alpha).cols());
        if h != rec.heads || e != rec.receivers.len() {
            return Err(shape_err(
                "loss_align",
                format!("attention {e}×{h} for {} edges and {} heads", rec.receivers.len(), rec.heads),
            ));
        }
        let avg = tape.constant(Tensor::matrix(h, h, vec![1.0 / h as f64; h * h])?);
        let mean = tape.matmul(alpha, avg)?;
        let d = tape.sub(alpha, mean)?;
        let sq = tape.square(d)?;
        per_layer.push(tape.mean(sq)?);
    }
    let mut total = match per_layer.first() {
        Some(&v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for &v in per_layer.iter().skip(1) {
        total = tape.add(total, v)?;
    }
    tape.scale(total, lambda / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub top1max: f64,
    pub align: f64,
    pub w_bce: f64,
    pub w_top1: f64,
    pub w_align: f64,
    pub total: f64,
}

/// Weighted sum of the three components on one tape. Components given as
/// `None` are skipped and reported as zero.
pub fn loss_total(
    tape: &mut Tape,
    bce: Var,
    top1max: Option<Var>,
    align: Option<Var>,
    weights: [f64; 3],
) -> Result<(Var, LossBreakdown)> {
    let value = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let mut total = tape.scale(bce, weights[0])?;
    for (v, w) in [(top1max, weights[1]), (align, weights[2])] {
        if let Some(v) = v {
            let s = tape.scale(v, w)?;
            total = tape.add(total, s)?;
        }
    }
    let b = LossBreakdown {
        bce: tape.value(bce).item(),
        top1max: value(tape, top1max),
        align: value(tape, align),
        w_bce: weights[0],
        w_top1: if top1max.is_some() { weights[1] } else { 0.0 },
        w_align: if align.is_some() { weights[2] } else { 0.0 },
        total: tape.value(total).item(),
    };
    Ok((total, b))
}

/// Inverse-magnitude weighting from exponential moving averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancerState {
    /// `None` until the first update.
    pub ema: Option<[f64; 3]>,
    pub factor: f64,
    pub eps: f64,
    pub bce_floor: f64,
}

impl Default for BalancerState {
    fn default() -> Self {
        Self {
            ema: None,
            factor: 0.9,
            eps: 1e-8,
            bce_floor: 0.5,
        }
    }
}

impl BalancerState {
    /// Weights for the current EMAs without updating them; `(1, 1, 1)`
    /// before any update.
    pub fn weights(&self, active: [bool; 3]) -> [f64; 3] {
        let Some(ema) = self.ema else {
            return active.map(|a| if a { 1.0 } else { 0.0 });
        };
        let mut w = [0.0; 3];
        for c in 0..3 {
            if active[c] {
                w[c] = 1.0 / ema[c].max(self.eps);
            }
        }
        let n_active = active.iter().filter(|&&a| a).count() as f64;
        let sum: f64 = w.iter().sum();
        if sum <= 0.0 {
            return w;
        }
        let target = n_active;
        w.iter_mut().for_each(|x| *x *= target / sum);
        if active[0] && w[0] < self.bce_floor && n_active > 1.0 {
            let rest: f64 = w[1] + w[2];
            let scale = (target - self.bce_floor) / rest;
            w[0] = self.bce_floor;
            w[1] *= scale;
            w[2] *= scale;
        }
        w
    }

    /// Folds `current` into the EMAs and returns the new weights.
    pub fn update(&mut self, current: [f64; 3], active: [bool; 3]) -> Result<[f64; 3]> {
        if current.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!("loss components {current:?} must be finite and ≥ 0")));
        }
        let ema = match self.ema {
            None => current,
            Some(prev) => std::array::from_fn(|c| self.factor * prev[c] + (1.0 - self.factor) * current[c]),
        };
        self.ema = Some(ema.map(|v| v.max(self.eps)));
        Ok(self.weights(active))
    }
}
