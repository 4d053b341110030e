//! Mini-batch training loop with validation-driven learning-rate halving,
//! early stopping and bit-exact checkpoint/resume.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{split_edges, EdgeSplit, MonitorEntityGraph, NodeId, Relation};
use crate::losses::{loss_align, loss_bce, loss_top1max, loss_total, BalancerState, LossBreakdown};
use crate::model::{pair_logits, Model, ModelConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::sampling::{derive_seed, rng_for, sample_negatives, sample_subgraph, NegativeMode, PathSample, Subgraph};
use crate::{Tape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

const STREAM_SHUFFLE: u64 = 0x5348_5546;
const STREAM_SUBGRAPH: u64 = 0x5355_4247;
const STREAM_PATHS: u64 = 0x5041_5448;
const STREAM_VALID: u64 = 0x5641_4C49;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub scheduler_patience: usize,
    pub scheduler_factor: f64,
    pub early_stop_patience: usize,
    pub neg_ratio: f64,
    pub seed: u64,
    /// Neighbourhood hops sampled around each batch.
    pub hops: usize,
    /// Neighbours kept per node, relation and hop; `None` keeps all.
    pub fanout: Option<usize>,
    pub lambda_align: f64,
    pub use_align: bool,
    pub use_top1: bool,
    /// Inverse-EMA loss balancing; plain sum when off.
    pub balance: bool,
    /// Reuse the first epoch's walks instead of resampling every epoch.
    pub freeze_paths: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-5,
            scheduler_patience: 5,
            scheduler_factor: 0.5,
            early_stop_patience: 10,
            neg_ratio: 2.0,
            seed: 0,
            hops: 3,
            fanout: Some(10),
            lambda_align: 0.1,
            use_align: true,
            use_top1: true,
            balance: false,
            freeze_paths: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.scheduler_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be at least 1");
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return bad("scheduler_factor must lie in (0, 1)");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be finite and non-negative");
        }
        if !(self.neg_ratio > 0.0 && self.neg_ratio.is_finite()) {
            return bad("neg_ratio must be positive");
        }
        if self.hops == 0 || self.fanout == Some(0) {
            return bad("hops and fanout must be at least 1");
        }
        if !(self.lambda_align >= 0.0 && self.lambda_align.is_finite()) {
            return bad("lambda_align must be finite and non-negative");
        }
        Ok(())
    }

    /// Which of (BCE, TOP1-max, alignment) contribute. Alignment at zero
    /// strength counts as off.
    pub fn active(&self) -> [bool; 3] {
        [true, self.use_top1, self.use_align && self.lambda_align > 0.0]
    }
}

/// Ablation ladder: plain attention, then alignment, ranking loss, and the
/// path branch with loss balancing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Al,
    AlRl,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Al, Variant::AlRl, Variant::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Al => "al",
            Variant::AlRl => "al_rl",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig) {
        model.use_rwa = self == Variant::Full;
        train.use_align = self != Variant::Base;
        train.use_top1 = matches!(self, Variant::AlRl | Variant::Full);
        train.balance = self == Variant::Full;
    }
}

/// Validation bookkeeping for learning-rate halving and early stopping.
/// The two patience counters are independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub best: Option<f64>,
    /// Epochs since the last strict improvement.
    pub since_improve: usize,
    /// Stagnant epochs since the last improvement or halving.
    pub stagnant: usize,
    pub patience: usize,
    pub factor: f64,
    pub stop_patience: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            best: None,
            since_improve: 0,
            stagnant: 0,
            patience: cfg.scheduler_patience,
            factor: cfg.scheduler_factor,
            stop_patience: cfg.early_stop_patience,
        }
    }

    /// Records a validation loss and returns the learning rate to use next.
    /// Improvement is a strictly lower loss.
    pub fn lr_schedule_step(&mut self, val_loss: f64) -> Result<f64> {
        if !val_loss.is_finite() {
            return Err(Error::InvalidArgument(format!("validation loss {val_loss} is not finite")));
        }
        if self.best.is_none_or(|b| val_loss < b) {
            self.best = Some(val_loss);
            self.since_improve = 0;
            self.stagnant = 0;
        } else {
            self.since_improve += 1;
            self.stagnant += 1;
            if self.stagnant >= self.patience {
                self.lr *= self.factor;
                self.stagnant = 0;
            }
        }
        Ok(self.lr)
    }

    pub fn early_stop_check(&self) -> StopDecision {
        if self.since_improve >= self.stop_patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn improved_last(&self) -> bool {
        self.since_improve == 0 && self.best.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub improved: bool,
}

/// Node rows in `index` order for the endpoints of `pairs`, plus the
/// position of each pair's monitor and dimension among those targets.
struct Targets {
    nodes: Vec<NodeId>,
    monitor_pos: Rc<[usize]>,
    dimension_pos: Rc<[usize]>,
}

fn targets_of(pairs: &[(usize, usize)]) -> Targets {
    let set: BTreeSet<NodeId> = pairs
        .iter()
        .flat_map(|&(m, d)| [NodeId::monitor(m), NodeId::dimension(d)])
        .collect();
    let nodes: Vec<NodeId> = set.into_iter().collect();
    let pos = |n: NodeId| nodes.binary_search(&n).expect("collected above");
    let monitor_pos = pairs.iter().map(|&(m, _)| pos(NodeId::monitor(m))).collect();
    let dimension_pos = pairs.iter().map(|&(_, d)| pos(NodeId::dimension(d))).collect();
    Targets {
        nodes,
        monitor_pos,
        dimension_pos,
    }
}

/// Inputs of one objective evaluation.
pub struct LossInputs<'g> {
    pub graph: &'g MonitorEntityGraph,
    pub subgraph: Subgraph,
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
    /// Positive index of each negative.
    pub owner: Vec<usize>,
    pub path_seed: u64,
}

/// Forward pass and objective on a fresh tape. Returns the tape, the loss
/// and its breakdown; gradients are available after `tape.backward(loss)`.
pub fn objective(
    model: &Model,
    trainable: bool,
    cfg: &TrainConfig,
    weights: [f64; 3],
    paths_graph: &MonitorEntityGraph,
    inp: &LossInputs<'_>,
) -> Result<(Tape, crate::model::Params, crate::Var, LossBreakdown)> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, trainable);
    let (loss, breakdown) = objective_on(&mut tape, &p, model, cfg, weights, paths_graph, inp)?;
    Ok((tape, p, loss, breakdown))
}

/// [`objective`] on parameters already recorded on `tape`.
pub fn objective_on(
    tape: &mut Tape,
    p: &crate::model::Params,
    model: &Model,
    cfg: &TrainConfig,
    weights: [f64; 3],
    paths_graph: &MonitorEntityGraph,
    inp: &LossInputs<'_>,
) -> Result<(crate::Var, LossBreakdown)> {
    let (h, index, records) = model.propagate(tape, p, inp.graph, &inp.subgraph)?;
    let mut pairs = inp.positives.clone();
    pairs.extend_from_slice(&inp.negatives);
    let t = targets_of(&pairs);
    let rows: Vec<usize> = t
        .nodes
        .iter()
        .map(|&n| {
            inp.subgraph
                .local(n)
                .map(|l| index.row(n.ty, l))
                .ok_or_else(|| Error::Sampling(format!("{n} missing from its own subgraph")))
        })
        .collect::<Result<_>>()?;
    let paths: Vec<Vec<PathSample>> = t
        .nodes
        .iter()
        .map(|&n| model.paths_for(paths_graph, n, inp.path_seed))
        .collect::<Result<_>>()?;
    let r = model.readout(tape, p, paths_graph, h, &rows, &paths)?;
    let a = tape.gather_rows(r.reps, t.monitor_pos.clone())?;
    let b = tape.gather_rows(r.reps, t.dimension_pos.clone())?;
    let logits = pair_logits(tape, a, b)?;
    let probs = tape.sigmoid(logits)?;
    let n_pos = inp.positives.len();
    let mut labels = vec![1.0; n_pos];
    labels.resize(pairs.len(), 0.0);
    let bce = loss_bce(tape, probs, &labels)?;
    let top1 = if cfg.use_top1 && !inp.negatives.is_empty() {
        let pos = tape.gather_rows(logits, (0..n_pos).collect())?;
        let neg = tape.gather_rows(logits, (n_pos..pairs.len()).collect())?;
        Some(loss_top1max(tape, pos, neg, &inp.owner)?)
    } else {
        None
    };
    let align = if cfg.use_align {
        Some(loss_align(tape, &records, cfg.lambda_align)?)
    } else {
        None
    };
    loss_total(tape, bce, top1, align, weights)
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown {
        bce: 0.0,
        top1max: 0.0,
        align: 0.0,
        w_bce: 0.0,
        w_top1: 0.0,
        w_align: 0.0,
        total: 0.0,
    };
    for b in items {
        m.bce += b.bce / n;
        m.top1max += b.top1max / n;
        m.align += b.align / n;
        m.w_bce += b.w_bce / n;
        m.w_top1 += b.w_top1 / n;
        m.w_align += b.w_align / n;
        m.total += b.total / n;
    }
    m
}

pub struct Trainer<'g> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub split: EdgeSplit,
    pub adam: AdamState,
    pub schedule: Schedule,
    pub balancer: BalancerState,
    /// Next epoch to run (0-based).
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_params: Vec<Tensor>,
    pub stopped: bool,
    graph: &'g MonitorEntityGraph,
    message_graph: MonitorEntityGraph,
    eval_graph: MonitorEntityGraph,
}

impl<'g> Trainer<'g> {
    /// Splits the monitor-dimension edges of `g` with `cfg.seed` and
    /// initialises the model from the same seed.
    pub fn new(g: &'g MonitorEntityGraph, model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        let split = split_edges(g, Relation::MonitorDimension, cfg.seed)?;
        Self::with_split(g, split, model_cfg, cfg)
    }

    pub fn with_split(
        g: &'g MonitorEntityGraph,
        split: EdgeSplit,
        model_cfg: ModelConfig,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if split.relation != Relation::MonitorDimension {
            return Err(Error::InvalidArgument("the supervised relation must be monitor-dimension".into()));
        }
        if split.train_supervision.is_empty() || split.validation.is_empty() {
            return Err(Error::InvalidArgument("split has no supervision or validation edges".into()));
        }
        let model = Model::new(model_cfg, g.d_feat(), cfg.seed)?;
        let adam = AdamState::new(
            &model.params,
            AdamConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            },
        );
        let message_graph = g.with_md_edges(&split.train_message)?;
        let eval_graph = g.with_md_edges(&split.train())?;
        Ok(Self {
            schedule: Schedule::new(&cfg),
            balancer: BalancerState::default(),
            best_params: model.params.clone(),
            cfg,
            model,
            split,
            adam,
            epoch: 0,
            history: Vec::new(),
            stopped: false,
            graph: g,
            message_graph,
            eval_graph,
        })
    }

    pub fn graph(&self) -> &MonitorEntityGraph {
        self.graph
    }

    /// Message edges: the message share of the training edges.
    pub fn message_graph(&self) -> &MonitorEntityGraph {
        &self.message_graph
    }

    /// Message edges for validation and test: every training edge.
    pub fn eval_graph(&self) -> &MonitorEntityGraph {
        &self.eval_graph
    }

    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        m.params = self.best_params.clone();
        m
    }

    fn path_seed(&self, epoch: usize) -> u64 {
        let e = if self.cfg.freeze_paths { 0 } else { epoch as u64 + 1 };
        derive_seed(self.cfg.seed, &[STREAM_PATHS, e])
    }

    /// Path seed used for validation and evaluation walks.
    pub fn eval_path_seed(&self) -> u64 {
        eval_path_seed(self.cfg.seed)
    }

    /// Batches of supervision edges for `epoch`, in visiting order.
    pub fn batches(&self, epoch: usize) -> Vec<Vec<(usize, usize)>> {
        let mut edges = self.split.train_supervision.clone();
        edges.shuffle(&mut rng_for(self.cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        edges.chunks(self.cfg.batch_size).map(<[_]>::to_vec).collect()
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let lr = self.schedule.lr;
        self.adam.set_lr(lr);
        let active = self.cfg.active();
        let mut parts = Vec::new();
        for (b, batch) in self.batches(epoch).into_iter().enumerate() {
            let diverged = |detail: String| Error::Divergence { epoch, batch: b, detail };
            let stream = ((epoch as u64) << 32) | b as u64;
            let neg = sample_negatives(
                self.graph,
                &batch,
                self.cfg.neg_ratio,
                NegativeMode::Dynamic { stream },
                self.cfg.seed,
            )?;
            let mut seeds = batch.clone();
            seeds.extend_from_slice(&neg.pairs);
            let sub = sample_subgraph(
                &self.message_graph,
                &seeds,
                self.cfg.hops,
                self.cfg.fanout,
                derive_seed(self.cfg.seed, &[STREAM_SUBGRAPH, stream]),
            )?;
            let inp = LossInputs {
                graph: &self.message_graph,
                subgraph: sub,
                positives: batch,
                negatives: neg.pairs,
                owner: neg.owner,
                path_seed: self.path_seed(epoch),
            };
            // Weights come from the EMAs before this batch; the EMAs are
            // updated with this batch's values afterwards.
            let weights = if self.cfg.balance {
                self.balancer.weights(active)
            } else {
                [1.0; 3]
            };
            let (mut tape, p, loss, bd) = match objective(&self.model, true, &self.cfg, weights, self.graph, &inp) {
                Ok(x) => x,
                Err(Error::NonFinite { op }) => return Err(diverged(format!("non-finite value in {op}"))),
                Err(e) => return Err(e),
            };
            if !bd.total.is_finite() {
                return Err(diverged(format!("loss is {}", bd.total)));
            }
            tape.backward(loss).map_err(|e| match e {
                Error::NonFinite { op } => diverged(format!("non-finite gradient in {op}")),
                e => e,
            })?;
            let grads: Vec<Vec<f64>> = p
                .vars
                .iter()
                .zip(&self.model.params)
                .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect();
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(diverged("non-finite gradient".into()));
            }
            let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            adam_step(&mut self.model.params, &refs, &mut self.adam)?;
            if self.cfg.balance {
                self.balancer.update([bd.bce, bd.top1max, bd.align], active)?;
            }
            parts.push(bd);
        }
        let validation = self.validation_loss()?;
        if !validation.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: parts.len(),
                detail: "validation loss is not finite".into(),
            });
        }
        self.schedule.lr_schedule_step(validation.total)?;
        let improved = self.schedule.improved_last();
        if improved {
            self.best_params = self.model.params.clone();
        }
        let record = EpochRecord {
            epoch,
            train: mean_breakdown(&parts),
            validation,
            lr,
            improved,
        };
        self.history.push(record.clone());
        self.epoch += 1;
        if self.schedule.early_stop_check() == StopDecision::Stop {
            self.stopped = true;
        }
        Ok(record)
    }

    /// Objective on validation positives and their fixed negatives over the
    /// evaluation graph.
    pub fn validation_loss(&self) -> Result<LossBreakdown> {
        let weights = if self.cfg.balance {
            self.balancer.weights(self.cfg.active())
        } else {
            [1.0; 3]
        };
        let mut negatives = Vec::new();
        let mut owner = Vec::new();
        for (i, (&(m, _), negs)) in self.split.validation.iter().zip(&self.split.validation_negatives).enumerate() {
            for &d in negs {
                negatives.push((m, d));
                owner.push(i);
            }
        }
        let inp = LossInputs {
            graph: &self.eval_graph,
            subgraph: Subgraph::full(&self.eval_graph),
            positives: self.split.validation.clone(),
            negatives,
            owner,
            path_seed: derive_seed(self.eval_path_seed(), &[STREAM_VALID]),
        };
        let (_, _, _, bd) = objective(&self.model, false, &self.cfg, weights, self.graph, &inp)?;
        Ok(bd)
    }

    /// Runs epochs until `max_epochs` or early stopping.
    pub fn fit(&mut self) -> Result<()> {
        while !self.stopped && self.epoch < self.cfg.max_epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut blob = Vec::new();
        let push = |blob: &mut Vec<u8>, xs: &[f64]| xs.iter().for_each(|x| blob.extend_from_slice(&x.to_le_bytes()));
        for t in self.model.params.iter().chain(&self.best_params) {
            push(&mut blob, t.data());
        }
        for m in self.adam.m.iter().chain(&self.adam.v) {
            push(&mut blob, m);
        }
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            model_config: self.model.config.clone(),
            train_config: self.cfg.clone(),
            d_feat: self.model.d_feat,
            graph_fingerprint: graph_fingerprint(self.graph),
            epoch: self.epoch,
            stopped: self.stopped,
            schedule: self.schedule.clone(),
            balancer: self.balancer.clone(),
            adam_step: self.adam.step,
            adam_config: self.adam.config,
            history: self.history.clone(),
            params: self
                .model
                .names
                .iter()
                .zip(&self.model.params)
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            blob_layout: "params, best_params, adam_m, adam_v; f64 little-endian".into(),
            blob_len: blob.len(),
            blob_sha256: format!("{:x}", Sha256::digest(&blob)),
        };
        let blob_path = blob_path(path);
        std::fs::write(&blob_path, &blob)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.flush()?;
        Ok(())
    }

    /// Restores a trainer from `path`; `g` must be the graph it was trained on.
    pub fn resume(g: &'g MonitorEntityGraph, path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        if ck.manifest.graph_fingerprint != graph_fingerprint(g) {
            return Err(Error::Checkpoint("checkpoint was trained on a different graph".into()));
        }
        let m = ck.manifest;
        let mut t = Self::new(g, m.model_config.clone(), m.train_config.clone())?;
        t.model = Model::from_params(m.model_config, m.d_feat, ck.params)?;
        t.best_params = ck.best_params;
        t.adam = AdamState {
            config: m.adam_config,
            step: m.adam_step,
            m: ck.adam_m,
            v: ck.adam_v,
        };
        t.schedule = m.schedule;
        t.balancer = m.balancer;
        t.epoch = m.epoch;
        t.history = m.history;
        t.stopped = m.stopped;
        Ok(t)
    }
}

/// Walk seed for validation and test embeddings of a run seeded with `seed`.
pub fn eval_path_seed(seed: u64) -> u64 {
    derive_seed(seed, &[STREAM_PATHS, 0])
}

/// Trains to completion and returns the best-validation model.
pub fn train(
    g: &MonitorEntityGraph,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
) -> Result<(Model, Vec<EpochRecord>)> {
    let mut t = Trainer::new(g, model_cfg, cfg)?;
    t.fit()?;
    Ok((t.best_model(), t.history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub d_feat: usize,
    pub graph_fingerprint: String,
    pub epoch: usize,
    pub stopped: bool,
    pub schedule: Schedule,
    pub balancer: BalancerState,
    pub adam_step: u64,
    pub adam_config: AdamConfig,
    pub history: Vec<EpochRecord>,
    pub params: Vec<ParamEntry>,
    pub blob_layout: String,
    pub blob_len: usize,
    pub blob_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: Vec<Tensor>,
    pub best_params: Vec<Tensor>,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

/// What evaluating a checkpoint on a graph needs: the run's split, the
/// graph restricted to training edges, and the evaluation walk seed.
pub struct EvalContext {
    pub split: EdgeSplit,
    pub eval_graph: MonitorEntityGraph,
    pub path_seed: u64,
}

impl Checkpoint {
    /// The best-validation model stored in the checkpoint.
    pub fn best_model(&self) -> Result<Model> {
        Model::from_params(self.manifest.model_config.clone(), self.manifest.d_feat, self.best_params.clone())
    }

    /// Re-derives the run's split of `g`, whose feature width must match.
    pub fn eval_context(&self, g: &MonitorEntityGraph) -> Result<EvalContext> {
        if g.d_feat() != self.manifest.d_feat {
            return Err(Error::FeatureWidth {
                checkpoint: self.manifest.d_feat,
                graph: g.d_feat(),
            });
        }
        let seed = self.manifest.train_config.seed;
        let split = split_edges(g, Relation::MonitorDimension, seed)?;
        let eval_graph = g.with_md_edges(&split.train())?;
        Ok(EvalContext {
            split,
            eval_graph,
            path_seed: eval_path_seed(seed),
        })
    }
}

/// Parameter blob stored next to the manifest.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let blob = std::fs::read(blob_path(path))?;
    if blob.len() != manifest.blob_len {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_len
        )));
    }
    if format!("{:x}", Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::Checkpoint("blob hash does not match the manifest".into()));
    }
    let sizes: Vec<usize> = manifest.params.iter().map(|p| p.shape.iter().product()).collect();
    let per_copy: usize = sizes.iter().sum();
    if blob.len() != 4 * per_copy * 8 {
        return Err(Error::Checkpoint(format!(
            "blob of {} bytes does not fit the declared parameter shapes",
            blob.len()
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut chunks = Vec::with_capacity(4 * sizes.len());
    let mut at = 0;
    for _ in 0..4 {
        for &n in &sizes {
            chunks.push(values[at..at + n].to_vec());
            at += n;
        }
    }
    let mut chunks = chunks.into_iter();
    let mut tensors = || -> Result<Vec<Tensor>> {
        manifest
            .params
            .iter()
            .map(|p| Tensor::new(p.shape.clone(), chunks.next().expect("counted")))
            .collect()
    };
    let params = tensors()?;
    let best_params = tensors()?;
    let adam_m = chunks.by_ref().take(sizes.len()).collect();
    let adam_v = chunks.collect();
    Ok(Checkpoint {
        manifest,
        params,
        best_params,
        adam_m,
        adam_v,
    })
}

/// SHA-256 over node counts, edge lists and feature bits.
pub fn graph_fingerprint(g: &MonitorEntityGraph) -> String {
    let mut h = Sha256::new();
    for c in g.counts() {
        h.update((c as u64).to_le_bytes());
    }
    for rel in Relation::ALL {
        h.update((g.num_edges(rel) as u64).to_le_bytes());
        for &(s, d) in g.edges(rel) {
            h.update((s as u64).to_le_bytes());
            h.update((d as u64).to_le_bytes());
        }
    }
    if let Some(f) = g.features() {
        h.update((f.dim() as u64).to_le_bytes());
        for x in f.data() {
            h.update(x.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}
