use std::path::{Path, PathBuf};
use std::time::Instant;

use direcgnn_core::eval::{
    attention_heatmap_export, attention_snapshot, evaluate_model, recommend as recommend_for, write_json_lines,
    CandidateMode,
};
use direcgnn_core::graph::{generate_synthetic, load_graph, save_graph, NodeType, Relation};
use direcgnn_core::train::{eval_path_seed, load_checkpoint, EpochRecord, Trainer, Variant};
use direcgnn_core::Error;
use serde::Serialize;

use crate::config::{self, RunConfig};
use crate::manifest::Recorder;
use crate::{CliError, CliResult, Common};

pub const GRAPH_FILE: &str = "graph.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const VARIANCE_FILE: &str = "attention_variance.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const RECOMMEND_FILE: &str = "recommendations.jsonl";

/// Reads an input file, naming it in the error when it cannot be opened.
fn read<T>(path: &Path, f: impl FnOnce(&Path) -> direcgnn_core::Result<T>) -> CliResult<T> {
    f(path).map_err(|e| match e {
        Error::Io(source) => CliError::File {
            path: path.to_path_buf(),
            source,
        },
        e => e.into(),
    })
}

fn out_dir(common: &Common) -> CliResult<&Path> {
    std::fs::create_dir_all(&common.out)?;
    Ok(&common.out)
}

pub fn generate(common: &Common, preset: &str, threads: usize) -> CliResult<PathBuf> {
    let cfg = config::generator(preset, common.config.as_deref(), common.seed)?;
    let dir = out_dir(common)?;
    let mut rec = Recorder::new("generate", cfg.seed, &cfg, threads);
    let g = generate_synthetic(&cfg)?;
    rec.lap("generate");
    let path = dir.join(GRAPH_FILE);
    save_graph(&g, &path)?;
    rec.output(&path)?;
    eprintln!(
        "generated {} monitors, {} metrics, {} dimensions; edges md {} kd {} mk {}",
        g.count(NodeType::Monitor),
        g.count(NodeType::Metric),
        g.count(NodeType::Dimension),
        g.num_edges(Relation::MonitorDimension),
        g.num_edges(Relation::MetricDimension),
        g.num_edges(Relation::MonitorMetric),
    );
    rec.write(dir)?;
    Ok(path)
}

fn write_log(history: &[EpochRecord], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "bce", "top1max", "align", "w_bce", "w_top1", "w_al", "total", "val_total"])?;
    for r in history {
        let t = &r.train;
        w.write_record([
            r.epoch.to_string(),
            t.bce.to_string(),
            t.top1max.to_string(),
            t.align.to_string(),
            t.w_bce.to_string(),
            t.w_top1.to_string(),
            t.w_align.to_string(),
            t.total.to_string(),
            r.validation.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(
    common: &Common,
    graph: &Path,
    preset: &str,
    variant: Option<Variant>,
    resume: bool,
    threads: usize,
) -> CliResult<PathBuf> {
    let cfg = config::run_config(preset, common.config.as_deref(), common.seed, variant)?;
    let g = read(graph, load_graph)?;
    let dir = out_dir(common)?;
    let ck = dir.join(CHECKPOINT_FILE);
    let mut rec = Recorder::new("train", cfg.train.seed, &cfg, threads);
    rec.input(graph)?;
    let mut t = if resume {
        let mut t = Trainer::resume(&g, &ck)?;
        t.cfg.max_epochs = cfg.train.max_epochs;
        if t.cfg != cfg.train || t.model.config != cfg.model {
            return Err(CliError::Config("configuration differs from the checkpoint being resumed".into()));
        }
        eprintln!("resuming at epoch {}", t.epoch);
        t
    } else {
        Trainer::new(&g, cfg.model.clone(), cfg.train.clone())?
    };
    while !t.stopped && t.epoch < t.cfg.max_epochs {
        let r = t.run_epoch()?;
        eprintln!(
            "epoch {:3}  lr {:.2e}  train {:.5}  val {:.5}{}",
            r.epoch,
            r.lr,
            r.train.total,
            r.validation.total,
            if r.improved { "  *" } else { "" }
        );
        t.save_checkpoint(&ck)?;
    }
    if t.epoch == 0 || !ck.exists() {
        t.save_checkpoint(&ck)?;
    }
    rec.lap("train");
    let log = dir.join(LOG_FILE);
    write_log(&t.history, &log)?;
    for p in [&ck, &direcgnn_core::train::blob_path(&ck), &log] {
        rec.output(p)?;
    }
    rec.write(dir)?;
    Ok(ck)
}

fn candidate_mode(pool: Option<usize>) -> CandidateMode {
    pool.map_or(CandidateMode::Fixed, |negatives| CandidateMode::Pool { negatives })
}

fn write_json(value: &impl Serialize, path: &Path) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("serialisable"))?;
    Ok(())
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    checkpoint: &'a Path,
    candidates: CandidateMode,
    buckets: usize,
    heatmaps: bool,
}

pub fn eval(
    common: &Common,
    graph: &Path,
    checkpoint: &Path,
    pool: Option<usize>,
    buckets: usize,
    heatmaps: bool,
    threads: usize,
) -> CliResult<PathBuf> {
    let g = read(graph, load_graph)?;
    let ck = read(checkpoint, load_checkpoint)?;
    let ctx = ck.eval_context(&g)?;
    let model = ck.best_model()?;
    let mode = candidate_mode(pool);
    let settings = EvalSettings {
        checkpoint,
        candidates: mode,
        buckets,
        heatmaps,
    };
    let mut rec = Recorder::new("eval", ck.manifest.train_config.seed, &settings, threads);
    rec.input(graph)?;
    rec.input(checkpoint)?;
    let dir = out_dir(common)?;
    let (report, results) = evaluate_model(&model, &g, &ctx.eval_graph, &ctx.split, mode, ctx.path_seed, buckets)?;
    rec.lap("evaluate");
    let report_path = dir.join(REPORT_FILE);
    write_json(&report, &report_path)?;
    let results_path = dir.join(RESULTS_FILE);
    write_json_lines(&results, &results_path)?;
    rec.output(&report_path)?;
    rec.output(&results_path)?;
    if heatmaps {
        let snap = attention_snapshot(&model, &ctx.eval_graph)?;
        let mut variance = std::collections::BTreeMap::new();
        for rel in Relation::ALL {
            let path = dir.join(format!("attention_{}.csv", rel.short()));
            match attention_heatmap_export(&snap, rel, &[], &path) {
                Ok(v) => {
                    variance.insert(rel.short(), v);
                    rec.output(&path)?;
                }
                Err(Error::Eval(msg)) => eprintln!("skipping {rel} heatmap: {msg}"),
                Err(e) => return Err(e.into()),
            }
        }
        let path = dir.join(VARIANCE_FILE);
        write_json(&variance, &path)?;
        rec.output(&path)?;
    }
    eprintln!(
        "{} queries: mrr {:.4}  ndcg@5 {:.4}  hr@1 {:.4}  recall@5 {:.4}",
        report.queries, report.mrr, report.ndcg_at_5, report.hitrate[0], report.recall[2]
    );
    rec.write(dir)?;
    Ok(report_path)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    variant: &'static str,
    path_lengths: String,
    samples: usize,
    lambda_align: f64,
    seed: u64,
    status: &'static str,
    mrr: Option<f64>,
    ndcg_at_5: Option<f64>,
    recall_at_5: Option<f64>,
    seconds: Option<f64>,
    reason: String,
}

pub fn ablate(common: &Common, graph: &Path, preset: &str, sweep: Option<&Path>, threads: usize) -> CliResult<PathBuf> {
    let base = config::run_config(preset, common.config.as_deref(), common.seed, None)?;
    let spec = config::sweep(sweep)?;
    let g = read(graph, load_graph)?;
    let dir = out_dir(common)?;
    let mut rec = Recorder::new("ablate", base.train.seed, &(&base, &spec), threads);
    rec.input(graph)?;
    let seeds = if spec.seeds.is_empty() { vec![base.train.seed] } else { spec.seeds.clone() };
    let mut rows = Vec::new();
    for &variant in &spec.variants {
        for lengths in &spec.path_lengths {
            for &samples in &spec.samples {
                for &lambda in &spec.lambda_align {
                    for &seed in &seeds {
                        let mut cfg = base.clone();
                        variant.apply(&mut cfg.model, &mut cfg.train);
                        cfg.model.path_lengths = lengths.clone();
                        cfg.model.paths_per_node = samples;
                        cfg.train.lambda_align = lambda;
                        cfg.train.seed = seed;
                        let row = |status, reason: String| SweepRow {
                            variant: variant.as_str(),
                            path_lengths: lengths.iter().map(ToString::to_string).collect::<Vec<_>>().join(";"),
                            samples,
                            lambda_align: lambda,
                            seed,
                            status,
                            mrr: None,
                            ndcg_at_5: None,
                            recall_at_5: None,
                            seconds: None,
                            reason,
                        };
                        let started = Instant::now();
                        match run_cell(&g, &cfg, spec.candidates) {
                            Ok(report) => {
                                let mut r = row("ok", String::new());
                                r.mrr = Some(report.mrr);
                                r.ndcg_at_5 = Some(report.ndcg_at_5);
                                r.recall_at_5 = Some(report.recall[2]);
                                r.seconds = Some(started.elapsed().as_secs_f64());
                                eprintln!("{} L={} s={} λ={} seed {}: mrr {:.4}", r.variant, r.path_lengths, samples, lambda, seed, report.mrr);
                                rows.push(r);
                            }
                            Err(
                                e @ (Error::InvalidArgument(_)
                                | Error::InfeasibleConfig(_)
                                | Error::Divergence { .. }
                                | Error::Sampling(_)),
                            ) => {
                                eprintln!("skipping cell: {e}");
                                rows.push(row("skipped", e.to_string()));
                            }
                            Err(e) => return Err(e.into()),
                        }
                    }
                }
            }
        }
    }
    rec.lap("sweep");
    let path = dir.join(SWEEP_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    rec.output(&path)?;
    rec.write(dir)?;
    Ok(path)
}

fn run_cell(
    g: &direcgnn_core::graph::MonitorEntityGraph,
    cfg: &RunConfig,
    mode: CandidateMode,
) -> direcgnn_core::Result<direcgnn_core::eval::MetricReport> {
    cfg.model.validate()?;
    let mut t = Trainer::new(g, cfg.model.clone(), cfg.train.clone())?;
    t.fit()?;
    let model = t.best_model();
    let (report, _) = evaluate_model(&model, g, t.eval_graph(), &t.split, mode, t.eval_path_seed(), 4)?;
    Ok(report)
}

#[derive(Serialize)]
struct RecommendSettings<'a> {
    checkpoint: &'a Path,
    monitors: &'a [usize],
    k: usize,
}

pub fn recommend(
    common: &Common,
    graph: &Path,
    checkpoint: &Path,
    monitors: &[usize],
    k: usize,
    threads: usize,
) -> CliResult<PathBuf> {
    let g = read(graph, load_graph)?;
    let ck = read(checkpoint, load_checkpoint)?;
    if g.d_feat() != ck.manifest.d_feat {
        return Err(Error::FeatureWidth {
            checkpoint: ck.manifest.d_feat,
            graph: g.d_feat(),
        }
        .into());
    }
    let n = g.count(NodeType::Monitor);
    if let Some(m) = monitors.iter().find(|&&m| m >= n) {
        return Err(CliError::Config(format!("monitor {m} does not exist ({n} monitors)")));
    }
    let seed = ck.manifest.train_config.seed;
    let settings = RecommendSettings { checkpoint, monitors, k };
    let mut rec = Recorder::new("recommend", seed, &settings, threads);
    rec.input(graph)?;
    rec.input(checkpoint)?;
    let model = ck.best_model()?;
    let emb = model.embed_all(&g, eval_path_seed(seed))?;
    let mut out = Vec::new();
    for &m in monitors {
        match recommend_for(&emb, &g, m, k) {
            Ok(r) => out.push(r),
            Err(Error::Eval(msg)) => eprintln!("skipping monitor {m}: {msg}"),
            Err(e) => return Err(e.into()),
        }
    }
    rec.lap("recommend");
    let dir = out_dir(common)?;
    let path = dir.join(RECOMMEND_FILE);
    write_json_lines(&out, &path)?;
    rec.output(&path)?;
    rec.write(dir)?;
    Ok(path)
}
