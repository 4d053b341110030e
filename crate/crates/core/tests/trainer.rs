use direcgnn_core::graph::{generate_synthetic, GeneratorConfig, MonitorEntityGraph, Relation};
use direcgnn_core::model::ModelConfig;
use direcgnn_core::train::*;
use direcgnn_core::Error;
use direcgnn_core::losses::BalancerState;

fn small_graph() -> MonitorEntityGraph {
    generate_synthetic(&small_config()).unwrap()
}

fn small_config() -> GeneratorConfig {
    GeneratorConfig {
        monitors: 60,
        metrics: 16,
        dimensions: 40,
        groups: 6,
        d_feat: 8,
        seed: 21,
        ..GeneratorConfig::desk()
    }
}

fn model_cfg() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 8,
        out: 8,
        heads: 2,
        path_lengths: vec![2, 6],
        paths_per_node: 2,
        use_rwa: true,
        ..ModelConfig::desk()
    }
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 6,
        batch_size: 32,
        lr: 5e-3,
        hops: 2,
        fanout: Some(5),
        seed,
        ..TrainConfig::default()
    }
}

fn schedule() -> Schedule {
    Schedule::new(&TrainConfig::default())
}

#[test]
fn lr_halves_after_five_stagnant_epochs() {
    let mut s = schedule();
    assert_eq!(s.lr_schedule_step(1.0).unwrap(), 0.001);
    for _ in 0..4 {
        assert_eq!(s.lr_schedule_step(1.0).unwrap(), 0.001);
    }
    assert_eq!(s.lr_schedule_step(1.0).unwrap(), 0.0005);
    assert_eq!(s.stagnant, 0);
    assert_eq!(s.early_stop_check(), StopDecision::Continue);
}

#[test]
fn improvement_resets_counters() {
    let mut s = schedule();
    s.lr_schedule_step(1.0).unwrap();
    for _ in 0..3 {
        s.lr_schedule_step(1.0).unwrap();
    }
    assert_eq!(s.lr_schedule_step(0.9).unwrap(), 0.001);
    assert_eq!((s.stagnant, s.since_improve), (0, 0));
    assert!(s.improved_last());
    assert_eq!(s.best, Some(0.9));
}

#[test]
fn equal_loss_is_not_improvement() {
    let mut s = schedule();
    s.lr_schedule_step(0.5).unwrap();
    s.lr_schedule_step(0.5).unwrap();
    assert_eq!(s.since_improve, 1);
    assert!(!s.improved_last());
}

#[test]
fn stagnation_trace_halves_twice_then_stops_at_ten() {
    let mut s = schedule();
    s.lr_schedule_step(1.0).unwrap();
    let mut lrs = Vec::new();
    let mut stopped_at = None;
    for epoch in 1..=15 {
        lrs.push(s.lr_schedule_step(1.0).unwrap());
        if s.early_stop_check() == StopDecision::Stop {
            stopped_at = Some(epoch);
            break;
        }
    }
    assert_eq!(stopped_at, Some(10));
    assert_eq!(lrs[4], 0.0005);
    assert_eq!(lrs[9], 0.00025);
    assert!(lrs.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] * 0.5));
}

#[test]
fn improving_losses_never_stop() {
    let mut s = schedule();
    for i in 0..100 {
        s.lr_schedule_step(1.0 / (i + 1) as f64).unwrap();
        assert_eq!(s.early_stop_check(), StopDecision::Continue);
    }
    assert_eq!(s.lr, 0.001);
}

#[test]
fn late_improvement_keeps_training() {
    let trace = [1.0, 1.2, 1.1, 1.3, 1.05, 1.4, 1.2, 1.1, 1.01, 0.99, 1.2, 1.3];
    let mut s = schedule();
    for (epoch, &v) in trace.iter().enumerate() {
        s.lr_schedule_step(v).unwrap();
        assert_eq!(s.early_stop_check(), StopDecision::Continue, "epoch {epoch}");
    }
    assert_eq!(s.best, Some(0.99));
    assert_eq!(s.since_improve, 2);
    assert_eq!(s.lr, 0.0005);
}

#[test]
fn non_finite_validation_loss_is_rejected() {
    assert!(schedule().lr_schedule_step(f64::NAN).is_err());
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig { batch_size: 0, ..ok.clone() },
        TrainConfig { scheduler_patience: 0, ..ok.clone() },
        TrainConfig { early_stop_patience: 0, ..ok.clone() },
        TrainConfig { scheduler_factor: 1.0, ..ok.clone() },
        TrainConfig { lr: -1.0, ..ok.clone() },
        TrainConfig { neg_ratio: 0.0, ..ok.clone() },
        TrainConfig { fanout: Some(0), ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))));
    }
}

#[test]
fn config_json_uses_field_names() {
    let cfg: TrainConfig = serde_json::from_str(r#"{"max_epochs": 3, "lr": 0.01}"#).unwrap();
    assert_eq!((cfg.max_epochs, cfg.lr, cfg.batch_size), (3, 0.01, 128));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.01}"#).is_err());
}

#[test]
fn variants_route_components() {
    let mut seen = Vec::new();
    for v in Variant::ALL {
        let (mut m, mut t) = (ModelConfig::desk(), TrainConfig::default());
        v.apply(&mut m, &mut t);
        seen.push((m.use_rwa, t.use_align, t.use_top1, t.balance));
        assert_eq!(Variant::parse(v.as_str()), Some(v));
    }
    assert_eq!(
        seen,
        [
            (false, false, false, false),
            (false, true, false, false),
            (false, true, true, false),
            (true, true, true, true),
        ]
    );
    assert_eq!(Variant::parse("rwa"), None);
}

#[test]
fn zero_strength_alignment_is_inactive() {
    let mut t = TrainConfig::default();
    Variant::Full.apply(&mut ModelConfig::desk(), &mut t);
    assert_eq!(t.active(), [true, true, true]);
    t.lambda_align = 0.0;
    assert_eq!(t.active(), [true, true, false]);
    let mut b = BalancerState::default();
    let w = b.update([0.7, 0.3, 0.0], t.active()).unwrap();
    assert_eq!(w[2], 0.0);
    assert!((w[0] + w[1] - 2.0).abs() < 1e-12);
}

#[test]
fn batches_partition_supervision_edges() {
    let g = small_graph();
    let t = Trainer::new(&g, model_cfg(), train_cfg(1)).unwrap();
    let n = t.split.train_supervision.len();
    let b0 = t.batches(0);
    assert_eq!(b0.len(), n.div_ceil(32));
    assert!(b0[..b0.len() - 1].iter().all(|b| b.len() == 32));
    let mut flat: Vec<_> = b0.concat();
    flat.sort_unstable();
    let mut expect = t.split.train_supervision.clone();
    expect.sort_unstable();
    assert_eq!(flat, expect);
    assert_eq!(b0, t.batches(0));
    assert_ne!(b0, t.batches(1));
}

#[test]
fn message_and_eval_graphs_hold_training_edges_only() {
    let g = small_graph();
    let t = Trainer::new(&g, model_cfg(), train_cfg(1)).unwrap();
    let md = Relation::MonitorDimension;
    assert_eq!(t.message_graph().num_edges(md), t.split.train_message.len());
    assert_eq!(t.eval_graph().num_edges(md), t.split.train().len());
    for &(m, d) in t.split.train_supervision.iter().chain(&t.split.validation).chain(&t.split.test) {
        assert!(!t.message_graph().has_edge(md, m, d));
    }
    for &(m, d) in t.split.validation.iter().chain(&t.split.test) {
        assert!(!t.eval_graph().has_edge(md, m, d));
    }
    for rel in [Relation::MonitorMetric, Relation::MetricDimension] {
        assert_eq!(t.eval_graph().edges(rel), g.edges(rel));
    }
}

#[test]
fn training_loss_decreases_early() {
    let g = small_graph();
    let cfg = TrainConfig {
        batch_size: 1024,
        lr: 1e-2,
        freeze_paths: true,
        ..train_cfg(3)
    };
    let mut t = Trainer::new(&g, model_cfg(), cfg).unwrap();
    let losses: Vec<f64> = (0..5).map(|_| t.run_epoch().unwrap().train.total).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let g = small_graph();
    let mut t = Trainer::new(&g, model_cfg(), TrainConfig { lr: 0.0, ..train_cfg(2) }).unwrap();
    let before = t.model.params.clone();
    for _ in 0..3 {
        t.run_epoch().unwrap();
    }
    assert_eq!(t.model.params, before);
}

#[test]
fn same_seed_same_history() {
    let g = small_graph();
    let run = |seed| {
        let mut t = Trainer::new(&g, model_cfg(), TrainConfig { max_epochs: 3, ..train_cfg(seed) }).unwrap();
        t.fit().unwrap();
        (t.history, t.model.params)
    };
    let (h1, p1) = run(4);
    let (h2, p2) = run(4);
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    let (h3, _) = run(5);
    assert_ne!(h1, h3);
}

#[test]
fn balanced_training_records_weights() {
    let g = small_graph();
    let mut t = Trainer::new(&g, model_cfg(), TrainConfig { balance: true, ..train_cfg(6) }).unwrap();
    let rec = t.run_epoch().unwrap();
    assert!(t.balancer.ema.is_some());
    let w = rec.validation;
    assert!((w.w_bce + w.w_top1 + w.w_align - 3.0).abs() < 1e-9);
    let expect = w.w_bce * w.bce + w.w_top1 * w.top1max + w.w_align * w.align;
    assert!((w.total - expect).abs() < 1e-12);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let g = small_graph();
    let cfg = TrainConfig { max_epochs: 5, balance: true, ..train_cfg(8) };
    let mut straight = Trainer::new(&g, model_cfg(), cfg.clone()).unwrap();
    straight.fit().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let mut first = Trainer::new(&g, model_cfg(), cfg).unwrap();
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    first.save_checkpoint(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(&g, &path).unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.fit().unwrap();

    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed.model.params, straight.model.params);
    assert_eq!(resumed.best_params, straight.best_params);
    assert_eq!(resumed.adam, straight.adam);
    assert_eq!(resumed.balancer, straight.balancer);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let g = small_graph();
    let mut t = Trainer::new(&g, model_cfg(), train_cfg(9)).unwrap();
    t.run_epoch().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    t.save_checkpoint(&path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let bits = |ts: &[direcgnn_core::Tensor]| ts.iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&ck.params), bits(&t.model.params));
    assert_eq!(bits(&ck.best_params), bits(&t.best_params));
    assert_eq!(ck.adam_m, t.adam.m);
    assert_eq!(ck.adam_v, t.adam.v);
    assert_eq!(ck.manifest.schedule, t.schedule);
    assert_eq!(ck.best_model().unwrap().params, t.best_params);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let g = small_graph();
    let t = Trainer::new(&g, model_cfg(), train_cfg(10)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    t.save_checkpoint(&path).unwrap();
    let blob = std::fs::read(blob_path(&path)).unwrap();

    std::fs::write(blob_path(&path), &blob[..blob.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

    let mut flipped = blob.clone();
    flipped[17] ^= 1;
    std::fs::write(blob_path(&path), &flipped).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(matches!(&err, Error::Checkpoint(m) if m.contains("hash")), "{err}");

    std::fs::write(blob_path(&path), &blob).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"version\": 1", "\"version\": 99")).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

    std::fs::write(&path, &text).unwrap();
    let other = generate_synthetic(&GeneratorConfig { seed: 22, ..small_config() }).unwrap();
    assert!(matches!(Trainer::resume(&other, &path), Err(Error::Checkpoint(_))));
    assert!(Trainer::resume(&g, &path).is_ok());
}

#[test]
fn non_finite_parameters_abort_as_divergence() {
    let g = small_graph();
    let mut t = Trainer::new(&g, model_cfg(), train_cfg(11)).unwrap();
    t.model.params[0].data_mut()[0] = f64::NAN;
    assert!(matches!(t.run_epoch(), Err(Error::Divergence { epoch: 0, .. })));
}

#[test]
fn train_returns_best_validation_model() {
    let g = small_graph();
    let (model, history) = train(&g, model_cfg(), TrainConfig { max_epochs: 3, ..train_cfg(12) }).unwrap();
    assert_eq!(history.len(), 3);
    assert!(history[0].improved);
    let mut t = Trainer::new(&g, model_cfg(), TrainConfig { max_epochs: 3, ..train_cfg(12) }).unwrap();
    t.fit().unwrap();
    assert_eq!(model.params, t.best_params);
    let best = history.iter().map(|r| r.validation.total).fold(f64::INFINITY, f64::min);
    assert_eq!(t.schedule.best, Some(best));
}

#[test]
fn checkpoint_eval_context_matches_trainer() {
    let g = small_graph();
    let t = Trainer::new(&g, model_cfg(), train_cfg(13)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    t.save_checkpoint(&path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let ctx = ck.eval_context(&g).unwrap();
    assert_eq!(ctx.split, t.split);
    assert_eq!(ctx.path_seed, t.eval_path_seed());
    assert_eq!(ctx.eval_graph.edges(Relation::MonitorDimension), t.eval_graph().edges(Relation::MonitorDimension));
    let narrow = generate_synthetic(&GeneratorConfig { d_feat: 4, ..small_config() }).unwrap();
    assert!(matches!(ck.eval_context(&narrow), Err(Error::FeatureWidth { checkpoint: 8, graph: 4 })));
}
