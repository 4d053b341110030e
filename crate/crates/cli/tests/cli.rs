use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_direc-gnn");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("DIRECGNN_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> PathBuf {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1, "stdout: {stdout}");
    PathBuf::from(stdout.trim())
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL_GRAPH: &str = r#"{"monitors": 200, "metrics": 50, "dimensions": 100, "groups": 8, "d_feat": 16}"#;
const SMALL_RUN: &str = r#"{"model": {"layers": 2, "hidden": 16, "out": 8, "heads": 2, "path_lengths": [2, 6], "paths_per_node": 2},
  "train": {"max_epochs": 4, "hops": 2, "fanout": 5, "batch_size": 64}}"#;

fn small_graph(dir: &Path) -> PathBuf {
    let cfg = write(dir, "gen.json", SMALL_GRAPH);
    ok(&["generate", "--config", s(&cfg), "--seed", "3", "--out", s(&dir.join("g"))])
}

#[test]
fn generate_presets_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let g = ok(&["generate", "--preset", "desk", "--out", s(&dir.path().join("d"))]);
    assert_eq!(g, dir.path().join("d/graph.json"));
    let doc = json(&g);
    assert_eq!(doc["meta"]["counts"]["monitor"], 2000);

    let a = small_graph(dir.path());
    let b = ok(&[
        "generate",
        "--config",
        s(&dir.path().join("gen.json")),
        "--seed",
        "3",
        "--out",
        s(&dir.path().join("g2")),
    ]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m = json(&dir.path().join("g/manifest.json"));
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["monitors"], 200);
    assert_eq!(m["outputs"]["graph.json"], json(&dir.path().join("g2/manifest.json"))["outputs"]["graph.json"]);
}

#[test]
fn generate_paper_preset_counts() {
    let dir = tempfile::tempdir().unwrap();
    let g = ok(&["generate", "--preset", "paper", "--out", s(dir.path())]);
    let counts = &json(&g)["meta"]["counts"];
    assert_eq!((&counts["monitor"], &counts["metric"], &counts["dimension"]), (&18291.into(), &4623.into(), &8356.into()));
}

#[test]
fn train_eval_recommend_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = small_graph(d);
    let run_cfg = write(d, "run.json", SMALL_RUN);
    let ck = ok(&["train", "--graph", s(&g), "--config", s(&run_cfg), "--variant", "full", "--out", s(&d.join("t"))]);
    assert_eq!(ck, d.join("t/checkpoint.json"));
    let log = std::fs::read_to_string(d.join("t/train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,bce,top1max,align,w_bce,w_top1,w_al,total,val_total"));
    assert_eq!(lines.count(), 4);
    let manifest = json(&d.join("t/manifest.json"));
    assert_eq!(manifest["config"]["model"]["use_rwa"], true);
    assert_eq!(manifest["config"]["train"]["balance"], true);
    assert!(manifest["inputs"]["graph.json"].is_string());
    assert!(manifest["outputs"]["checkpoint.bin"].is_string());

    let report = ok(&["eval", "--graph", s(&g), "--checkpoint", s(&ck), "--heatmaps", "--out", s(&d.join("e"))]);
    let r = json(&report);
    for k in ["mrr", "ndcg_at_5", "hitrate", "precision", "recall", "buckets", "queries", "candidates"] {
        assert!(r.get(k).is_some(), "{k}");
    }
    let mrr = r["mrr"].as_f64().unwrap();
    assert!(mrr > 0.0 && mrr <= 1.0);
    for rel in ["md", "kd", "mk"] {
        assert!(d.join(format!("e/attention_{rel}.csv")).exists());
    }
    let again = ok(&["eval", "--graph", s(&g), "--checkpoint", s(&ck), "--out", s(&d.join("e2"))]);
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&report).unwrap());

    let pool = ok(&["eval", "--graph", s(&g), "--checkpoint", s(&ck), "--pool", "20", "--out", s(&d.join("ep"))]);
    assert!(json(&pool)["candidates"].as_str().unwrap().contains("20"));

    let recs = ok(&[
        "recommend", "--graph", s(&g), "--checkpoint", s(&ck), "--monitors", "0,1,2", "-k", "3", "--out", s(&d.join("r")),
    ]);
    let text = std::fs::read_to_string(&recs).unwrap();
    for line in text.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        let ranked = rec["ranked"].as_array().unwrap();
        assert!(ranked.len() <= 3);
        let scores: Vec<f64> = ranked.iter().map(|p| p[1].as_f64().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn variants_route_to_components() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = small_graph(d);
    let run_cfg = write(d, "run.json", &SMALL_RUN.replace("\"max_epochs\": 4", "\"max_epochs\": 1"));
    let expect = [
        ("base", false, false, false),
        ("al", false, true, false),
        ("al_rl", false, true, true),
        ("full", true, true, true),
    ];
    for (v, rwa, align, top1) in expect {
        let out = d.join(v);
        ok(&["train", "--graph", s(&g), "--config", s(&run_cfg), "--variant", v, "--out", s(&out)]);
        let m = json(&out.join("manifest.json"));
        assert_eq!(m["config"]["model"]["use_rwa"], rwa, "{v}");
        assert_eq!(m["config"]["train"]["use_align"], align, "{v}");
        assert_eq!(m["config"]["train"]["use_top1"], top1, "{v}");
    }
    assert_eq!(code(&["train", "--graph", s(&g), "--variant", "rwa", "--out", s(&d.join("x"))]), 2);
}

#[test]
fn interrupted_training_resumes_to_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = small_graph(d);
    let full = write(d, "full.json", SMALL_RUN);
    let short = write(d, "short.json", &SMALL_RUN.replace("\"max_epochs\": 4", "\"max_epochs\": 2"));
    let a = ok(&["train", "--graph", s(&g), "--config", s(&full), "--out", s(&d.join("a"))]);
    ok(&["train", "--graph", s(&g), "--config", s(&short), "--out", s(&d.join("b"))]);
    let b = ok(&["train", "--graph", s(&g), "--config", s(&full), "--resume", "--out", s(&d.join("b"))]);
    assert_eq!(std::fs::read(a.with_extension("bin")).unwrap(), std::fs::read(b.with_extension("bin")).unwrap());
    assert_eq!(
        std::fs::read(d.join("a/train_log.csv")).unwrap(),
        std::fs::read(d.join("b/train_log.csv")).unwrap()
    );
    let ra = ok(&["eval", "--graph", s(&g), "--checkpoint", s(&a), "--out", s(&d.join("ea"))]);
    let rb = ok(&["eval", "--graph", s(&g), "--checkpoint", s(&b), "--out", s(&d.join("eb"))]);
    assert_eq!(std::fs::read(ra).unwrap(), std::fs::read(rb).unwrap());

    let other = write(d, "other.json", &SMALL_RUN.replace("\"hidden\": 16", "\"hidden\": 12"));
    assert_eq!(code(&["train", "--graph", s(&g), "--config", s(&other), "--resume", "--out", s(&d.join("b"))]), 2);
}

#[test]
fn untrained_model_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = ok(&["generate", "--preset", "desk", "--out", s(&d.join("g"))]);
    let cfg = write(d, "run.json", r#"{"model": {"layers": 2, "hidden": 16, "out": 16, "heads": 2, "use_rwa": false}, "train": {"max_epochs": 0}}"#);
    let ck = ok(&["train", "--graph", s(&g), "--config", s(&cfg), "--out", s(&d.join("t"))]);
    let r = json(&ok(&["eval", "--graph", s(&g), "--checkpoint", s(&ck), "--out", s(&d.join("e"))]));
    let chance = (1.0 + 0.5 + 1.0 / 3.0) / 3.0;
    let mrr = r["mrr"].as_f64().unwrap();
    assert!((mrr - chance).abs() < 0.05, "{mrr}");
}

#[test]
fn ablate_path_lengths_gives_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = small_graph(d);
    let cfg = write(d, "run.json", &SMALL_RUN.replace("\"max_epochs\": 4", "\"max_epochs\": 1"));
    let sweep = write(d, "sweep.json", r#"{"path_lengths": [[2], [6], [10], [3]], "samples": [5]}"#);
    let table = ok(&["ablate", "--graph", s(&g), "--config", s(&cfg), "--sweep", s(&sweep), "--out", s(&d.join("a"))]);
    let mut rdr = csv::Reader::from_path(&table).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    assert_eq!(rows.len(), 4);
    let ok_rows: Vec<_> = rows.iter().filter(|r| &r[col("status")] == "ok").collect();
    assert_eq!(ok_rows.len(), 3);
    assert_eq!(ok_rows.iter().map(|r| r[col("path_lengths")].to_string()).collect::<Vec<_>>(), ["2", "6", "10"]);
    let skipped = rows.iter().find(|r| &r[col("status")] == "skipped").unwrap();
    assert_eq!(&skipped[col("path_lengths")], "3");
    assert!(!skipped[col("reason")].is_empty());

    let again = ok(&["ablate", "--graph", s(&g), "--config", s(&cfg), "--sweep", s(&sweep), "--out", s(&d.join("b"))]);
    let metrics = |p: &Path| {
        let mut r = csv::Reader::from_path(p).unwrap();
        r.records().map(|x| x.unwrap()[col("mrr")].to_string()).collect::<Vec<_>>()
    };
    assert_eq!(metrics(&table), metrics(&again));
}

#[test]
fn recommend_skips_monitors_without_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = small_graph(d);
    let cfg = write(d, "run.json", &SMALL_RUN.replace("\"max_epochs\": 4", "\"max_epochs\": 0"));
    let ck = ok(&["train", "--graph", s(&g), "--config", s(&cfg), "--out", s(&d.join("t"))]);
    let doc = json(&g);
    // Monitors that emit metrics but already use every closure dimension
    // are reported and skipped.
    let n = doc["meta"]["counts"]["monitor"].as_u64().unwrap() as usize;
    let all: Vec<String> = (0..n).map(|m| m.to_string()).collect();
    let out = run(&["recommend", "--graph", s(&g), "--checkpoint", s(&ck), "--monitors", &all.join(","), "-k", "1000", "--out", s(&d.join("r"))]);
    assert!(out.status.success());
    let recs: Vec<Value> = std::fs::read_to_string(d.join("r/recommendations.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!recs.is_empty());
    let skipped = n - recs.len();
    assert_eq!(String::from_utf8_lossy(&out.stderr).matches("skipping monitor").count(), skipped);
    assert_eq!(code(&["recommend", "--graph", s(&g), "--checkpoint", s(&ck), "--monitors", "100000", "--out", s(&d.join("r"))]), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = write(d, "bad.json", r#"{"bogus": 1}"#);
    assert_eq!(code(&["generate", "--config", s(&bad), "--out", s(&d.join("x"))]), 2);
    let infeasible = write(d, "inf.json", r#"{"monitors": 0}"#);
    assert_eq!(code(&["generate", "--config", s(&infeasible), "--out", s(&d.join("x"))]), 2);
    assert_eq!(code(&["generate", "--preset", "huge", "--out", s(&d.join("x"))]), 2);
    assert_eq!(code(&["train", "--graph", s(&d.join("missing.json")), "--out", s(&d.join("x"))]), 3);
    let garbage = write(d, "garbage.json", "{not json");
    assert_eq!(code(&["train", "--graph", s(&garbage), "--out", s(&d.join("x"))]), 3);

    let g = small_graph(d);
    let cfg = write(d, "run.json", &SMALL_RUN.replace("\"max_epochs\": 4", "\"max_epochs\": 0"));
    let ck = ok(&["train", "--graph", s(&g), "--config", s(&cfg), "--out", s(&d.join("t"))]);
    let narrow = write(d, "narrow.json", &SMALL_GRAPH.replace("\"d_feat\": 16", "\"d_feat\": 8"));
    let g8 = ok(&["generate", "--config", s(&narrow), "--out", s(&d.join("g8"))]);
    assert_eq!(code(&["eval", "--graph", s(&g8), "--checkpoint", s(&ck), "--out", s(&d.join("x"))]), 5);
    assert_eq!(code(&["recommend", "--graph", s(&g8), "--checkpoint", s(&ck), "--monitors", "0", "--out", s(&d.join("x"))]), 5);

    let bad_lr = write(d, "lr.json", r#"{"train": {"lr": -1}}"#);
    assert_eq!(code(&["train", "--graph", s(&g), "--config", s(&bad_lr), "--out", s(&d.join("x"))]), 2);

    let diverge = write(d, "div.json", &SMALL_RUN.replace("\"max_epochs\": 4", "\"max_epochs\": 30, \"lr\": 1e300"));
    let out = run(&["train", "--graph", s(&g), "--config", s(&diverge), "--out", s(&d.join("div"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());

    let threads = Command::new(BIN)
        .args(["generate", "--config", s(&d.join("gen.json")), "--out", s(&d.join("x"))])
        .env("DIRECGNN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
    let threads = Command::new(BIN)
        .args(["generate", "--config", s(&d.join("gen.json")), "--out", s(&d.join("th"))])
        .env("DIRECGNN_THREADS", "3")
        .output()
        .unwrap();
    assert!(threads.status.success());
    assert_eq!(json(&d.join("th/manifest.json"))["threads"], 3);
}
