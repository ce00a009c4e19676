use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mapgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapgraph")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mapgraph(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err_line(args: &[&str]) -> String {
    let out = mapgraph(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap().lines().last().unwrap_or_default().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn gen_data_splits_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = ok(&["gen-data", "--seed", "3", "--count", "10", "--out", s(&a)]);
    assert!(out.contains("9 train, 1 val"), "{out}");
    ok(&["gen-data", "--seed", "3", "--count", "10", "--out", s(&b)]);
    let fa = sorted_files(&a);
    assert_eq!(fa.len(), 11);
    for (x, y) in fa.iter().zip(sorted_files(&b)) {
        assert_eq!(fs::read(x).unwrap(), fs::read(&y).unwrap(), "{}", x.display());
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"].as_array().unwrap().len(), 9);
    assert_eq!(manifest["val"].as_array().unwrap().len(), 1);
}

#[test]
fn ground_truth_exported_as_predictions_scores_one() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--count", "4", "--out", s(&data)]);
    let preds = tmp.path().join("preds");
    fs::create_dir(&preds).unwrap();
    for f in sorted_files(&data) {
        let name = f.file_name().unwrap().to_str().unwrap().to_string();
        if name == "manifest.json" {
            continue;
        }
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&f).unwrap()).unwrap();
        for e in v["elements"].as_array_mut().unwrap() {
            e["confidence"] = 1.0.into();
        }
        let id = name.trim_end_matches(".json");
        fs::write(preds.join(format!("{id}.pred.json")), v.to_string()).unwrap();
    }
    let report = tmp.path().join("report.json");
    let out = ok(&["eval", "--predictions", s(&preds), "--scenes", s(&data), "--out", s(&report)]);
    assert!(out.contains("mAP 1.0000"), "{out}");
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["map"], 1.0);
    assert_eq!(r["thresholds"], serde_json::json!([0.5, 1.0, 1.5]));

    for f in sorted_files(&preds) {
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&f).unwrap()).unwrap();
        v["elements"] = serde_json::json!([]);
        fs::write(&f, v.to_string()).unwrap();
    }
    let out = ok(&["eval", "--predictions", s(&preds), "--scenes", s(&data)]);
    assert!(out.contains("mAP 0.0000"), "{out}");
}

#[test]
fn eval_rejects_unknown_scene_ids() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--count", "2", "--out", s(&data)]);
    let preds = tmp.path().join("preds");
    fs::create_dir(&preds).unwrap();
    fs::write(preds.join("nope.pred.json"), r#"{"id":"nope","elements":[]}"#).unwrap();
    let line = err_line(&["eval", "--predictions", s(&preds), "--scenes", s(&data)]);
    assert!(line.starts_with("error[data]:"), "{line}");
}

#[test]
fn errors_carry_a_category() {
    let tmp = TempDir::new().unwrap();
    let line = err_line(&["train", "--scenes", s(&tmp.path().join("missing")), "--out", s(tmp.path())]);
    assert!(line.starts_with("error[data]:"), "{line}");
    let line = err_line(&["gen-data", "--ablate", "bogus", "--count", "1", "--out", s(tmp.path())]);
    assert!(line.starts_with("error[config]:"), "{line}");
    let cfg = write_config(tmp.path(), "[bev]\nx_range = [-4.8, 4.8]\ny_range = [-9.3, 9.3]\nresolution = 0.15\n");
    let line = err_line(&["gen-data", "--config", s(&cfg), "--count", "1", "--out", s(tmp.path())]);
    assert!(line.starts_with("error[config]:"), "{line}");
    let cfg = write_config(tmp.path(), "[loss.weights]\nvertex = \"one\"\n");
    let line = err_line(&["gen-data", "--config", s(&cfg), "--count", "1", "--out", s(tmp.path())]);
    assert!(line.starts_with("error[config]:"), "{line}");
    let line = err_line(&["infer", "--checkpoint", s(&tmp.path().join("none.ckpt")), "--scenes", s(tmp.path()), "--out", s(tmp.path())]);
    assert!(line.starts_with("error[io]:"), "{line}");
}

#[test]
fn train_infer_eval_render_round() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--count", "3", "--out", s(&data)]);
    let run = tmp.path().join("run");
    let out = ok(&["train", "--scenes", s(&data), "--out", s(&run), "--steps", "4", "--eval-every", "2"]);
    assert!(out.contains("trained 4 steps"), "{out}");
    let log = fs::read_to_string(run.join("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().nth(1).unwrap().contains("val_map"));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists() && run.join("config.toml").exists());

    let (p1, p2) = (tmp.path().join("p1"), tmp.path().join("p2"));
    ok(&["infer", "--checkpoint", s(&ckpt), "--scenes", s(&data), "--out", s(&p1)]);
    ok(&["infer", "--checkpoint", s(&ckpt), "--scenes", s(&data), "--out", s(&p2)]);
    let files = sorted_files(&p1);
    assert_eq!(files.len(), 3);
    for (a, b) in files.iter().zip(sorted_files(&p2)) {
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }
    let out = ok(&["eval", "--predictions", s(&p1), "--scenes", s(&data), "--split", "train"]);
    assert!(out.lines().any(|l| l.starts_with("mAP ")), "{out}");

    let svg_dir = tmp.path().join("svg");
    ok(&["render", "--predictions", s(&p1), "--out", s(&svg_dir)]);
    assert_eq!(sorted_files(&svg_dir).len(), 3);

    // Shape mismatch between checkpoint and config is a checkpoint error.
    let cfg = write_config(tmp.path(), "[model]\ndim = 32\nheads = 4\n");
    let line = err_line(&["infer", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--scenes", s(&data), "--out", s(&p1)]);
    assert!(line.starts_with("error[checkpoint]:"), "{line}");
}

#[test]
fn empty_scene_gives_empty_prediction() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--count", "2", "--out", s(&data)]);
    let run = tmp.path().join("run");
    ok(&["train", "--scenes", s(&data), "--out", s(&run), "--steps", "1"]);
    let scene = tmp.path().join("empty.json");
    fs::write(&scene, r#"{"id":"empty","elements":[]}"#).unwrap();
    let mut cfg = fs::read_to_string(run.join("config.toml")).unwrap();
    cfg = cfg.replace("detector = \"trained\"", "detector = \"oracle\"");
    let cfg_path = write_config(tmp.path(), &cfg);
    let preds = tmp.path().join("preds");
    ok(&["infer", "--config", s(&cfg_path), "--checkpoint", s(&run.join("model.ckpt")), "--scenes", s(&scene), "--out", s(&preds)]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(preds.join("empty.pred.json")).unwrap()).unwrap();
    assert_eq!(v["elements"], serde_json::json!([]));
}

fn svg_paths(svg: &str) -> Vec<&str> {
    svg.lines().filter(|l| l.trim_start().starts_with("<path")).collect()
}

fn path_coords(line: &str) -> Vec<f64> {
    let d = line.split(" d=\"").nth(1).unwrap().split('"').next().unwrap();
    d.split(|c: char| c == 'M' || c == 'L' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().unwrap())
        .collect()
}

#[test]
fn render_one_divider_scene() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("one.json");
    fs::write(
        &scene,
        r#"{"id":"one","elements":[{"class":"divider","points":[[-4.0,-9.0],[0.5,0.0],[4.0,9.0]]}]}"#,
    )
    .unwrap();
    let out = tmp.path().join("one.svg");
    ok(&["render", "--scenes", s(&scene), "--out", s(&out)]);
    let gt_svg = fs::read_to_string(&out).unwrap();
    let paths = svg_paths(&gt_svg);
    assert_eq!(paths.len(), 1);

    let vb: Vec<f64> = gt_svg.split("viewBox=\"").nth(1).unwrap().split('"').next().unwrap()
        .split(' ').map(|t| t.parse().unwrap()).collect();
    assert_eq!(vb, vec![0.0, 0.0, 128.0, 64.0]);
    let c = path_coords(paths[0]);
    assert_eq!(c.len(), 6);
    for xy in c.chunks(2) {
        assert!((0.0..=vb[2]).contains(&xy[0]) && (0.0..=vb[3]).contains(&xy[1]), "{xy:?}");
    }

    let pred = tmp.path().join("one.pred.json");
    fs::write(
        &pred,
        r#"{"id":"one","elements":[{"class":"divider","points":[[-4.0,-9.0],[0.5,0.0],[4.0,9.0]],"confidence":1.0}]}"#,
    )
    .unwrap();
    let out = tmp.path().join("one_pred.svg");
    ok(&["render", "--predictions", s(&pred), "--out", s(&out)]);
    let pred_svg = fs::read_to_string(&out).unwrap();
    assert_ne!(gt_svg, pred_svg);
    assert_eq!(gt_svg.replace("ground-truth", "LAYER"), pred_svg.replace("prediction", "LAYER"));
}

#[test]
fn bench_reports_all_stages() {
    let tmp = TempDir::new().unwrap();
    let json = tmp.path().join("bench.json");
    let out = ok(&["bench", "--count", "100", "--warmup", "3", "--out", s(&json)]);
    for stage in ["detector", "extract", "gnn", "sinkhorn", "decode"] {
        assert!(out.lines().any(|l| l.starts_with(stage)), "{stage} missing: {out}");
    }
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    let stages = r["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 5);
    let sum: f64 = stages.iter().map(|s| s["mean_ms"].as_f64().unwrap()).sum();
    let wall = r["wall_ms"].as_f64().unwrap();
    assert!((sum - wall).abs() <= 0.1 * wall, "stage sum {sum} vs wall {wall}");
}

#[test]
fn gradcheck_verb_passes() {
    let out = ok(&["gradcheck", "--max-dim", "8", "--probes", "4"]);
    assert!(out.contains("graph loss"), "{out}");
    assert!(out.lines().last().unwrap().starts_with("ok:"), "{out}");
}

#[test]
fn sinkhorn_stage_scales_with_iterations() {
    let tmp = TempDir::new().unwrap();
    let time = |iters: usize| {
        let cfg = tmp.path().join(format!("it{iters}.toml"));
        fs::write(&cfg, format!("[model]\nsinkhorn_iters = {iters}\n")).unwrap();
        let json = tmp.path().join(format!("it{iters}.json"));
        ok(&["bench", "--config", s(&cfg), "--count", "100", "--out", s(&json)]);
        let r: serde_json::Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
        r["stages"].as_array().unwrap().iter().find(|s| s["stage"] == "sinkhorn").unwrap()["mean_ms"].as_f64().unwrap()
    };
    let ratio = time(200) / time(100);
    assert!((1.5..2.6).contains(&ratio), "ratio {ratio}");
}
