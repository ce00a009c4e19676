//! Verb implementations behind the `mapgraph` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mapgraph_core::autodiff::{op_suite, ParamStore};
use mapgraph_core::config::RunConfig;
use mapgraph_core::decode::ScenePrediction;
use mapgraph_core::eval::{instance_ap, ApReport};
use mapgraph_core::geometry::MapScene;
use mapgraph_core::io::{self, LogWriter};
use mapgraph_core::pipeline::{graph_gradcheck, Model, Sample, StageTimes};
use mapgraph_core::render::{render_prediction, render_scene};
use mapgraph_core::train::{evaluate, train};
use mapgraph_core::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train.jsonl";

#[derive(Parser, Debug)]
#[command(name = "mapgraph", version, about = "Vectorized BEV map elements from vertex detection and graph matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with a train/val manifest.
    GenData(GenDataArgs),
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Predict polylines for scenes with a trained checkpoint.
    Infer(InferArgs),
    /// Score prediction files against ground-truth scenes.
    Eval(EvalArgs),
    /// Draw a scene or prediction file as SVG.
    Render(RenderArgs),
    /// Time each inference stage.
    Bench(BenchArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 64×128 grid, 64 vertex slots.
    Desk,
    /// 200×400 grid, 400 vertex slots.
    Full,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML run config; defaults to the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in config used when no --config is given.
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model switch to apply (repeatable): no-pe, no-dt, diag-zero, cosine, oracle, no-graph-loss.
    #[arg(long = "ablate")]
    pub ablate: Vec<String>,
}

impl ConfigArgs {
    /// Resolves the run config; `fallback` is read when no --config is given.
    pub fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(p)) if p.exists() => RunConfig::load(p)?,
            (None, _) => match self.preset {
                Preset::Desk => RunConfig::default(),
                Preset::Full => RunConfig::full_scale(),
            },
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        for a in &self.ablate {
            cfg.apply_ablation(a)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset directory; defaults to `train.dataset` from the config.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Run directory for the checkpoint, config snapshot and log.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `train.eval_every`.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Continue from this checkpoint instead of a fresh init.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Checkpoint file; a `config.toml` beside it is used when --config is absent.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or a single scene file.
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Directory of `*.pred.json` files.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Dataset directory or a single scene file.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Restrict a dataset to one manifest split.
    #[arg(long, value_enum)]
    pub split: Option<Split>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Scene file or dataset directory.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub scenes: Option<PathBuf>,
    /// Prediction file or directory of prediction files.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// SVG file for a single input, otherwise a directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Trained weights; a fresh init is timed when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Timed scenes.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Untimed scenes run first.
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Largest tensor dimension in the per-op cases.
    #[arg(long, default_value_t = 32)]
    pub max_dim: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Entries probed per parameter tensor.
    #[arg(long, default_value_t = 16)]
    pub probes: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => infer(&a),
        Command::Eval(a) => eval(&a).map(|_| ()),
        Command::Render(a) => render(&a),
        Command::Bench(a) => bench(&a).map(|_| ()),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let m = io::write_dataset(&cfg, a.count, &a.out)?;
    println!("wrote {} scenes to {} ({} train, {} val)", a.count, a.out.display(), m.train.len(), m.val.len());
    Ok(())
}

fn samples(scenes: &[MapScene], cfg: &RunConfig) -> Result<Vec<Sample>> {
    scenes.iter().map(|s| Sample::new(s.clone(), cfg)).collect()
}

/// Loads a checkpoint and checks it against the parameters `model` expects.
pub fn load_checkpoint(model: &Model, path: &Path) -> Result<ParamStore> {
    let store = ParamStore::load(path)?;
    model.init_params(0)?.check_compatible(&store)?;
    Ok(store)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve(None)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(e) = a.eval_every {
        cfg.train.eval_every = e;
    }
    let dir = a
        .scenes
        .clone()
        .or_else(|| cfg.train.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --scenes or set train.dataset".into()))?;
    let data = io::load_dataset(&dir, &cfg)?;
    if data.train.is_empty() {
        return Err(Error::Data(format!("{} has no training scenes", dir.display())));
    }
    let tr = samples(&data.train, &cfg)?;
    let va = samples(&data.val, &cfg)?;
    let model = Model::new(&cfg)?;
    let mut store = match &a.checkpoint {
        Some(p) => load_checkpoint(&model, p)?,
        None => model.init_params(cfg.seed)?,
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_text(&a.out.join(CONFIG_FILE), &cfg.to_toml())?;
    let mut log = LogWriter::create(&a.out.join(LOG_FILE))?;
    let mut log_err = None;
    let every = (cfg.train.steps / 20).max(1);
    let t = Instant::now();
    let result = train(&model, &mut store, &tr, &va, |e| {
        if log_err.is_none() {
            log_err = log.write(e).err();
        }
        if e.step % every == 0 || e.val_map.is_some() {
            let val = e.val_map.map(|m| format!(" val_map {m:.3}")).unwrap_or_default();
            eprintln!(
                "step {:6} total {:.4} vertex {:.4} dt {:.4} adjacency {:.3} class {:.4} vertices {}{val}",
                e.step, e.total, e.vertex, e.dt, e.adjacency, e.class, e.vertices
            );
        }
    });
    if let Err(e) = result {
        return Err(match e {
            Error::NonFinite { op } => Error::Numeric(format!("non-finite {op} during training; aborted without a checkpoint")),
            other => other,
        });
    }
    if let Some(e) = log_err {
        return Err(e);
    }
    let ckpt = a.out.join(CHECKPOINT_FILE);
    store.save(&ckpt)?;
    let train_map = evaluate(&model, &store, &tr)?.map;
    let val = if va.is_empty() { String::new() } else { format!(" val_map {:.4}", evaluate(&model, &store, &va)?.map) };
    println!(
        "trained {} steps in {:.1}s: train_map {train_map:.4}{val}; checkpoint {}",
        cfg.train.steps,
        t.elapsed().as_secs_f64(),
        ckpt.display()
    );
    Ok(())
}

fn sibling_config(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE)
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let cfg = a.cfg.resolve(Some(&sibling_config(&a.checkpoint)))?;
    let model = Model::new(&cfg)?;
    let store = load_checkpoint(&model, &a.checkpoint)?;
    let scenes = io::load_scenes(&a.scenes, &cfg)?;
    let preds = scenes
        .into_iter()
        .map(|s| model.predict_scene(&store, &Sample::new(s, &cfg)?))
        .collect::<Result<Vec<_>>>()?;
    let paths = io::write_predictions(&a.out, &preds)?;
    let instances: usize = preds.iter().map(|p| p.elements.len()).sum();
    println!("wrote {} prediction files ({instances} instances) to {}", paths.len(), a.out.display());
    Ok(())
}

/// The report as aligned text, one line per class plus the mAP line.
pub fn format_report(r: &ApReport) -> String {
    let mut out = String::new();
    let ths: Vec<String> = r.thresholds.iter().map(|t| format!("ap@{t}")).collect();
    out.push_str(&format!("{:<14} {:>5} {:>5} {} {:>7}\n", "class", "gt", "pred", ths.iter().map(|t| format!("{t:>7}")).collect::<Vec<_>>().join(" "), "ap"));
    for c in &r.classes {
        let per: Vec<String> = c.per_threshold.iter().map(|v| format!("{v:>7.4}")).collect();
        out.push_str(&format!("{:<14} {:>5} {:>5} {} {:>7.4}\n", c.class.name(), c.num_gt, c.num_pred, per.join(" "), c.ap));
    }
    out.push_str(&format!("mAP {:.4}\n", r.map));
    out
}

pub fn eval(a: &EvalArgs) -> Result<ApReport> {
    let cfg = a.cfg.resolve(None)?;
    let mut preds = if a.predictions.is_dir() {
        io::load_predictions(&a.predictions)?
    } else {
        vec![io::load_prediction(&a.predictions)?]
    };
    let scenes = match (a.split, a.scenes.is_dir()) {
        (Some(split), true) => {
            let d = io::load_dataset(&a.scenes, &cfg)?;
            let (kept, other) = match split {
                Split::Train => (d.train, d.val),
                Split::Val => (d.val, d.train),
            };
            // predictions for the other split are dropped, unknown ids still fail
            preds.retain(|p| !other.iter().any(|s| s.id == p.id));
            kept
        }
        (Some(_), false) => return Err(Error::Config("--split needs a dataset directory".into())),
        (None, _) => io::load_scenes(&a.scenes, &cfg)?,
    };
    let report = instance_ap(&preds, &scenes, &cfg.eval)?;
    print!("{}", format_report(&report));
    if let Some(p) = &a.out {
        io::write_json(p, &report)?;
    }
    Ok(report)
}

fn render_targets(out: &Path, ids: &[String]) -> Result<Vec<PathBuf>> {
    let single = ids.len() == 1 && out.extension().is_some_and(|e| e == "svg");
    if single {
        return Ok(vec![out.to_path_buf()]);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(ids.iter().map(|id| out.join(format!("{id}.svg"))).collect())
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let docs: Vec<(String, String)> = match (&a.scenes, &a.predictions) {
        (Some(s), _) => io::load_scenes(s, &cfg)?.iter().map(|s| (s.id.clone(), render_scene(s, &cfg.bev))).collect(),
        (None, Some(p)) => {
            let preds: Vec<ScenePrediction> =
                if p.is_dir() { io::load_predictions(p)? } else { vec![io::load_prediction(p)?] };
            preds.iter().map(|p| (p.id.clone(), render_prediction(p, &cfg.bev))).collect()
        }
        (None, None) => return Err(Error::Config("pass --scenes or --predictions".into())),
    };
    let ids: Vec<String> = docs.iter().map(|d| d.0.clone()).collect();
    let targets = render_targets(&a.out, &ids)?;
    for ((_, svg), path) in docs.iter().zip(&targets) {
        write_text(path, svg)?;
    }
    println!("wrote {} SVG file(s)", targets.len());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageStat {
    pub stage: String,
    pub mean_ms: f64,
    pub std_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub scenes: usize,
    pub warmup: usize,
    pub stages: Vec<StageStat>,
    /// Mean of the per-scene stage sums.
    pub stage_sum_ms: f64,
    /// Mean end-to-end wall time per scene, feature rendering excluded.
    pub wall_ms: f64,
    pub mean_vertices: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

pub fn bench(a: &BenchArgs) -> Result<BenchReport> {
    if a.count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let fallback = a.checkpoint.as_deref().map(sibling_config);
    let cfg = a.cfg.resolve(fallback.as_deref())?;
    let model = Model::new(&cfg)?;
    let store = match &a.checkpoint {
        Some(p) => load_checkpoint(&model, p)?,
        None => model.init_params(cfg.seed)?,
    };
    let scenes = io::generate_scenes(&cfg, a.warmup + a.count)?;
    let mut per_stage = vec![Vec::with_capacity(a.count); StageTimes::NAMES.len()];
    let mut sums = Vec::with_capacity(a.count);
    let mut walls = Vec::with_capacity(a.count);
    let mut vertices = 0usize;
    for (k, scene) in scenes.into_iter().enumerate() {
        let sample = Sample::new(scene, &cfg)?;
        let t = Instant::now();
        let p = model.predict(&store, &sample)?;
        let wall = t.elapsed().as_secs_f64();
        if k < a.warmup {
            continue;
        }
        for (acc, v) in per_stage.iter_mut().zip(p.times.as_array()) {
            acc.push(v * 1e3);
        }
        sums.push(p.times.total() * 1e3);
        walls.push(wall * 1e3);
        vertices += p.vertices.num_valid();
    }
    let stages = StageTimes::NAMES
        .iter()
        .zip(&per_stage)
        .map(|(name, xs)| {
            let (mean_ms, std_ms) = mean_std(xs);
            StageStat { stage: name.to_string(), mean_ms, std_ms }
        })
        .collect();
    let report = BenchReport {
        scenes: a.count,
        warmup: a.warmup,
        stages,
        stage_sum_ms: mean_std(&sums).0,
        wall_ms: mean_std(&walls).0,
        mean_vertices: vertices as f64 / a.count as f64,
    };
    println!("{:<10} {:>10} {:>10}", "stage", "mean_ms", "std_ms");
    for s in &report.stages {
        println!("{:<10} {:>10.3} {:>10.3}", s.stage, s.mean_ms, s.std_ms);
    }
    println!("{:<10} {:>10.3}", "sum", report.stage_sum_ms);
    println!("{:<10} {:>10.3}", "wall", report.wall_ms);
    println!("scenes {} warmup {} mean_vertices {:.1}", report.scenes, report.warmup, report.mean_vertices);
    if let Some(p) = &a.out {
        io::write_json(p, &report)?;
    }
    Ok(report)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let mut worst: f64 = 0.0;
    for case in op_suite(cfg.seed, a.max_dim, a.step, Some(a.probes))? {
        println!(
            "op {:<14} shape {:<12} max_rel_error {:.3e}",
            case.name,
            format!("{:?}", case.shape),
            case.report.max_rel_error
        );
        worst = worst.max(case.report.max_rel_error);
    }
    let model = Model::new(&cfg)?;
    let store = model.init_params(cfg.seed)?;
    let full = graph_gradcheck(&model, &store, a.step, Some(a.probes))?;
    println!(
        "graph loss ({} entries) max_rel_error {:.3e} at {}[{}]",
        full.checked, full.max_rel_error, full.worst_param, full.worst_index
    );
    worst = worst.max(full.max_rel_error);
    if worst > a.tolerance {
        return Err(Error::Numeric(format!("gradient error {worst:.3e} exceeds tolerance {:.1e}", a.tolerance)));
    }
    println!("ok: max_rel_error {worst:.3e} <= {:.1e}", a.tolerance);
    Ok(())
}
