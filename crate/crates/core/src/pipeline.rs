//! The full model: detector heads, vertex extraction, embedding, matcher
//! and decoding, wired for both training and inference.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckReport, Initializer, ParamStore, Tape, Var};
use crate::config::{DetectorMode, RunConfig};
use crate::decode::{decode, PredictedInstance, ScenePrediction};
use crate::detector::{
    dt_from_cells, dt_to_cells, heatmap_to_confidence, oracle_heads, render_bev_features, Detector, DetectorConfig,
    VertexHeatmapLogits,
};
use crate::error::Result;
use crate::geometry::{
    distance_transform, rasterize_vertices, DistanceTransformMap, ElementClass, GtGraph, MapScene, Polyline,
    VertexLabelGrid,
};
use crate::graph::{extract_vertices, EmbedConfig, Embedder, Vertex, VertexSet};
use crate::losses::{adjacency_loss, class_loss, dt_loss, match_gt, total_loss, vertex_loss, LossTerms, LossValues};
use crate::matcher::{score_matrix, sinkhorn_forward, Matcher};
use crate::tensor::Tensor;

/// FNV-1a, used to derive per-scene seeds from scene ids.
pub fn stable_hash(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// A scene with its model inputs and supervision targets precomputed.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: MapScene,
    /// `(cells, cell²·C)` feature patches.
    pub patches: Tensor,
    pub labels: VertexLabelGrid,
    pub gt: GtGraph,
    pub dt: DistanceTransformMap,
    /// `(cells, cell²·3)` distance targets in head layout.
    pub dt_cells: Tensor,
    pub oracle: Option<(VertexHeatmapLogits, DistanceTransformMap)>,
}

fn render_patches(scene: &MapScene, cfg: &RunConfig, seed: u64) -> Result<Tensor> {
    render_bev_features(scene, &cfg.bev, cfg.features.channels, cfg.features.noise, seed)?.patches(cfg.bev.cell)
}

impl Sample {
    pub fn new(scene: MapScene, cfg: &RunConfig) -> Result<Self> {
        let seed = cfg.seed ^ stable_hash(&scene.id);
        Sample::build(scene, cfg, seed)
    }

    fn build(scene: MapScene, cfg: &RunConfig, seed: u64) -> Result<Self> {
        scene.validate(&cfg.bev)?;
        let (labels, gt) = rasterize_vertices(&scene, &cfg.bev);
        let dt = distance_transform(&scene, &cfg.bev);
        let dt_cells = dt_to_cells(&dt, &cfg.bev);
        let oracle = match cfg.model.detector {
            DetectorMode::Oracle => Some(oracle_heads(
                &scene,
                &cfg.bev,
                cfg.oracle.flip_prob,
                cfg.oracle.dt_noise,
                seed.rotate_left(17),
            )?),
            DetectorMode::Trained => None,
        };
        Ok(Sample {
            patches: render_patches(&scene, cfg, seed)?,
            scene,
            labels,
            gt,
            dt,
            dt_cells,
            oracle,
        })
    }
}

impl Sample {
    /// The sample as seen on training visit `visit`: feature noise redrawn
    /// and, when `flip` is set, the scene mirrored along a seeded choice of axes.
    pub fn revisit(&self, cfg: &RunConfig, visit: u64, flip: bool) -> Result<Sample> {
        let seed = (cfg.seed ^ stable_hash(&self.scene.id)).wrapping_add(visit.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        if flip {
            let axes: u8 = ChaCha8Rng::seed_from_u64(seed.rotate_left(41)).random();
            let scene = self.scene.mirrored(&cfg.bev, axes & 1 == 1, axes & 2 == 2);
            return Sample::build(scene, cfg, seed);
        }
        Ok(Sample {
            patches: render_patches(&self.scene, cfg, seed)?,
            ..self.clone()
        })
    }
}

/// Wall time per inference stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub detector: f64,
    pub extract: f64,
    pub gnn: f64,
    pub sinkhorn: f64,
    pub decode: f64,
}

impl StageTimes {
    pub const NAMES: [&'static str; 5] = ["detector", "extract", "gnn", "sinkhorn", "decode"];

    pub fn as_array(&self) -> [f64; 5] {
        [self.detector, self.extract, self.gnn, self.sinkhorn, self.decode]
    }

    pub fn total(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub vertices: VertexSet,
    /// `(N+1, N+1)`, or `None` when no vertex was extracted.
    pub adjacency: Option<Tensor>,
    pub class_logits: Option<Tensor>,
    pub instances: Vec<PredictedInstance>,
    pub times: StageTimes,
}

/// Per-scene forward state kept for inspection.
#[derive(Clone, Debug)]
pub struct SceneLoss {
    pub total: Var,
    pub terms: LossTerms,
    pub vertices: VertexSet,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub detector: Detector,
    pub embedder: Embedder,
    pub matcher: Matcher,
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let detector = Detector::new(
            &DetectorConfig {
                channels: cfg.features.channels,
                hidden: m.detector_hidden,
            },
            &cfg.bev,
        );
        let embedder = Embedder::new(
            &EmbedConfig {
                dim: m.dim,
                bands: m.bands,
                use_pe: m.use_pe,
                use_dt: m.use_dt,
            },
            &cfg.bev,
        )?;
        Ok(Model {
            cfg: cfg.clone(),
            detector,
            embedder,
            matcher: Matcher::new(&m.matcher())?,
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        self.detector.init(&mut store, &mut init)?;
        self.embedder.init(&mut store, &mut init)?;
        self.matcher.init(&mut store, &mut init)?;
        Ok(store)
    }

    /// Vertex logits and distance cells, plus their losses when trained.
    fn heads(&self, tape: &mut Tape, store: &ParamStore, sample: &Sample) -> Result<(Var, Var, Var, Var)> {
        if let Some((logits, dt)) = &sample.oracle {
            let l = tape.constant(logits.to_tensor());
            let d = tape.constant(dt_to_cells(dt, &self.cfg.bev));
            let zero = tape.constant(Tensor::scalar(0.0));
            return Ok((l, d, zero, zero));
        }
        let patches = tape.constant(sample.patches.clone());
        let logits = self.detector.vertex_head(tape, store, patches)?;
        let dt = self.detector.dt_head(tape, store, patches)?;
        let lv = vertex_loss(tape, logits, &sample.labels)?;
        let le = dt_loss(tape, dt, &sample.dt_cells)?;
        Ok((logits, dt, lv, le))
    }

    fn extract(&self, tape: &Tape, logits: Var, dt: Var) -> Result<VertexSet> {
        let bev = &self.cfg.bev;
        let scores = heatmap_to_confidence(&VertexHeatmapLogits::from_tensor(tape.value(logits), bev)?);
        let dt_map = dt_from_cells(tape.value(dt), bev)?;
        extract_vertices(&scores, &dt_map, bev, self.cfg.model.capacity, self.cfg.model.confidence_threshold)
    }

    /// Graph terms for a fixed vertex set.
    pub fn graph_loss(&self, tape: &mut Tape, store: &ParamStore, vs: &VertexSet, gt: &GtGraph) -> Result<(Var, Var)> {
        if vs.num_valid() == 0 {
            let zero = tape.constant(Tensor::scalar(0.0));
            return Ok((zero, zero));
        }
        let state = self.embedder.embed(tape, store, vs, &self.cfg.bev)?;
        let out = self.matcher.forward(tape, store, &state)?;
        let pairing = match_gt(vs, gt, self.cfg.loss.match_threshold)?;
        let la = adjacency_loss(tape, out.adjacency, &pairing)?;
        let lc = class_loss(tape, out.class_logits, &pairing)?;
        Ok((la, lc))
    }

    pub fn scene_loss(&self, tape: &mut Tape, store: &ParamStore, sample: &Sample) -> Result<SceneLoss> {
        let (logits, dt, lv, le) = self.heads(tape, store, sample)?;
        let vertices = self.extract(tape, logits, dt)?;
        let (la, lc) = self.graph_loss(tape, store, &vertices, &sample.gt)?;
        let terms = LossTerms {
            vertex: lv,
            dt: le,
            adjacency: la,
            class: lc,
        };
        let total = total_loss(tape, &terms, &self.cfg.loss.weights)?;
        Ok(SceneLoss { total, terms, vertices })
    }

    pub fn loss_values(&self, store: &ParamStore, sample: &Sample) -> Result<LossValues> {
        let mut tape = Tape::new();
        let l = self.scene_loss(&mut tape, store, sample)?;
        Ok(l.terms.values(&tape, l.total))
    }

    pub fn predict(&self, store: &ParamStore, sample: &Sample) -> Result<Prediction> {
        let mut times = StageTimes::default();
        let mut tape = Tape::new();
        let t = Instant::now();
        let (logits, dt, _, _) = self.heads(&mut tape, store, sample)?;
        times.detector = secs(t.elapsed());

        let t = Instant::now();
        let vertices = self.extract(&tape, logits, dt)?;
        times.extract = secs(t.elapsed());
        if vertices.num_valid() == 0 {
            return Ok(Prediction {
                vertices,
                adjacency: None,
                class_logits: None,
                instances: Vec::new(),
                times,
            });
        }

        let t = Instant::now();
        let state = self.embedder.embed(&mut tape, store, &vertices, &self.cfg.bev)?;
        let state = self.matcher.message_passing(&mut tape, store, &state)?;
        let (cls, f) = self.matcher.heads(&mut tape, store, &state)?;
        let scores = self.matcher.score_matrix(&mut tape, store, f, &vertices.mask)?;
        times.gnn = secs(t.elapsed());

        let t = Instant::now();
        let (adjacency, _) = sinkhorn_forward(tape.value(scores), &vertices.mask, self.cfg.model.sinkhorn_iters)?;
        times.sinkhorn = secs(t.elapsed());

        let t = Instant::now();
        let class_logits = tape.value(cls).clone();
        let instances = decode(&adjacency, &vertices, &class_logits, self.cfg.decode.adjacency_threshold)?;
        times.decode = secs(t.elapsed());
        Ok(Prediction {
            vertices,
            adjacency: Some(adjacency),
            class_logits: Some(class_logits),
            instances,
            times,
        })
    }

    pub fn predict_scene(&self, store: &ParamStore, sample: &Sample) -> Result<ScenePrediction> {
        let p = self.predict(store, sample)?;
        Ok(ScenePrediction::from_instances(&sample.scene.id, &p.instances, &self.cfg.bev))
    }
}

/// Standalone scoring path used by gradient checks on a fixed vertex set.
pub fn scores_for(tape: &mut Tape, model: &Model, store: &ParamStore, vs: &VertexSet) -> Result<Var> {
    let state = model.embedder.embed(tape, store, vs, &model.cfg.bev)?;
    let state = model.matcher.message_passing(tape, store, &state)?;
    let (_, f) = model.matcher.heads(tape, store, &state)?;
    let alpha = tape.param(&model.matcher.dustbin, store.get(&model.matcher.dustbin)?);
    score_matrix(tape, f, alpha, &vs.mask, model.cfg.model.diag_mode, model.cfg.model.score_mode)
}

/// A four-vertex divider and a vertex set offset from its GT by a pixel or two.
pub fn toy_graph(model: &Model) -> Result<(VertexSet, GtGraph)> {
    let bev = &model.cfg.bev;
    let p = |px: f64| bev.pixel_to_meters(px, 30.0);
    let scene = MapScene {
        id: "toy".into(),
        elements: vec![Polyline::new(ElementClass::Divider, vec![p(20.0), p(43.0)])?],
    };
    let (_, gt) = rasterize_vertices(&scene, bev);
    let dt = distance_transform(&scene, bev);
    let verts: Vec<Vertex> = gt
        .vertices
        .iter()
        .enumerate()
        .map(|(k, v)| Vertex {
            x: v.x + 1 + usize::from(k == 2),
            y: v.y,
            c: 0.9 - 0.1 * k as f64,
        })
        .collect();
    let capacity = model.cfg.model.capacity.min(verts.len() + 2).max(verts.len());
    Ok((VertexSet::from_vertices(&verts, &dt, bev, capacity)?, gt))
}

/// Finite-difference check of the graph terms through embedding, message
/// passing, heads and Sinkhorn, on [`toy_graph`]. The checked loss adds the
/// unit-weighted and the configured-weighted adjacency and class terms.
pub fn graph_gradcheck(model: &Model, store: &ParamStore, step: f64, max_per_param: Option<usize>) -> Result<GradCheckReport> {
    let (vs, gt) = toy_graph(model)?;
    let mut params = ParamStore::new();
    for (name, t) in store.iter() {
        if name.starts_with("embed.") || name.starts_with("gnn.") {
            params.insert(name, t.clone())?;
        }
    }
    let w = &model.cfg.loss.weights;
    grad_check(
        |tape: &mut Tape, p: &ParamStore| {
            let (la, lc) = model.graph_loss(tape, p, &vs, &gt)?;
            let a = tape.scale(la, 1.0 + w.adjacency)?;
            let c = tape.scale(lc, 1.0 + w.class)?;
            tape.add(a, c)
        },
        &params,
        step,
        max_per_param,
    )
}
