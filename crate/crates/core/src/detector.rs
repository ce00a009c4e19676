//! Patch-wise element detector heads over a BEV feature raster.
//!
//! Both heads are two-layer MLPs applied independently to every
//! non-overlapping `cell×cell×C` patch, i.e. a stride-`cell` convolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::Mlp;
use crate::autodiff::{Initializer, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    class_masks, distance_transform, rasterize_vertex_labels, BevConfig, DistanceTransformMap,
    ElementClass, MapScene, VertexLabelGrid, DT_MAX,
};
use crate::tensor::Tensor;

/// `(H, W, C)` feature raster.
#[derive(Clone, Debug, PartialEq)]
pub struct BevFeatureRaster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl BevFeatureRaster {
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    /// One row per cell (row-major over cells), each the flattened
    /// `(dy, dx, channel)` patch.
    pub fn patches(&self, cell: usize) -> Result<Tensor> {
        if !self.height.is_multiple_of(cell) || !self.width.is_multiple_of(cell) {
            return Err(Error::shape(
                "patches",
                format!("{}x{} not divisible by {cell}", self.height, self.width),
            ));
        }
        let (rows, cols) = (self.height / cell, self.width / cell);
        let width = cell * cell * self.channels;
        let mut data = Vec::with_capacity(rows * cols * width);
        for r in 0..rows {
            for c in 0..cols {
                for dy in 0..cell {
                    let start = ((r * cell + dy) * self.width + c * cell) * self.channels;
                    data.extend_from_slice(&self.values[start..start + cell * self.channels]);
                }
            }
        }
        Tensor::new(vec![rows * cols, width], data)
    }
}

/// Synthetic stand-in for a learned BEV feature map: channels `0..3` are the
/// per-class element masks smoothed by a 3×3 box filter, the rest seeded
/// Gaussian noise scaled by `noise`.
pub fn render_bev_features(
    scene: &MapScene,
    cfg: &BevConfig,
    channels: usize,
    noise: f64,
    seed: u64,
) -> Result<BevFeatureRaster> {
    if channels < ElementClass::COUNT {
        return Err(Error::Config(format!(
            "feature raster needs at least {} channels",
            ElementClass::COUNT
        )));
    }
    if !(noise >= 0.0) {
        return Err(Error::Config("noise must be non-negative".into()));
    }
    let (h, w) = (cfg.height(), cfg.width());
    let masks = class_masks(scene, cfg);
    let mut values = vec![0.0; h * w * channels];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ElementClass::COUNT {
                let mut acc = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        if masks[(yy * w + xx) * ElementClass::COUNT + c] {
                            acc += 1.0;
                        }
                    }
                }
                values[(y * w + x) * channels + c] = acc / 9.0;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for px in values.chunks_mut(channels) {
        for v in &mut px[ElementClass::COUNT..] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = noise * z;
        }
    }
    Ok(BevFeatureRaster {
        height: h,
        width: w,
        channels,
        values,
    })
}

/// `(H_c, W_c, cell²+1)` logits; the last channel is the dustbin.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexHeatmapLogits {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl VertexHeatmapLogits {
    pub fn from_tensor(t: &Tensor, cfg: &BevConfig) -> Result<Self> {
        let (n, ch) = t.dims2()?;
        if n != cfg.num_cells() || ch != cfg.cell_channels() {
            return Err(Error::shape("vertex_logits", format!("{n}x{ch}")));
        }
        Ok(VertexHeatmapLogits {
            rows: cfg.cell_rows(),
            cols: cfg.cell_cols(),
            channels: ch,
            values: t.data().to_vec(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::raw(vec![self.rows * self.cols, self.channels], self.values.clone())
    }
}

/// Per-cell softmax over all channels, dustbin included.
#[derive(Clone, Debug, PartialEq)]
pub struct CellScores {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub probs: Vec<f64>,
}

impl CellScores {
    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.probs[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Full-resolution `(H, W)` confidence with the dustbin removed.
    pub fn to_raster(&self, cell: usize) -> Vec<f64> {
        let (h, w) = (self.rows * cell, self.cols * cell);
        let mut out = vec![0.0; h * w];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let p = self.cell(r * self.cols + c);
                for dy in 0..cell {
                    for dx in 0..cell {
                        out[(r * cell + dy) * w + c * cell + dx] = p[dy * cell + dx];
                    }
                }
            }
        }
        out
    }
}

pub fn heatmap_to_confidence(logits: &VertexHeatmapLogits) -> CellScores {
    let ch = logits.channels;
    let mut probs = logits.values.clone();
    for cell in probs.chunks_mut(ch) {
        let max = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in cell.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in cell.iter_mut() {
            *v /= z;
        }
    }
    CellScores {
        rows: logits.rows,
        cols: logits.cols,
        channels: ch,
        probs,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub channels: usize,
    pub hidden: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            channels: 8,
            hidden: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub cell: usize,
    pub vertex: Mlp,
    pub dt: Mlp,
}

impl Detector {
    pub fn new(cfg: &DetectorConfig, bev: &BevConfig) -> Self {
        let cell = bev.cell;
        let input = cell * cell * cfg.channels;
        Detector {
            cell,
            vertex: Mlp::new("detector.vertex", input, cfg.hidden, cell * cell + 1),
            dt: Mlp::new("detector.dt", input, cfg.hidden, cell * cell * ElementClass::COUNT),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) -> Result<()> {
        self.vertex.init(store, init)?;
        self.dt.init(store, init)
    }

    /// `(cells, cell²+1)` logits.
    pub fn vertex_head(&self, tape: &mut Tape, store: &ParamStore, patches: Var) -> Result<Var> {
        self.vertex.forward(tape, store, patches)
    }

    /// `(cells, cell²·3)` distances in `[0, 10]`, each row a `(dy, dx, class)` patch.
    pub fn dt_head(&self, tape: &mut Tape, store: &ParamStore, patches: Var) -> Result<Var> {
        let raw = self.dt.forward(tape, store, patches)?;
        let pos = tape.relu(raw)?;
        tape.clamp(pos, 0.0, DT_MAX)
    }
}

/// Reassembles `(cells, cell²·3)` DT head rows into a raster map.
pub fn dt_from_cells(t: &Tensor, cfg: &BevConfig) -> Result<DistanceTransformMap> {
    let cell = cfg.cell;
    let k = ElementClass::COUNT;
    let (n, width) = t.dims2()?;
    if n != cfg.num_cells() || width != cell * cell * k {
        return Err(Error::shape("dt_from_cells", format!("{n}x{width}")));
    }
    let (h, w, cols) = (cfg.height(), cfg.width(), cfg.cell_cols());
    let mut map = DistanceTransformMap::constant(h, w, 0.0);
    let src = t.data();
    for idx in 0..n {
        let (r, c) = (idx / cols, idx % cols);
        for dy in 0..cell {
            let dst = ((r * cell + dy) * w + c * cell) * k;
            let off = idx * width + dy * cell * k;
            map.values[dst..dst + cell * k].copy_from_slice(&src[off..off + cell * k]);
        }
    }
    Ok(map)
}

/// The inverse of [`dt_from_cells`].
pub fn dt_to_cells(map: &DistanceTransformMap, cfg: &BevConfig) -> Tensor {
    let cell = cfg.cell;
    let cols = cfg.cell_cols();
    let mut data = Vec::with_capacity(map.values.len());
    for idx in 0..cfg.num_cells() {
        data.extend(map.patch(idx / cols, idx % cols, cell));
    }
    Tensor::raw(vec![cfg.num_cells(), cell * cell * ElementClass::COUNT], data)
}

/// Head outputs synthesized from ground truth: `±scale` one-hot logits of
/// the label grid, each cell's label redrawn uniformly with probability
/// `flip_prob`, and the GT distance map with clamped Gaussian noise.
pub fn oracle_heads(
    scene: &MapScene,
    cfg: &BevConfig,
    flip_prob: f64,
    dt_noise: f64,
    seed: u64,
) -> Result<(VertexHeatmapLogits, DistanceTransformMap)> {
    if !(0.0..1.0).contains(&flip_prob) && flip_prob != 1.0 {
        return Err(Error::Config(format!("flip_prob {flip_prob} outside [0, 1]")));
    }
    let labels = rasterize_vertex_labels(scene, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = flip_labels(&labels, flip_prob, &mut rng);
    let logits = one_hot_logits(&noisy, cfg, ORACLE_LOGIT);
    let mut dt = distance_transform(scene, cfg);
    if dt_noise > 0.0 {
        for v in &mut dt.values {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (*v + dt_noise * z).clamp(0.0, DT_MAX);
        }
    }
    Ok((logits, dt))
}

pub const ORACLE_LOGIT: f64 = 10.0;

pub fn flip_labels(labels: &VertexLabelGrid, flip_prob: f64, rng: &mut impl Rng) -> VertexLabelGrid {
    let channels = (labels.cell * labels.cell + 1) as u8;
    let mut out = labels.clone();
    for l in &mut out.labels {
        if rng.random::<f64>() < flip_prob {
            *l = rng.random_range(0..channels);
        }
    }
    out
}

pub fn one_hot_logits(labels: &VertexLabelGrid, cfg: &BevConfig, scale: f64) -> VertexHeatmapLogits {
    let ch = cfg.cell_channels();
    let mut values = vec![-scale; labels.labels.len() * ch];
    for (i, &l) in labels.labels.iter().enumerate() {
        values[i * ch + l as usize] = scale;
    }
    VertexHeatmapLogits {
        rows: labels.rows,
        cols: labels.cols,
        channels: ch,
        values,
    }
}
