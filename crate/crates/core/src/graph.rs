//! Vertex extraction from cell scores and the initial node embedding.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::Mlp;
use crate::autodiff::{Initializer, ParamStore, Tape, Var};
use crate::detector::CellScores;
use crate::error::{Error, Result};
use crate::geometry::{BevConfig, DistanceTransformMap, ElementClass, DT_MAX};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    /// Pixel column (width axis).
    pub x: usize,
    /// Pixel row (height axis).
    pub y: usize,
    pub c: f64,
}

/// Fixed-capacity vertex set. Real vertices occupy the leading slots; the
/// remainder are zero-filled and masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexSet {
    pub vertices: Vec<Vertex>,
    pub mask: Vec<bool>,
    /// `(N, cell²·3)` distance patches, `(dy, dx, class)` per row.
    pub dt_patches: Tensor,
}

impl VertexSet {
    pub fn capacity(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn valid(&self) -> impl Iterator<Item = (usize, &Vertex)> {
        self.vertices
            .iter()
            .enumerate()
            .filter(move |(i, _)| self.mask[*i])
    }

    /// Builds a set from explicit vertices, gathering each vertex's cell
    /// patch from `dt`.
    pub fn from_vertices(
        vertices: &[Vertex],
        dt: &DistanceTransformMap,
        cfg: &BevConfig,
        capacity: usize,
    ) -> Result<Self> {
        if vertices.len() > capacity {
            return Err(Error::Data(format!(
                "{} vertices exceed capacity {capacity}",
                vertices.len()
            )));
        }
        if dt.height != cfg.height() || dt.width != cfg.width() {
            return Err(Error::shape(
                "vertex_set",
                format!("dt map {}x{} vs grid {}x{}", dt.height, dt.width, cfg.height(), cfg.width()),
            ));
        }
        let cell = cfg.cell;
        let width = cell * cell * ElementClass::COUNT;
        let mut slots = vec![Vertex::default(); capacity];
        let mut mask = vec![false; capacity];
        let mut patches = vec![0.0; capacity * width];
        for (i, v) in vertices.iter().enumerate() {
            if v.x >= cfg.width() || v.y >= cfg.height() {
                return Err(Error::Data(format!("vertex ({}, {}) outside grid", v.x, v.y)));
            }
            slots[i] = *v;
            mask[i] = true;
            patches[i * width..(i + 1) * width].copy_from_slice(&dt.patch(v.y / cell, v.x / cell, cell));
        }
        Ok(VertexSet {
            vertices: slots,
            mask,
            dt_patches: Tensor::raw(vec![capacity, width], patches),
        })
    }
}

/// Takes each cell's best non-dustbin position when it beats the dustbin and
/// clears `threshold`, then keeps the `capacity` most confident cells.
pub fn extract_vertices(
    scores: &CellScores,
    dt: &DistanceTransformMap,
    cfg: &BevConfig,
    capacity: usize,
    threshold: f64,
) -> Result<VertexSet> {
    let cell = cfg.cell;
    if scores.rows != cfg.cell_rows() || scores.cols != cfg.cell_cols() || scores.channels != cfg.cell_channels() {
        return Err(Error::shape(
            "extract_vertices",
            format!("scores {}x{}x{}", scores.rows, scores.cols, scores.channels),
        ));
    }
    let dustbin = cell * cell;
    let mut found = Vec::new();
    for idx in 0..scores.rows * scores.cols {
        let p = scores.cell(idx);
        let (best, &c) = p
            .iter()
            .enumerate()
            .fold((dustbin, &p[dustbin]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        if best == dustbin || c < threshold {
            continue;
        }
        let (r, col) = (idx / scores.cols, idx % scores.cols);
        found.push(Vertex {
            x: col * cell + best % cell,
            y: r * cell + best / cell,
            c,
        });
    }
    // Stable sort keeps row-major order among equal confidences.
    found.sort_by(|a, b| b.c.total_cmp(&a.c));
    found.truncate(capacity);
    VertexSet::from_vertices(&found, dt, cfg, capacity)
}

/// Pixel centers mapped into the open interval `(-1, 1)` per axis.
pub fn normalize_pixel(x: usize, y: usize, cfg: &BevConfig) -> (f64, f64) {
    (
        2.0 * (x as f64 + 0.5) / cfg.width() as f64 - 1.0,
        2.0 * (y as f64 + 0.5) / cfg.height() as f64 - 1.0,
    )
}

/// `[sin(2^k π a), cos(2^k π a)]` for `a` in `(x, y)` and `k < bands`.
pub fn positional_encoding(ax: f64, ay: f64, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * bands);
    for a in [ax, ay] {
        let mut f = PI;
        for _ in 0..bands {
            out.push((f * a).sin());
            out.push((f * a).cos());
            f *= 2.0;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    pub dim: usize,
    pub bands: usize,
    pub use_pe: bool,
    pub use_dt: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: 64,
            bands: 10,
            use_pe: true,
            use_dt: true,
        }
    }
}

/// Node embeddings: `(N, D)` values plus the validity mask.
#[derive(Clone, Debug)]
pub struct GraphState {
    pub embeddings: Var,
    pub mask: Vec<bool>,
    pub layer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    pub cfg: EmbedConfig,
    pub mlp_v: Mlp,
    pub mlp_e: Mlp,
}

impl Embedder {
    pub fn new(cfg: &EmbedConfig, bev: &BevConfig) -> Result<Self> {
        if !cfg.use_pe && !cfg.use_dt {
            return Err(Error::Config("embedding needs positions or distance patches".into()));
        }
        if cfg.dim == 0 || cfg.bands == 0 {
            return Err(Error::Config("embedding dim and bands must be positive".into()));
        }
        let d = cfg.dim;
        let patch = bev.cell * bev.cell * ElementClass::COUNT;
        Ok(Embedder {
            cfg: cfg.clone(),
            mlp_v: Mlp::new("embed.vertex", 4 * cfg.bands, d, d),
            mlp_e: Mlp::new("embed.dt", patch, d, d),
        })
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) -> Result<()> {
        self.mlp_v.init(store, init)?;
        self.mlp_e.init(store, init)
    }

    pub fn encodings(&self, vs: &VertexSet, bev: &BevConfig) -> Tensor {
        let n = vs.capacity();
        let width = 4 * self.cfg.bands;
        let mut data = vec![0.0; n * width];
        for (i, v) in vs.valid() {
            let (ax, ay) = normalize_pixel(v.x, v.y, bev);
            data[i * width..(i + 1) * width].copy_from_slice(&positional_encoding(ax, ay, self.cfg.bands));
        }
        Tensor::raw(vec![n, width], data)
    }

    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, vs: &VertexSet, bev: &BevConfig) -> Result<GraphState> {
        let mut parts = Vec::new();
        if self.cfg.use_pe {
            let pe = tape.constant(self.encodings(vs, bev));
            parts.push(self.mlp_v.forward(tape, store, pe)?);
        }
        if self.cfg.use_dt {
            let patches = tape.constant(vs.dt_patches.map(|v| v / DT_MAX));
            parts.push(self.mlp_e.forward(tape, store, patches)?);
        }
        let mut g = parts[0];
        for &p in &parts[1..] {
            g = tape.add(g, p)?;
        }
        let g = tape.mul_const(g, &row_mask(&vs.mask, self.cfg.dim))?;
        Ok(GraphState {
            embeddings: g,
            mask: vs.mask.clone(),
            layer: 0,
        })
    }
}

/// `(N, width)` tensor of ones on valid rows and zeros elsewhere.
pub fn row_mask(mask: &[bool], width: usize) -> Tensor {
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, width))
        .collect();
    Tensor::raw(vec![mask.len(), width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{heatmap_to_confidence, oracle_heads};
    use crate::geometry::{rasterize_vertex_labels, synth_scene, GenParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn scores_with(cfg: &BevConfig, cells: &[(usize, usize, f64)]) -> CellScores {
        let n = cfg.num_cells();
        let mut probs = vec![0.0; n * 65];
        for i in 0..n {
            probs[i * 65 + 64] = 1.0;
        }
        for &(idx, ch, p) in cells {
            probs[idx * 65 + 64] = 1.0 - p;
            probs[idx * 65 + ch] = p;
        }
        CellScores {
            rows: cfg.cell_rows(),
            cols: cfg.cell_cols(),
            channels: 65,
            probs,
        }
    }

    fn dt(cfg: &BevConfig) -> DistanceTransformMap {
        DistanceTransformMap::constant(cfg.height(), cfg.width(), 10.0)
    }

    #[test]
    fn single_cell_encoding() {
        let cfg = BevConfig::desk_scale();
        let idx = cfg.cell_cols() + 1;
        let vs = extract_vertices(&scores_with(&cfg, &[(idx, 12, 0.9)]), &dt(&cfg), &cfg, 64, 0.01).unwrap();
        assert_eq!(vs.num_valid(), 1);
        assert_eq!(vs.vertices[0], Vertex { x: 12, y: 9, c: 0.9 });
    }

    #[test]
    fn all_dustbin_is_empty() {
        let cfg = BevConfig::desk_scale();
        let vs = extract_vertices(&scores_with(&cfg, &[]), &dt(&cfg), &cfg, 64, 0.01).unwrap();
        assert_eq!(vs.num_valid(), 0);
        assert!(vs.vertices.iter().all(|v| *v == Vertex::default()));
        assert!(vs.dt_patches.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn top_n_matches_sort_oracle() {
        let cfg = BevConfig::full_scale();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cells: Vec<usize> = (0..cfg.num_cells()).collect();
        for i in (1..cells.len()).rev() {
            cells.swap(i, rng.random_range(0..=i));
        }
        let picks: Vec<(usize, usize, f64)> = cells[..500]
            .iter()
            .map(|&c| (c, rng.random_range(0..64), rng.random_range(0.55..1.0)))
            .collect();
        let vs = extract_vertices(&scores_with(&cfg, &picks), &dt(&cfg), &cfg, 400, 0.01).unwrap();
        assert_eq!(vs.num_valid(), 400);
        let mut confs: Vec<f64> = picks.iter().map(|p| p.2).collect();
        confs.sort_by(|a, b| b.total_cmp(a));
        let mut got: Vec<f64> = vs.valid().map(|(_, v)| v.c).collect();
        got.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(got, confs[..400].to_vec());
    }

    #[test]
    fn ties_prefer_row_major_cells() {
        let cfg = BevConfig::desk_scale();
        let picks = [(5, 0, 0.7), (2, 0, 0.7), (9, 0, 0.7)];
        let vs = extract_vertices(&scores_with(&cfg, &picks), &dt(&cfg), &cfg, 2, 0.01).unwrap();
        let xs: Vec<usize> = vs.valid().map(|(_, v)| v.x / 8).collect();
        assert_eq!(xs, vec![2, 5]);
    }

    #[test]
    fn threshold_and_dustbin_reject() {
        let cfg = BevConfig::desk_scale();
        // 0.3 loses to a 0.7 dustbin; 0.005 is below threshold even though it would win.
        let mut s = scores_with(&cfg, &[(0, 3, 0.3)]);
        let i = 1;
        s.probs[i * 65 + 64] = 0.004;
        s.probs[i * 65 + 7] = 0.005;
        let vs = extract_vertices(&s, &dt(&cfg), &cfg, 64, 0.01).unwrap();
        assert_eq!(vs.num_valid(), 0);
    }

    #[test]
    fn oracle_extraction_recovers_gt_vertices() {
        let cfg = BevConfig::desk_scale();
        for seed in 0..20 {
            let scene = synth_scene(seed, &GenParams::desk_scale(), &cfg).unwrap();
            let (logits, dtm) = oracle_heads(&scene, &cfg, 0.0, 0.0, seed).unwrap();
            let vs = extract_vertices(&heatmap_to_confidence(&logits), &dtm, &cfg, 64, 0.01).unwrap();
            let got: HashSet<(usize, usize)> = vs.valid().map(|(_, v)| (v.x, v.y)).collect();
            let want: HashSet<(usize, usize)> = rasterize_vertex_labels(&scene, &cfg).decode().into_iter().collect();
            assert_eq!(got, want);
            let cells: HashSet<(usize, usize)> = vs.valid().map(|(_, v)| (v.x / 8, v.y / 8)).collect();
            assert_eq!(cells.len(), vs.num_valid());
        }
    }

    #[test]
    fn dt_patch_comes_from_vertex_cell() {
        let cfg = BevConfig::desk_scale();
        let mut m = dt(&cfg);
        for (i, v) in m.values.iter_mut().enumerate() {
            *v = i as f64;
        }
        let vs = VertexSet::from_vertices(&[Vertex { x: 20, y: 11, c: 1.0 }], &m, &cfg, 4).unwrap();
        let row = &vs.dt_patches.data()[..192];
        assert_eq!(row[0], m.at(8, 16, 0));
        assert_eq!(row[191], m.at(15, 23, 2));
    }

    #[test]
    fn pe_origin_and_bounds() {
        let e = positional_encoding(0.0, 0.0, 10);
        assert_eq!(e.len(), 40);
        for k in 0..20 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
        let cfg = BevConfig::full_scale();
        for &(x, y) in &[(0, 0), (cfg.width() - 1, cfg.height() - 1)] {
            let (ax, ay) = normalize_pixel(x, y, &cfg);
            assert!(ax > -1.0 && ax < 1.0 && ay > -1.0 && ay < 1.0);
            assert!(positional_encoding(ax, ay, 10).iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }

    #[test]
    fn pe_injective_on_grid() {
        for cfg in [BevConfig::desk_scale(), BevConfig::full_scale()] {
            let mut seen = HashSet::new();
            for y in 0..cfg.height() {
                for x in 0..cfg.width() {
                    let (ax, ay) = normalize_pixel(x, y, &cfg);
                    let key: Vec<i64> = positional_encoding(ax, ay, 10)
                        .iter()
                        .map(|v| (v * 1e6).round() as i64)
                        .collect();
                    assert!(seen.insert(key), "collision at ({x}, {y})");
                }
            }
        }
    }

    fn toy_set(cfg: &BevConfig) -> VertexSet {
        let scene = synth_scene(2, &GenParams::desk_scale(), cfg).unwrap();
        let (_, dtm) = oracle_heads(&scene, cfg, 0.0, 0.0, 0).unwrap();
        let vs = [
            Vertex { x: 3, y: 4, c: 0.9 },
            Vertex { x: 40, y: 30, c: 0.5 },
            Vertex { x: 100, y: 60, c: 0.2 },
        ];
        VertexSet::from_vertices(&vs, &dtm, cfg, 6).unwrap()
    }

    #[test]
    fn masked_rows_are_zero_and_zero_weights_zero_output() {
        let cfg = BevConfig::desk_scale();
        let vs = toy_set(&cfg);
        let emb = Embedder::new(&EmbedConfig { dim: 8, ..Default::default() }, &cfg).unwrap();
        let mut store = ParamStore::new();
        emb.init(&mut store, &mut Initializer::new(1)).unwrap();
        let mut tape = Tape::new();
        let g = emb.embed(&mut tape, &store, &vs, &cfg).unwrap();
        let v = tape.value(g.embeddings);
        assert!(v.data()[3 * 8..].iter().all(|&x| x == 0.0));
        assert!(v.data()[..3 * 8].iter().any(|&x| x != 0.0));

        let names: Vec<String> = store.names().map(str::to_owned).collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let g = emb.embed(&mut tape, &store, &vs, &cfg).unwrap();
        assert!(tape.value(g.embeddings).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn disabling_dt_branch_ignores_patches() {
        let cfg = BevConfig::desk_scale();
        let mut vs = toy_set(&cfg);
        let emb = Embedder::new(&EmbedConfig { dim: 8, use_dt: false, ..Default::default() }, &cfg).unwrap();
        let mut store = ParamStore::new();
        emb.init(&mut store, &mut Initializer::new(1)).unwrap();
        let run = |vs: &VertexSet| {
            let mut tape = Tape::new();
            let g = emb.embed(&mut tape, &store, vs, &cfg).unwrap();
            tape.value(g.embeddings).clone()
        };
        let a = run(&vs);
        vs.dt_patches.data_mut().fill(7.0);
        assert_eq!(a, run(&vs));
        assert!(Embedder::new(&EmbedConfig { use_pe: false, use_dt: false, ..Default::default() }, &cfg).is_err());
    }
}
