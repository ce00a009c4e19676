//! Ground-truth rasterization: per-cell vertex labels and element masks.

use crate::geometry::scene::{BevConfig, ElementClass, MapScene, Polyline};

/// A polyline sample in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub pixel: [f64; 2],
    /// Arc length from the first point, in pixels.
    pub arc: f64,
}

/// Samples a polyline at uniform spacing of at most one pixel per segment,
/// including both endpoints.
pub fn resample_pixels(poly: &Polyline, cfg: &BevConfig) -> Vec<Sample> {
    let pts: Vec<[f64; 2]> = poly.points.iter().map(|&p| cfg.to_pixel(p)).collect();
    let mut out = Vec::new();
    let mut arc = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let steps = len.ceil().max(1.0) as usize;
        for k in 0..steps {
            let t = k as f64 / steps as f64;
            out.push(Sample {
                pixel: [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])],
                arc: arc + t * len,
            });
        }
        arc += len;
    }
    if let Some(&last) = pts.last() {
        out.push(Sample { pixel: last, arc });
    }
    out
}

/// Per-cell label in `0..=cell²`; `cell²` is the "no vertex" dustbin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VertexLabelGrid {
    pub rows: usize,
    pub cols: usize,
    pub cell: usize,
    pub labels: Vec<u8>,
}

impl VertexLabelGrid {
    pub fn empty(cfg: &BevConfig) -> Self {
        let dustbin = (cfg.cell * cfg.cell) as u8;
        VertexLabelGrid {
            rows: cfg.cell_rows(),
            cols: cfg.cell_cols(),
            cell: cfg.cell,
            labels: vec![dustbin; cfg.num_cells()],
        }
    }

    pub fn dustbin(&self) -> u8 {
        (self.cell * self.cell) as u8
    }

    pub fn label(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.cols + col]
    }

    /// Pixel `(x, y)` of the vertex in every non-dustbin cell, row-major.
    pub fn decode(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l != self.dustbin() {
                let (row, col) = (i / self.cols, i % self.cols);
                let (dy, dx) = (l as usize / self.cell, l as usize % self.cell);
                out.push((col * self.cell + dx, row * self.cell + dy));
            }
        }
        out
    }

    /// Encodes pixel positions; the first position seen in a cell wins.
    pub fn encode(cfg: &BevConfig, pixels: &[(usize, usize)]) -> Self {
        let mut grid = Self::empty(cfg);
        let dustbin = grid.dustbin();
        for &(x, y) in pixels {
            let idx = (y / cfg.cell) * grid.cols + x / cfg.cell;
            if grid.labels[idx] == dustbin {
                grid.labels[idx] = ((y % cfg.cell) * cfg.cell + x % cfg.cell) as u8;
            }
        }
        grid
    }

    pub fn active_cells(&self) -> usize {
        self.labels.iter().filter(|&&l| l != self.dustbin()).count()
    }
}

/// A kept ground-truth vertex, with the element that claimed its cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GtVertex {
    pub x: usize,
    pub y: usize,
    pub element: usize,
    pub class: ElementClass,
    pub arc: f64,
}

/// Ground-truth vertices and, per scene element, its vertices in arc order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GtGraph {
    pub vertices: Vec<GtVertex>,
    pub instances: Vec<Vec<usize>>,
}

impl GtGraph {
    /// Index of the vertex after `v` on its element, if any.
    pub fn successor(&self, v: usize) -> Option<usize> {
        let inst = &self.instances[self.vertices[v].element];
        let pos = inst.iter().position(|&u| u == v)?;
        inst.get(pos + 1).copied()
    }
}

/// One vertex per 8×8 cell: the sample with the smallest arc length of the
/// lowest-index element touching that cell.
pub fn rasterize_vertices(scene: &MapScene, cfg: &BevConfig) -> (VertexLabelGrid, GtGraph) {
    let mut grid = VertexLabelGrid::empty(cfg);
    let dustbin = grid.dustbin();
    let mut graph = GtGraph {
        vertices: Vec::new(),
        instances: vec![Vec::new(); scene.elements.len()],
    };
    for (e, poly) in scene.elements.iter().enumerate() {
        for s in resample_pixels(poly, cfg) {
            let (x, y) = cfg.pixel_index(s.pixel);
            let idx = (y / cfg.cell) * grid.cols + x / cfg.cell;
            if grid.labels[idx] != dustbin {
                continue;
            }
            grid.labels[idx] = ((y % cfg.cell) * cfg.cell + x % cfg.cell) as u8;
            graph.instances[e].push(graph.vertices.len());
            graph.vertices.push(GtVertex {
                x,
                y,
                element: e,
                class: poly.class,
                arc: s.arc,
            });
        }
    }
    (grid, graph)
}

pub fn rasterize_vertex_labels(scene: &MapScene, cfg: &BevConfig) -> VertexLabelGrid {
    rasterize_vertices(scene, cfg).0
}

/// Binary per-class masks of every pixel touched by a sample, laid out
/// `(H, W, 3)`.
pub fn class_masks(scene: &MapScene, cfg: &BevConfig) -> Vec<bool> {
    let (h, w) = (cfg.height(), cfg.width());
    let mut mask = vec![false; h * w * ElementClass::COUNT];
    for poly in &scene.elements {
        let c = poly.class.index();
        for s in resample_pixels(poly, cfg) {
            let (x, y) = cfg.pixel_index(s.pixel);
            mask[(y * w + x) * ElementClass::COUNT + c] = true;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with(points: Vec<[f64; 2]>) -> MapScene {
        MapScene {
            id: "t".into(),
            elements: vec![Polyline::new(ElementClass::Divider, points).unwrap()],
        }
    }

    #[test]
    fn single_vertex_encoding() {
        let cfg = BevConfig::full_scale();
        let grid = VertexLabelGrid::encode(&cfg, &[(12, 9)]);
        assert_eq!(grid.label(1, 1), 12);
        assert_eq!(grid.active_cells(), 1);
        assert_eq!(grid.decode(), vec![(12, 9)]);
    }

    #[test]
    fn empty_scene_is_all_dustbin() {
        let cfg = BevConfig::desk_scale();
        let grid = rasterize_vertex_labels(&MapScene::empty("e"), &cfg);
        assert!(grid.labels.iter().all(|&l| l == 64));
    }

    #[test]
    fn resample_spacing_at_most_one_pixel() {
        let cfg = BevConfig::desk_scale();
        let poly = Polyline::new(ElementClass::Boundary, vec![[0.0, -9.0], [1.0, 0.0], [2.0, 9.0]]).unwrap();
        let s = resample_pixels(&poly, &cfg);
        for w in s.windows(2) {
            let d = (w[1].pixel[0] - w[0].pixel[0]).hypot(w[1].pixel[1] - w[0].pixel[1]);
            assert!(d <= 1.0 + 1e-12);
            assert!(w[1].arc >= w[0].arc);
        }
        assert!((s.last().unwrap().arc - poly.length() / cfg.resolution).abs() < 1e-9);
    }

    #[test]
    fn first_sample_in_cell_wins() {
        let cfg = BevConfig::desk_scale();
        // Horizontal run along pixel row 3 from px 2 to px 20.
        let a = cfg.pixel_to_meters(2.0, 3.0);
        let b = cfg.pixel_to_meters(20.0, 3.0);
        let (grid, graph) = rasterize_vertices(&scene_with(vec![a, b]), &cfg);
        assert_eq!(grid.label(0, 0), 3 * 8 + 2);
        assert_eq!(grid.label(0, 1), 3 * 8);
        assert_eq!(grid.label(0, 2), 3 * 8);
        assert_eq!(graph.instances[0].len(), 3);
        assert_eq!(graph.successor(0), Some(1));
        assert_eq!(graph.successor(2), None);
    }

    #[test]
    fn lower_index_element_claims_shared_cell() {
        let cfg = BevConfig::desk_scale();
        let first = Polyline::new(
            ElementClass::PedCrossing,
            vec![cfg.pixel_to_meters(5.0, 1.0), cfg.pixel_to_meters(5.0, 30.0)],
        )
        .unwrap();
        let second = Polyline::new(
            ElementClass::Divider,
            vec![cfg.pixel_to_meters(1.0, 6.0), cfg.pixel_to_meters(30.0, 6.0)],
        )
        .unwrap();
        let scene = MapScene {
            id: "x".into(),
            elements: vec![first, second],
        };
        let (grid, graph) = rasterize_vertices(&scene, &cfg);
        assert_eq!(grid.label(0, 0), 8 + 5);
        let owner = graph.vertices.iter().find(|v| v.x / 8 == 0 && v.y / 8 == 0).unwrap();
        assert_eq!(owner.element, 0);
    }
}
