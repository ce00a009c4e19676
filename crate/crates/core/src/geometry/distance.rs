//! Truncated Euclidean distance transform of the per-class element masks.

use crate::geometry::raster::class_masks;
use crate::geometry::scene::{BevConfig, ElementClass, MapScene};

pub const DT_MAX: f64 = 10.0;

/// `(H, W, 3)` distances in pixels, clamped to `[0, DT_MAX]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTransformMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DistanceTransformMap {
    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        DistanceTransformMap {
            height,
            width,
            values: vec![value; height * width * ElementClass::COUNT],
        }
    }

    pub fn at(&self, y: usize, x: usize, class: usize) -> f64 {
        self.values[(y * self.width + x) * ElementClass::COUNT + class]
    }

    /// The `cell×cell×3` patch of cell `(row, col)`, flattened `(dy, dx, class)`.
    pub fn patch(&self, row: usize, col: usize, cell: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(cell * cell * ElementClass::COUNT);
        for dy in 0..cell {
            let y = row * cell + dy;
            let start = (y * self.width + col * cell) * ElementClass::COUNT;
            out.extend_from_slice(&self.values[start..start + cell * ElementClass::COUNT]);
        }
        out
    }
}

/// One-dimensional squared-distance lower envelope (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        if f[v[0]] == f64::INFINITY {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if f[v[0]] == f64::INFINITY {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of a row-major `height×width` mask; `INFINITY` when the mask is empty.
pub fn squared_edt(mask: &[bool], height: usize, width: usize) -> Vec<f64> {
    let n = height.max(width);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut col_f = vec![0.0; height];
    let mut col_out = vec![0.0; height];
    let mut tmp = vec![0.0; height * width];
    for x in 0..width {
        for y in 0..height {
            col_f[y] = if mask[y * width + x] { 0.0 } else { f64::INFINITY };
        }
        edt_1d(&col_f, &mut col_out, &mut v, &mut z);
        for y in 0..height {
            tmp[y * width + x] = col_out[y];
        }
    }
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let row = &tmp[y * width..(y + 1) * width];
        edt_1d(row, &mut out[y * width..(y + 1) * width], &mut v, &mut z);
    }
    out
}

pub fn distance_transform(scene: &MapScene, cfg: &BevConfig) -> DistanceTransformMap {
    let (h, w) = (cfg.height(), cfg.width());
    let masks = class_masks(scene, cfg);
    let mut map = DistanceTransformMap::constant(h, w, DT_MAX);
    let mut channel = vec![false; h * w];
    for c in 0..ElementClass::COUNT {
        for (i, m) in channel.iter_mut().enumerate() {
            *m = masks[i * ElementClass::COUNT + c];
        }
        let sq = squared_edt(&channel, h, w);
        for (i, d2) in sq.into_iter().enumerate() {
            map.values[i * ElementClass::COUNT + c] = d2.sqrt().min(DT_MAX);
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::scene::Polyline;

    fn brute(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
        let on: Vec<(usize, usize)> = (0..h * w).filter(|&i| mask[i]).map(|i| (i / w, i % w)).collect();
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                on.iter()
                    .map(|&(a, b)| (y as f64 - a as f64).powi(2) + (x as f64 - b as f64).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn squared_edt_matches_brute_force_on_sparse_masks() {
        let (h, w) = (13, 17);
        for seed in 0..20u64 {
            let mask: Vec<bool> = (0..h * w)
                .map(|i| (i as u64).wrapping_mul(2654435761).wrapping_add(seed * 97).is_multiple_of(23))
                .collect();
            assert_eq!(squared_edt(&mask, h, w), brute(&mask, h, w));
        }
    }

    #[test]
    fn empty_mask_is_infinite() {
        assert!(squared_edt(&[false; 12], 3, 4).iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn empty_class_channel_is_ten() {
        let cfg = BevConfig::desk_scale();
        let map = distance_transform(&MapScene::empty("e"), &cfg);
        assert!(map.values.iter().all(|&v| v == DT_MAX));
    }

    #[test]
    fn vertical_line_distance() {
        let cfg = BevConfig::desk_scale();
        // constant px = 40 across all rows
        let top = cfg.pixel_to_meters(40.0, 0.0);
        let bottom = cfg.pixel_to_meters(40.0, 63.0);
        let scene = MapScene {
            id: "v".into(),
            elements: vec![Polyline::new(ElementClass::Divider, vec![top, bottom]).unwrap()],
        };
        let map = distance_transform(&scene, &cfg);
        for y in 0..64 {
            assert_eq!(map.at(y, 40, 0), 0.0);
            assert_eq!(map.at(y, 43, 0), 3.0);
            assert_eq!(map.at(y, 37, 0), 3.0);
            assert_eq!(map.at(y, 43, 1), DT_MAX);
        }
    }
}
