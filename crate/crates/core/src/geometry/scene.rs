use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementClass {
    Divider,
    PedCrossing,
    Boundary,
}

impl ElementClass {
    pub const ALL: [ElementClass; 3] = [
        ElementClass::Divider,
        ElementClass::PedCrossing,
        ElementClass::Boundary,
    ];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementClass::Divider => "divider",
            ElementClass::PedCrossing => "ped_crossing",
            ElementClass::Boundary => "boundary",
        }
    }
}

/// Ordered 2D points in vehicle-frame meters, `[x, y]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Polyline {
    pub class: ElementClass,
    pub points: Vec<[f64; 2]>,
}

impl Polyline {
    pub fn new(class: ElementClass, points: Vec<[f64; 2]>) -> Result<Self> {
        let p = Polyline { class, points };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Data(format!(
                "polyline needs at least 2 points, has {}",
                self.points.len()
            )));
        }
        if self.points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Data("polyline has non-finite coordinates".into()));
        }
        if self.points.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data("polyline repeats a point consecutively".into()));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapScene {
    pub id: String,
    pub elements: Vec<Polyline>,
}

impl MapScene {
    pub fn empty(id: impl Into<String>) -> Self {
        MapScene {
            id: id.into(),
            elements: Vec::new(),
        }
    }

    /// Mirrors the scene across the grid's lateral and/or longitudinal axis.
    pub fn mirrored(&self, cfg: &BevConfig, lateral: bool, longitudinal: bool) -> MapScene {
        let [x0, x1] = cfg.x_range;
        let [y0, y1] = cfg.y_range;
        let elements = self
            .elements
            .iter()
            .map(|e| Polyline {
                class: e.class,
                points: e
                    .points
                    .iter()
                    .map(|&[x, y]| {
                        [
                            if longitudinal { x0 + x1 - x } else { x },
                            if lateral { y0 + y1 - y } else { y },
                        ]
                    })
                    .collect(),
            })
            .collect();
        MapScene {
            id: self.id.clone(),
            elements,
        }
    }

    pub fn validate(&self, cfg: &BevConfig) -> Result<()> {
        for (i, e) in self.elements.iter().enumerate() {
            e.validate()
                .map_err(|err| Error::Data(format!("scene {} element {i}: {err}", self.id)))?;
            if let Some(p) = e.points.iter().find(|p| !cfg.contains(**p)) {
                return Err(Error::Data(format!(
                    "scene {} element {i}: point {p:?} outside perception range",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self, class: ElementClass) -> usize {
        self.elements.iter().filter(|e| e.class == class).count()
    }
}

/// Perception range and raster layout.
///
/// Pixel columns run along `y` (`px = (y − y_min)/res`), pixel rows run
/// against `x` (`py = (x_max − x)/res`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevConfig {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub resolution: f64,
    #[serde(default = "default_cell")]
    pub cell: usize,
}

fn default_cell() -> usize {
    8
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig::desk_scale()
    }
}

impl BevConfig {
    /// ±15 m × ±30 m at 0.15 m per pixel: a 200×400 raster.
    pub fn full_scale() -> Self {
        BevConfig {
            x_range: [-15.0, 15.0],
            y_range: [-30.0, 30.0],
            resolution: 0.15,
            cell: 8,
        }
    }

    /// 9.6 m × 19.2 m at 0.15 m per pixel: a 64×128 raster.
    pub fn desk_scale() -> Self {
        BevConfig {
            x_range: [-4.8, 4.8],
            y_range: [-9.6, 9.6],
            resolution: 0.15,
            cell: 8,
        }
    }

    fn extent(lo: f64, hi: f64, res: f64) -> Result<usize> {
        let n = (hi - lo) / res;
        let rounded = n.round();
        if !(n.is_finite() && rounded >= 1.0 && (n - rounded).abs() < 1e-6) {
            return Err(Error::Config(format!(
                "range [{lo}, {hi}] is not a whole number of {res} m pixels"
            )));
        }
        Ok(rounded as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if self.cell == 0 {
            return Err(Error::Config("cell size must be positive".into()));
        }
        let h = Self::extent(self.x_range[0], self.x_range[1], self.resolution)?;
        let w = Self::extent(self.y_range[0], self.y_range[1], self.resolution)?;
        if h % self.cell != 0 || w % self.cell != 0 {
            return Err(Error::Config(format!(
                "{h}x{w} grid is not divisible by cell size {}",
                self.cell
            )));
        }
        Ok(())
    }

    /// `H_bev`, the pixel extent along `x`.
    pub fn height(&self) -> usize {
        ((self.x_range[1] - self.x_range[0]) / self.resolution).round() as usize
    }

    /// `W_bev`, the pixel extent along `y`.
    pub fn width(&self) -> usize {
        ((self.y_range[1] - self.y_range[0]) / self.resolution).round() as usize
    }

    pub fn cell_rows(&self) -> usize {
        self.height() / self.cell
    }

    pub fn cell_cols(&self) -> usize {
        self.width() / self.cell
    }

    pub fn num_cells(&self) -> usize {
        self.cell_rows() * self.cell_cols()
    }

    /// Labels per cell including the dustbin.
    pub fn cell_channels(&self) -> usize {
        self.cell * self.cell + 1
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_range[0]
            && p[0] <= self.x_range[1]
            && p[1] >= self.y_range[0]
            && p[1] <= self.y_range[1]
    }

    /// Continuous pixel coordinates `(px, py)` of a metric point.
    pub fn to_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[1] - self.y_range[0]) / self.resolution,
            (self.x_range[1] - p[0]) / self.resolution,
        ]
    }

    /// Integer pixel `(px, py)` containing a continuous pixel position.
    pub fn pixel_index(&self, pix: [f64; 2]) -> (usize, usize) {
        let clampi = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
        (clampi(pix[0], self.width()), clampi(pix[1], self.height()))
    }

    /// Metric position of a (possibly fractional) pixel coordinate; integer
    /// inputs map to pixel centers.
    pub fn pixel_to_meters(&self, px: f64, py: f64) -> [f64; 2] {
        [
            self.x_range[1] - (py + 0.5) * self.resolution,
            self.y_range[0] + (px + 0.5) * self.resolution,
        ]
    }

    /// Length of the cell diagonal in meters.
    pub fn cell_diagonal_m(&self) -> f64 {
        self.cell as f64 * std::f64::consts::SQRT_2 * self.resolution
    }
}
