//! Map scenes in metric coordinates and their raster ground truth.

pub mod chamfer;
pub mod distance;
pub mod raster;
pub mod scene;
pub mod synth;

pub use chamfer::{chamfer, densify};
pub use distance::{distance_transform, DistanceTransformMap, DT_MAX};
pub use raster::{
    class_masks, rasterize_vertex_labels, rasterize_vertices, resample_pixels, GtGraph, GtVertex,
    VertexLabelGrid,
};
pub use scene::{BevConfig, ElementClass, MapScene, Polyline};
pub use synth::{clip_polyline, synth_scene, GenParams};
