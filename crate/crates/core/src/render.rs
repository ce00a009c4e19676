//! SVG rendering of scenes and predictions in pixel space.

use std::fmt::Write;

use crate::decode::ScenePrediction;
use crate::geometry::{BevConfig, ElementClass, MapScene};

pub fn class_color(class: ElementClass) -> &'static str {
    match class {
        ElementClass::Divider => "#e6a100",
        ElementClass::PedCrossing => "#2c7fb8",
        ElementClass::Boundary => "#d7301f",
    }
}

/// One `<path>` per element inside a group tagged with `layer`; the
/// viewBox is the pixel grid.
pub fn render_svg(cfg: &BevConfig, layer: &str, id: &str, elements: &[(ElementClass, &[[f64; 2]])]) -> String {
    let (w, h) = (cfg.width(), cfg.height());
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" width="{}" height="{}">"#,
        w * 4,
        h * 4
    );
    let _ = writeln!(out, r##"<rect x="0" y="0" width="{w}" height="{h}" fill="#ffffff"/>"##);
    let _ = writeln!(out, r#"<g data-layer="{layer}" data-scene="{id}">"#);
    let _ = writeln!(out, r#"<title>{layer}: {id}</title>"#);
    for (class, points) in elements {
        let mut d = String::new();
        for (k, p) in points.iter().enumerate() {
            let [px, py] = cfg.to_pixel(*p);
            let _ = write!(d, "{}{:.3} {:.3}", if k == 0 { "M" } else { " L" }, px, py);
        }
        let _ = writeln!(
            out,
            r#"<path class="{}" d="{d}" stroke="{}" stroke-width="1.5" fill="none"/>"#,
            class.name(),
            class_color(*class)
        );
    }
    out.push_str("</g>\n</svg>\n");
    out
}

pub fn render_scene(scene: &MapScene, cfg: &BevConfig) -> String {
    let els: Vec<(ElementClass, &[[f64; 2]])> = scene.elements.iter().map(|e| (e.class, e.points.as_slice())).collect();
    render_svg(cfg, "ground-truth", &scene.id, &els)
}

pub fn render_prediction(pred: &ScenePrediction, cfg: &BevConfig) -> String {
    let els: Vec<(ElementClass, &[[f64; 2]])> = pred.elements.iter().map(|e| (e.class, e.points.as_slice())).collect();
    render_svg(cfg, "prediction", &pred.id, &els)
}
