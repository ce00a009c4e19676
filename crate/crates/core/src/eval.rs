//! Instance-level average precision under Chamfer-distance thresholds.

use serde::{Deserialize, Serialize};

use crate::decode::ScenePrediction;
use crate::error::{Error, Result};
use crate::geometry::{chamfer, densify, ElementClass, MapScene};

pub const AP_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Chamfer thresholds in meters.
    pub thresholds: Vec<f64>,
    /// Resampling step applied to both polylines before Chamfer, meters.
    pub spacing: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: AP_THRESHOLDS.to_vec(),
            spacing: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: ElementClass,
    pub num_gt: usize,
    pub num_pred: usize,
    /// AP per threshold, in [`EvalConfig::thresholds`] order.
    pub per_threshold: Vec<f64>,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    /// Classes with at least one GT instance.
    pub classes: Vec<ClassAp>,
    pub map: f64,
}

impl ApReport {
    pub fn class(&self, class: ElementClass) -> Option<&ClassAp> {
        self.classes.iter().find(|c| c.class == class)
    }
}

/// Area under the precision envelope of a ranked TP/FP list.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Predictions per scene are paired with `gts` by scene id.
pub fn instance_ap(preds: &[ScenePrediction], gts: &[MapScene], cfg: &EvalConfig) -> Result<ApReport> {
    if !(cfg.spacing > 0.0) || cfg.thresholds.is_empty() {
        return Err(Error::Config("eval needs positive spacing and at least one threshold".into()));
    }
    let mut by_scene = Vec::with_capacity(gts.len());
    for gt in gts {
        let p = preds.iter().filter(|p| p.id == gt.id).collect::<Vec<_>>();
        if p.len() > 1 {
            return Err(Error::Data(format!("duplicate predictions for scene {}", gt.id)));
        }
        by_scene.push(p.first().copied());
    }
    if let Some(extra) = preds.iter().find(|p| !gts.iter().any(|g| g.id == p.id)) {
        return Err(Error::Data(format!("prediction for unknown scene {}", extra.id)));
    }

    let mut classes = Vec::new();
    for class in ElementClass::ALL {
        let mut num_gt = 0;
        // (confidence, scene, distances to that scene's GTs of this class)
        let mut ranked: Vec<(f64, usize, Vec<f64>)> = Vec::new();
        for (s, gt) in gts.iter().enumerate() {
            let g: Vec<Vec<[f64; 2]>> = gt
                .elements
                .iter()
                .filter(|e| e.class == class)
                .map(|e| densify(&e.points, cfg.spacing))
                .collect();
            num_gt += g.len();
            let Some(pred) = by_scene[s] else { continue };
            for e in pred.elements.iter().filter(|e| e.class == class) {
                let dense = densify(&e.points, cfg.spacing);
                let d = g.iter().map(|q| chamfer(&dense, q)).collect::<Result<Vec<_>>>()?;
                ranked.push((e.confidence, s, d));
            }
        }
        if num_gt == 0 {
            continue;
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let per_threshold: Vec<f64> = cfg
            .thresholds
            .iter()
            .map(|&t| {
                let mut used: Vec<Vec<bool>> = gts
                    .iter()
                    .map(|g| vec![false; g.elements.iter().filter(|e| e.class == class).count()])
                    .collect();
                let hits: Vec<bool> = ranked
                    .iter()
                    .map(|(_, s, d)| {
                        let best = d
                            .iter()
                            .enumerate()
                            .filter(|(k, _)| !used[*s][*k])
                            .min_by(|a, b| a.1.total_cmp(b.1));
                        match best {
                            Some((k, &dist)) if dist < t => {
                                used[*s][k] = true;
                                true
                            }
                            _ => false,
                        }
                    })
                    .collect();
                average_precision(&hits, num_gt)
            })
            .collect();
        let ap = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
        classes.push(ClassAp {
            class,
            num_gt,
            num_pred: ranked.len(),
            per_threshold,
            ap,
        });
    }
    let map = if classes.is_empty() {
        0.0
    } else {
        classes.iter().map(|c| c.ap).sum::<f64>() / classes.len() as f64
    };
    Ok(ApReport {
        thresholds: cfg.thresholds.clone(),
        classes,
        map,
    })
}
