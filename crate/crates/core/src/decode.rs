//! Adjacency decoding into class-labeled polylines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevConfig, ElementClass, MapScene, Polyline};
use crate::graph::VertexSet;
use crate::tensor::Tensor;

/// A decoded instance in pixel coordinates `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedInstance {
    pub class: ElementClass,
    pub confidence: f64,
    pub points: Vec<[f64; 2]>,
    /// Vertex slots along the path.
    pub slots: Vec<usize>,
}

impl PredictedInstance {
    pub fn to_element(&self, cfg: &BevConfig) -> ScoredElement {
        ScoredElement {
            class: self.class,
            confidence: self.confidence,
            points: self.points.iter().map(|p| cfg.pixel_to_meters(p[0], p[1])).collect(),
        }
    }
}

/// A predicted element in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredElement {
    pub class: ElementClass,
    pub points: Vec<[f64; 2]>,
    pub confidence: f64,
}

/// Predictions for one scene, shaped like [`MapScene`] plus confidences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenePrediction {
    pub id: String,
    pub elements: Vec<ScoredElement>,
}

impl ScenePrediction {
    pub fn from_instances(id: &str, instances: &[PredictedInstance], cfg: &BevConfig) -> Self {
        ScenePrediction {
            id: id.to_owned(),
            elements: instances.iter().map(|i| i.to_element(cfg)).collect(),
        }
    }

    /// Ground truth restated as predictions with the given confidence.
    pub fn from_scene(scene: &MapScene, confidence: f64) -> Self {
        ScenePrediction {
            id: scene.id.clone(),
            elements: scene
                .elements
                .iter()
                .map(|e| ScoredElement {
                    class: e.class,
                    points: e.points.clone(),
                    confidence,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, e) in self.elements.iter().enumerate() {
            Polyline::new(e.class, e.points.clone())
                .map_err(|err| Error::Data(format!("{} element {k}: {err}", self.id)))?;
            if !(0.0..=1.0).contains(&e.confidence) {
                return Err(Error::Data(format!("{} element {k}: confidence {}", self.id, e.confidence)));
            }
        }
        Ok(())
    }
}

fn softmax3(row: &[f64]) -> [f64; 3] {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = [(row[0] - max).exp(), (row[1] - max).exp(), (row[2] - max).exp()];
    let z = e[0] + e[1] + e[2];
    [e[0] / z, e[1] / z, e[2] / z]
}

/// Symmetrizes the real block of the adjacency, keeps edges above `tau`
/// that rank in the top two of both endpoints, and walks the resulting
/// paths (from endpoints first, then cycles).
pub fn decode(adjacency: &Tensor, vs: &VertexSet, class_logits: &Tensor, tau: f64) -> Result<Vec<PredictedInstance>> {
    let n = vs.capacity();
    let (m, m2) = adjacency.dims2()?;
    if m != m2 || m != n + 1 {
        return Err(Error::shape("decode", format!("adjacency {m}x{m2} for capacity {n}")));
    }
    if class_logits.shape() != [n, ElementClass::COUNT] {
        return Err(Error::shape("decode", format!("class logits {:?}", class_logits.shape())));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("adjacency threshold {tau} outside (0, 1)")));
    }
    let real: Vec<usize> = vs.valid().map(|(i, _)| i).collect();
    let a = adjacency.data();
    let weight = |i: usize, j: usize| 0.5 * (a[i * m + j] + a[j * m + i]);

    let mut top: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &i in &real {
        let mut cand: Vec<(f64, usize)> = real
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| (weight(i, j), j))
            .filter(|&(w, _)| w > tau)
            .collect();
        cand.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        top[i] = cand.into_iter().take(2).map(|(_, j)| j).collect();
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &i in &real {
        for &j in &top[i] {
            if top[j].contains(&i) {
                adj[i].push(j);
            }
        }
    }

    let mut order = real.clone();
    order.sort_by(|&x, &y| vs.vertices[y].c.total_cmp(&vs.vertices[x].c).then(x.cmp(&y)));
    let mut visited = vec![false; n];
    let mut paths = Vec::new();
    let walk = |start: usize, visited: &mut Vec<bool>| {
        let mut path = vec![start];
        visited[start] = true;
        let mut cur = start;
        while let Some(&next) = adj[cur].iter().find(|&&j| !visited[j]) {
            visited[next] = true;
            path.push(next);
            cur = next;
        }
        path
    };
    for &i in &order {
        if !visited[i] && adj[i].len() == 1 {
            paths.push(walk(i, &mut visited));
        }
    }
    for &i in &order {
        if !visited[i] && adj[i].len() == 2 {
            paths.push(walk(i, &mut visited));
        }
    }

    let probs: Vec<[f64; 3]> = (0..n)
        .map(|i| softmax3(&class_logits.data()[i * 3..i * 3 + 3]))
        .collect();
    let mut out = Vec::new();
    for path in paths.into_iter().filter(|p| p.len() >= 2) {
        let mut votes = [0usize; 3];
        let mut mass = [0.0; 3];
        for &i in &path {
            let p = probs[i];
            let best = (0..3).fold(0, |b, k| if p[k] > p[b] { k } else { b });
            votes[best] += 1;
            for k in 0..3 {
                mass[k] += p[k];
            }
        }
        let class = (0..3)
            .max_by(|&x, &y| votes[x].cmp(&votes[y]).then(mass[x].total_cmp(&mass[y])).then(y.cmp(&x)))
            .expect("three classes");
        let confidence = path.iter().map(|&i| vs.vertices[i].c).sum::<f64>() / path.len() as f64;
        out.push(PredictedInstance {
            class: ElementClass::from_index(class).expect("class index"),
            confidence,
            points: path.iter().map(|&i| [vs.vertices[i].x as f64, vs.vertices[i].y as f64]).collect(),
            slots: path,
        });
    }
    Ok(out)
}

/// Symmetric one-hot adjacency with the given slot links; valid slots with
/// fewer than two links also connect to the dustbin.
pub fn adjacency_from_links(capacity: usize, valid: &[usize], links: &[(usize, usize)]) -> Tensor {
    let m = capacity + 1;
    let mut a = vec![0.0; m * m];
    let mut degree = vec![0usize; capacity];
    for &(i, j) in links {
        a[i * m + j] = 1.0;
        a[j * m + i] = 1.0;
        degree[i] += 1;
        degree[j] += 1;
    }
    for &i in valid {
        if degree[i] < 2 {
            a[i * m + capacity] = 1.0;
            a[capacity * m + i] = 1.0;
        }
    }
    Tensor::raw(vec![m, m], a)
}
