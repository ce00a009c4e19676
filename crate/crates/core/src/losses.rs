//! Training objectives: vertex cross-entropy, distance regression, the
//! prediction-to-GT pairing and the adjacency and class likelihoods.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{ElementClass, GtGraph, VertexLabelGrid};
use crate::graph::VertexSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub vertex: f64,
    pub dt: f64,
    pub adjacency: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            vertex: 1.0,
            dt: 1.0,
            adjacency: 5e-3,
            class: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.vertex, self.dt, self.adjacency, self.class];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {all:?}")));
        }
        Ok(())
    }
}

/// Mean 65-way cross-entropy over all cells.
pub fn vertex_loss(tape: &mut Tape, logits: Var, labels: &VertexLabelGrid) -> Result<Var> {
    let (cells, ch) = tape.value(logits).dims2()?;
    if cells != labels.labels.len() || ch != labels.cell * labels.cell + 1 {
        return Err(Error::shape(
            "vertex_loss",
            format!("logits {cells}x{ch} for {} labels", labels.labels.len()),
        ));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let idx: Vec<usize> = labels.labels.iter().enumerate().map(|(i, &l)| i * ch + l as usize).collect();
    let picked = tape.select(logp, &idx)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -1.0)
}

/// Mean squared error over every pixel and class channel.
pub fn dt_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::shape(
            "dt_loss",
            format!("{:?} vs {:?}", tape.shape(pred), target.shape()),
        ));
    }
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Supervision targets for one vertex set.
#[derive(Clone, Debug, PartialEq)]
pub struct GtPairing {
    pub capacity: usize,
    /// GT vertex index per slot, `None` for dustbin or padding.
    pub sigma: Vec<Option<usize>>,
    pub class: Vec<Option<ElementClass>>,
    /// `(i, j)`: slot `j` holds the next GT vertex after `sigma(i)` on the
    /// same element; `j == capacity` is the dustbin.
    pub forward: Vec<(usize, usize)>,
    /// `(i, j)`: slot `j` holds the previous GT vertex.
    pub backward: Vec<(usize, usize)>,
}

impl GtPairing {
    pub fn matched(&self) -> usize {
        self.sigma.iter().filter(|s| s.is_some()).count()
    }
}

fn pixel_dist(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    (dx * dx + dy * dy).sqrt()
}

/// Candidate pairs closer than `d0`, in acceptance order.
pub fn candidate_pairs(preds: &[(usize, usize)], gts: &[(usize, usize)], d0: f64) -> Vec<(f64, usize, usize)> {
    let mut pairs = Vec::new();
    for (i, &p) in preds.iter().enumerate() {
        for (g, &q) in gts.iter().enumerate() {
            let d = pixel_dist(p, q);
            if d < d0 {
                pairs.push((d, i, g));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    pairs
}

/// Greedy one-to-one assignment: shortest pairs first, ties by
/// `(pred, gt)` index, both sides at most once.
pub fn greedy_assignment(preds: &[(usize, usize)], gts: &[(usize, usize)], d0: f64) -> Vec<Option<usize>> {
    let mut sigma = vec![None; preds.len()];
    let mut taken = vec![false; gts.len()];
    for (_, i, g) in candidate_pairs(preds, gts, d0) {
        if sigma[i].is_none() && !taken[g] {
            sigma[i] = Some(g);
            taken[g] = true;
        }
    }
    sigma
}

pub fn match_gt(preds: &VertexSet, gt: &GtGraph, d0: f64) -> Result<GtPairing> {
    if !(d0 > 0.0) {
        return Err(Error::Config(format!("pairing threshold must be positive, got {d0}")));
    }
    let n = preds.capacity();
    let slots: Vec<usize> = preds.valid().map(|(i, _)| i).collect();
    let pts: Vec<(usize, usize)> = preds.valid().map(|(_, v)| (v.x, v.y)).collect();
    let gts: Vec<(usize, usize)> = gt.vertices.iter().map(|v| (v.x, v.y)).collect();
    let local = greedy_assignment(&pts, &gts, d0);

    let mut sigma = vec![None; n];
    let mut owner = vec![None; gts.len()];
    for (k, s) in local.iter().enumerate() {
        if let Some(g) = *s {
            sigma[slots[k]] = Some(g);
            owner[g] = Some(slots[k]);
        }
    }
    let mut forward = Vec::with_capacity(slots.len());
    let mut backward = Vec::with_capacity(slots.len());
    let mut class = vec![None; n];
    for &i in &slots {
        let Some(g) = sigma[i] else {
            forward.push((i, n));
            backward.push((i, n));
            continue;
        };
        let v = &gt.vertices[g];
        class[i] = Some(v.class);
        let inst = &gt.instances[v.element];
        let pos = inst.iter().position(|&u| u == g).ok_or_else(|| Error::Data("GT vertex missing from its element".into()))?;
        let next = inst[pos + 1..].iter().find_map(|&u| owner[u]).unwrap_or(n);
        let prev = inst[..pos].iter().rev().find_map(|&u| owner[u]).unwrap_or(n);
        forward.push((i, next));
        backward.push((i, prev));
    }
    Ok(GtPairing {
        capacity: n,
        sigma,
        class,
        forward,
        backward,
    })
}

/// `-1/2 (sum_M log A + sum_MT log A)`, entries clamped at `1e-12`.
pub fn adjacency_loss(tape: &mut Tape, adjacency: Var, pairing: &GtPairing) -> Result<Var> {
    let (m, m2) = tape.value(adjacency).dims2()?;
    if m != m2 || m != pairing.capacity + 1 {
        return Err(Error::shape("adjacency_loss", format!("{m}x{m2} for capacity {}", pairing.capacity)));
    }
    if pairing.forward.is_empty() && pairing.backward.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let idx: Vec<usize> = pairing.forward.iter().chain(&pairing.backward).map(|&(i, j)| i * m + j).collect();
    let picked = tape.select(adjacency, &idx)?;
    let clamped = tape.clamp(picked, 1e-12, f64::INFINITY)?;
    let logs = tape.ln(clamped)?;
    let sum = tape.sum(logs)?;
    tape.scale(sum, -0.5)
}

/// Mean class NLL over slots paired with a GT vertex.
pub fn class_loss(tape: &mut Tape, logits: Var, pairing: &GtPairing) -> Result<Var> {
    let (n, k) = tape.value(logits).dims2()?;
    if n != pairing.capacity || k != ElementClass::COUNT {
        return Err(Error::shape("class_loss", format!("{n}x{k} for capacity {}", pairing.capacity)));
    }
    let idx: Vec<usize> = pairing
        .class
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| i * k + c.index()))
        .collect();
    if idx.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.select(logp, &idx)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -1.0)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub vertex: Var,
    pub dt: Var,
    pub adjacency: Var,
    pub class: Var,
}

/// Scalar values of each term, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub vertex: f64,
    pub dt: f64,
    pub adjacency: f64,
    pub class: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape, total: Var) -> LossValues {
        LossValues {
            vertex: tape.value(self.vertex).item(),
            dt: tape.value(self.dt).item(),
            adjacency: tape.value(self.adjacency).item(),
            class: tape.value(self.class).item(),
            total: tape.value(total).item(),
        }
    }
}

pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let parts = [
        (terms.vertex, w.vertex),
        (terms.dt, w.dt),
        (terms.adjacency, w.adjacency),
        (terms.class, w.class),
    ];
    let mut acc: Option<Var> = None;
    for (v, weight) in parts {
        let s = tape.scale(v, weight)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("four terms"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BevConfig, DistanceTransformMap, GtVertex};
    use crate::graph::Vertex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn vertex_loss_uniform_and_saturated() {
        let labels = VertexLabelGrid { rows: 2, cols: 3, cell: 8, labels: vec![0, 64, 5, 12, 64, 63] };
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[6, 65]));
        let l = vertex_loss(&mut tape, z, &labels).unwrap();
        assert!((scalar(&tape, l) - 65f64.ln()).abs() < 1e-12);
        let mut hot = Tensor::full(&[6, 65], -30.0);
        for (i, &c) in labels.labels.iter().enumerate() {
            hot.set(&[i, c as usize], 30.0);
        }
        let h = tape.constant(hot);
        let l = vertex_loss(&mut tape, h, &labels).unwrap();
        assert!(scalar(&tape, l) < 1e-20);
    }

    #[test]
    fn vertex_loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = VertexLabelGrid { rows: 3, cols: 4, cell: 8, labels: (0..12).map(|_| rng.random_range(0..65)).collect() };
        let t = Tensor::raw(vec![12, 65], (0..12 * 65).map(|_| rng.random_range(-4.0..4.0)).collect());
        let mut want = 0.0;
        for i in 0..12 {
            let row = &t.data()[i * 65..(i + 1) * 65];
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            want += lse - row[labels.labels[i] as usize];
        }
        want /= 12.0;
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let l = vertex_loss(&mut tape, v, &labels).unwrap();
        assert!((scalar(&tape, l) - want).abs() < 1e-12);
    }

    #[test]
    fn dt_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = Tensor::raw(vec![4, 6], (0..24).map(|_| rng.random_range(0.0..10.0)).collect());
        let mut tape = Tape::new();
        let same = tape.constant(gt.clone());
        let l = dt_loss(&mut tape, same, &gt).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
        let plus = tape.constant(gt.map(|x| x + 1.0));
        let l = dt_loss(&mut tape, plus, &gt).unwrap();
        assert!((scalar(&tape, l) - 1.0).abs() < 1e-12);
        let r = Tensor::raw(vec![4, 6], (0..24).map(|_| rng.random_range(0.0..10.0)).collect());
        let want = r.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 24.0;
        let rv = tape.constant(r);
        let l = dt_loss(&mut tape, rv, &gt).unwrap();
        assert!((scalar(&tape, l) - want).abs() < 1e-12);
    }

    fn line_graph(points: &[(usize, usize)], elements: &[usize]) -> GtGraph {
        let n_el = elements.iter().max().map_or(0, |m| m + 1);
        let mut g = GtGraph { vertices: Vec::new(), instances: vec![Vec::new(); n_el] };
        for (k, (&(x, y), &e)) in points.iter().zip(elements).enumerate() {
            g.instances[e].push(k);
            g.vertices.push(GtVertex { x, y, element: e, class: ElementClass::from_index(e % 3).unwrap(), arc: k as f64 });
        }
        g
    }

    fn vset(points: &[(usize, usize)], capacity: usize) -> VertexSet {
        let cfg = BevConfig::desk_scale();
        let dt = DistanceTransformMap::constant(cfg.height(), cfg.width(), 10.0);
        let vs: Vec<Vertex> = points.iter().map(|&(x, y)| Vertex { x, y, c: 1.0 }).collect();
        VertexSet::from_vertices(&vs, &dt, &cfg, capacity).unwrap()
    }

    #[test]
    fn pairing_links_and_dustbin() {
        // Element 0: three vertices; element 1: one vertex far from every prediction.
        let gt = line_graph(&[(10, 10), (18, 10), (26, 10), (50, 50)], &[0, 0, 0, 1]);
        // Slots: near gt2, near gt0, isolated, near gt1; one padding slot.
        let vs = vset(&[(26, 11), (11, 10), (40, 20), (18, 12)], 5);
        let p = match_gt(&vs, &gt, 4.0).unwrap();
        assert_eq!(p.sigma, vec![Some(2), Some(0), None, Some(1), None]);
        assert_eq!(p.forward, vec![(0, 5), (1, 3), (2, 5), (3, 0)]);
        assert_eq!(p.backward, vec![(0, 3), (1, 5), (2, 5), (3, 1)]);
        assert_eq!(p.class[0], Some(ElementClass::Divider));
        assert_eq!(p.class[2], None);
    }

    #[test]
    fn pairing_skips_unmatched_gt_vertices() {
        let gt = line_graph(&[(10, 10), (18, 10), (26, 10)], &[0, 0, 0]);
        let vs = vset(&[(10, 10), (26, 10)], 3);
        let p = match_gt(&vs, &gt, 4.0).unwrap();
        assert_eq!(p.forward, vec![(0, 1), (1, 3)]);
        assert_eq!(p.backward, vec![(0, 3), (1, 0)]);
    }

    #[test]
    fn close_pair_matches_and_far_goes_to_dustbin() {
        assert_eq!(greedy_assignment(&[(1, 1)], &[(1, 1)], 4.0), vec![Some(0)]);
        assert_eq!(greedy_assignment(&[(1, 1)], &[(2, 1)], 4.0), vec![Some(0)]);
        assert_eq!(greedy_assignment(&[(1, 1)], &[(5, 1)], 4.0), vec![None]);
        assert!(match_gt(&vset(&[(1, 1)], 1), &GtGraph::default(), 0.0).is_err());
    }

    #[test]
    fn adjacency_loss_cases() {
        let p = GtPairing {
            capacity: 3,
            sigma: vec![None; 3],
            class: vec![None; 3],
            forward: vec![(0, 1), (1, 3)],
            backward: vec![(1, 0), (0, 3)],
        };
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::full(&[4, 4], 1.0));
        let l = adjacency_loss(&mut tape, ones, &p).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
        let half = tape.constant(Tensor::full(&[4, 4], 0.5));
        let l = adjacency_loss(&mut tape, half, &p).unwrap();
        assert!((scalar(&tape, l) - 2.0 * 2f64.ln()).abs() < 1e-12);
        let zero = tape.constant(Tensor::zeros(&[4, 4]));
        let l = adjacency_loss(&mut tape, zero, &p).unwrap();
        assert!((scalar(&tape, l) - 2.0 * 1e12f64.ln()).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::raw(vec![4, 4], (0..16).map(|_| rng.random_range(0.01..1.0)).collect());
        let want = -0.5 * (a.at(&[0, 1]).ln() + a.at(&[1, 3]).ln() + a.at(&[1, 0]).ln() + a.at(&[0, 3]).ln());
        let av = tape.constant(a);
        let l = adjacency_loss(&mut tape, av, &p).unwrap();
        assert!((scalar(&tape, l) - want).abs() < 1e-12);
    }

    #[test]
    fn class_loss_cases() {
        let p = GtPairing {
            capacity: 3,
            sigma: vec![Some(0), None, Some(1)],
            class: vec![Some(ElementClass::Boundary), None, Some(ElementClass::Divider)],
            forward: vec![],
            backward: vec![],
        };
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, 3]));
        let l = class_loss(&mut tape, z, &p).unwrap();
        assert!((scalar(&tape, l) - 3f64.ln()).abs() < 1e-12);
        let sat = tape.constant(Tensor::from_rows(&[vec![-40.0, -40.0, 40.0], vec![0.0; 3], vec![40.0, -40.0, -40.0]]).unwrap());
        let l = class_loss(&mut tape, sat, &p).unwrap();
        assert!(scalar(&tape, l) < 1e-30);
        let none = GtPairing { sigma: vec![None; 3], class: vec![None; 3], ..p.clone() };
        let l = class_loss(&mut tape, z, &none).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::raw(vec![3, 3], (0..9).map(|_| rng.random_range(-3.0..3.0)).collect());
        let nll = |row: usize, c: usize| {
            let r = &t.data()[row * 3..row * 3 + 3];
            r.iter().map(|x| x.exp()).sum::<f64>().ln() - r[c]
        };
        let want = (nll(0, 2) + nll(2, 0)) / 2.0;
        let tv = tape.constant(t.clone());
        let l = class_loss(&mut tape, tv, &p).unwrap();
        assert!((scalar(&tape, l) - want).abs() < 1e-12);
        assert!(want >= 0.0);
    }

    #[test]
    fn total_loss_weighting() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::scalar(1.0));
        let terms = LossTerms { vertex: one, dt: one, adjacency: one, class: one };
        let t = total_loss(&mut tape, &terms, &LossWeights::default()).unwrap();
        assert!((scalar(&tape, t) - 2.015).abs() < 1e-15);
        let zero = tape.constant(Tensor::scalar(0.0));
        let terms = LossTerms { vertex: zero, dt: zero, adjacency: zero, class: zero };
        let t = total_loss(&mut tape, &terms, &LossWeights::default()).unwrap();
        assert_eq!(scalar(&tape, t), 0.0);
    }
}
