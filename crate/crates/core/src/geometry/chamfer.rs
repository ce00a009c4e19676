use crate::error::{Error, Result};

fn directed(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let total: f64 = a
        .iter()
        .map(|p| {
            b.iter()
                .map(|q| (p[0] - q[0]).hypot(p[1] - q[1]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / a.len() as f64
}

/// Symmetric Chamfer distance: the mean of the two directed mean
/// nearest-neighbour distances.
pub fn chamfer(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(0.5 * (directed(a, b) + directed(b, a)))
}

/// Points along a polyline at spacing no larger than `spacing`, endpoints included.
pub fn densify(points: &[[f64; 2]], spacing: f64) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let steps = (len / spacing).ceil().max(1.0) as usize;
        for k in 0..steps {
            let t = k as f64 / steps as f64;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    if let Some(&last) = points.last() {
        out.push(last);
    }
    out
}
