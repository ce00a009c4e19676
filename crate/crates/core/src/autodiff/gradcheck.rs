//! Central finite-difference verification of tape gradients.

use crate::autodiff::params::ParamStore;
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares analytic gradients of `f` against central differences.
///
/// The error per scalar is `|analytic − numeric| / max(1, |numeric|)`.
/// `max_per_param` caps how many entries of each parameter are probed
/// (evenly strided); `None` probes all of them.
pub fn grad_check<F>(
    f: F,
    params: &ParamStore,
    step: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let analytic = tape.backward(loss)?.params();

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        let v = t.value(l).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let stride = match max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst_param = name.clone();
                    report.worst_index = i;
                }
            }
        }
    }
    Ok(report)
}

/// Result of checking one op.
#[derive(Clone, Debug)]
pub struct OpCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub report: GradCheckReport,
}

type OpFn = Box<dyn Fn(&mut Tape, Var, Var) -> Result<Var>>;

struct OpDef {
    name: &'static str,
    a: Vec<usize>,
    b: Vec<usize>,
    /// Input domain: 0 any, 1 positive, 2 away from relu/clamp kinks.
    domain: u8,
    op: OpFn,
}

/// Gradient checks for every tape op, each contracted with a random weight
/// so the loss sees every output entry. Shapes are drawn up to `max_dim`.
pub fn op_suite(seed: u64, max_dim: usize, step: f64, max_per_param: Option<usize>) -> Result<Vec<OpCase>> {
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = |rng: &mut ChaCha8Rng| rng.random_range(1..=max_dim.max(1));
    let (m, k, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let rows: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..m)).collect();
    let n_sel = (m * n).min(20);
    let flat: Vec<usize> = (0..n_sel).map(|_| rng.random_range(0..m * n)).collect();
    let mask: Vec<bool> = (0..m * n).map(|_| rng.random_bool(0.3)).collect();
    let c = Tensor::raw(vec![m, n], (0..m * n).map(|_| rng.random_range(-2.0..2.0)).collect());
    let start = rng.random_range(0..n);
    let len = rng.random_range(1..=n - start);

    let s = |name, a: Vec<usize>, b: Vec<usize>, domain, op: OpFn| OpDef { name, a, b, domain, op };
    let cases = vec![
        s("matmul", vec![m, k], vec![k, n], 0, Box::new(|t, a, b| t.matmul(a, b))),
        s("matmul_nt", vec![m, k], vec![n, k], 0, Box::new(|t, a, b| t.matmul_nt(a, b))),
        s("transpose", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.transpose(a))),
        s("add", vec![m, n], vec![m, n], 0, Box::new(|t, a, b| t.add(a, b))),
        s("sub", vec![m, n], vec![m, n], 0, Box::new(|t, a, b| t.sub(a, b))),
        s("mul", vec![m, n], vec![m, n], 0, Box::new(|t, a, b| t.mul(a, b))),
        s("mul_fanout", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.mul(a, a))),
        s("add_row", vec![m, n], vec![1, n], 0, Box::new(|t, a, b| t.add_row(a, b))),
        s("mul_const", vec![m, n], vec![1], 0, Box::new(move |t, a, _| t.mul_const(a, &c))),
        s("scale", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.scale(a, -1.7))),
        s("add_scalar", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.add_scalar(a, 0.3))),
        s("concat0", vec![m, n], vec![k, n], 0, Box::new(|t, a, b| t.concat(&[a, b, a], 0))),
        s("concat1", vec![m, n], vec![m, k], 0, Box::new(|t, a, b| t.concat(&[b, a], 1))),
        s("slice", vec![m, n], vec![1], 0, Box::new(move |t, a, _| t.slice(a, 1, start, len))),
        s("reshape", vec![m, n], vec![1], 0, Box::new(move |t, a, _| t.reshape(a, &[n * m]))),
        s("relu", vec![m, n], vec![1], 2, Box::new(|t, a, _| t.relu(a))),
        s("exp", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.exp(a))),
        s("ln", vec![m, n], vec![1], 1, Box::new(|t, a, _| t.ln(a))),
        s("clamp", vec![m, n], vec![1], 2, Box::new(|t, a, _| t.clamp(a, -0.5, 0.5))),
        s("sin", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.sin(a))),
        s("cos", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.cos(a))),
        s("sqrt", vec![m, n], vec![1], 1, Box::new(|t, a, _| t.sqrt(a))),
        s("sum", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.sum(a))),
        s("mean", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.mean(a))),
        s("sum_axis0", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.sum_axis(a, 0))),
        s("sum_axis1", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.sum_axis(a, 1))),
        s("softmax0", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.softmax(a, 0))),
        s("softmax1", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.softmax(a, 1))),
        s("log_softmax1", vec![m, n], vec![1], 0, Box::new(|t, a, _| t.log_softmax(a, 1))),
        s("masked_fill", vec![m, n], vec![1], 0, Box::new(move |t, a, _| t.masked_fill(a, &mask, -3.0))),
        s("select", vec![m, n], vec![1], 0, Box::new(move |t, a, _| t.select(a, &flat))),
        s("gather_rows", vec![m, n], vec![1], 0, Box::new(move |t, a, _| t.gather_rows(a, &rows))),
        s("sinkhorn", vec![k + 1, k + 1], vec![1], 0, Box::new(move |t, a, _| {
            crate::matcher::sinkhorn(t, a, &vec![true; k], 30)
        })),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let draw = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| match case.domain {
                    1 => rng.random_range(0.5..2.0),
                    2 => {
                        let v: f64 = rng.random_range(0.05..1.5);
                        if rng.random_bool(0.5) { v } else { -v }
                    }
                    _ => rng.random_range(-1.5..1.5),
                })
                .collect();
            Tensor::raw(shape.to_vec(), data)
        };
        let mut params = ParamStore::new();
        params.insert("a", draw(&case.a, &mut rng))?;
        params.insert("b", draw(&case.b, &mut rng))?;
        // Probe the output shape once to draw a matching contraction weight.
        let mut probe = Tape::new();
        let a = probe.param("a", params.get("a")?);
        let b = probe.param("b", params.get("b")?);
        let y = (case.op)(&mut probe, a, b)?;
        let shape = probe.shape(y).to_vec();
        let wn: usize = shape.iter().product();
        let w = Tensor::raw(shape.clone(), (0..wn).map(|_| rng.random_range(-1.0..1.0)).collect());
        let op = &case.op;
        let report = grad_check(
            |t, p| {
                let a = t.param("a", p.get("a")?);
                let b = t.param("b", p.get("b")?);
                let y = op(t, a, b)?;
                let z = if t.value(y).is_scalar() { y } else { t.mul_const(y, &w)? };
                t.sum(z)
            },
            &params,
            step,
            max_per_param,
        )?;
        out.push(OpCase {
            name: case.name,
            shape,
            report,
        });
    }
    Ok(out)
}
