use mapgraph_core::autodiff::nn::Mlp;
use mapgraph_core::autodiff::{grad_check, op_suite, Initializer, ParamStore, Tape};
use mapgraph_core::Tensor;
use proptest::prelude::*;

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..4 {
        for case in op_suite(seed, 32, 1e-5, Some(48)).unwrap() {
            assert!(
                case.report.max_rel_error <= 1e-4,
                "{} {:?}: {:?}",
                case.name,
                case.shape,
                case.report
            );
            assert!(case.report.checked > 0);
        }
    }
}

#[test]
fn forward_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::full(&[2, 3], 1.0));
    let b = t.constant(Tensor::full(&[3, 2], 1.0));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c), &Tensor::full(&[2, 2], 3.0));
    let x = t.constant(Tensor::new(vec![1], vec![-1.5]).unwrap());
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), &[0.0]);
    let z = t.constant(Tensor::zeros(&[3]));
    let s = t.softmax(z, 0).unwrap();
    for &v in t.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn shape_and_loss_errors() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    assert_eq!(t.matmul(a, b).unwrap_err().category(), "shape");
    assert_eq!(t.backward(a).unwrap_err().category(), "shape");
    let neg = t.constant(Tensor::full(&[1], -1.0));
    assert_eq!(t.ln(neg).unwrap_err().category(), "numeric");
}

#[test]
fn linear_loss_gradient_is_input() {
    let x = Tensor::new(vec![4], vec![0.5, -2.0, 3.0, 0.25]).unwrap();
    let mut t = Tape::new();
    let w = t.param("w", &Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let unused = t.param("u", &Tensor::full(&[2], 1.0));
    let xv = t.constant(x.clone());
    let p = t.mul(w, xv).unwrap();
    let l = t.sum(p).unwrap();
    let g = t.backward(l).unwrap().params();
    assert_eq!(g["w"], x);
    assert_eq!(g["u"], Tensor::zeros(&[2]));
    let _ = unused;
}

#[test]
fn constant_loss_has_zero_gradients() {
    let mut t = Tape::new();
    let w = t.param("w", &Tensor::full(&[3], 2.0));
    let z = t.scale(w, 0.0).unwrap();
    let l = t.sum(z).unwrap();
    let g = t.backward(l).unwrap().params();
    assert_eq!(g["w"], Tensor::zeros(&[3]));
}

#[test]
fn random_mlp_matches_finite_differences() {
    let mlp = Mlp::new("m", 7, 11, 5);
    let mut store = ParamStore::new();
    mlp.init(&mut store, &mut Initializer::new(3)).unwrap();
    let x = Tensor::new(vec![6, 7], (0..42).map(|i| ((i as f64) * 0.37).sin()).collect()).unwrap();
    let report = grad_check(
        |t, p| {
            let xv = t.constant(x.clone());
            let y = mlp.forward(t, p, xv)?;
            let y = t.sin(y)?;
            t.mean(y)
        },
        &store,
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn square_at_three_is_exact() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
    let r = grad_check(
        |t, p| {
            let w = t.param("w", p.get("w")?);
            let sq = t.mul(w, w)?;
            t.sum(sq)
        },
        &store,
        1e-5,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

#[test]
fn dead_relu_region_is_zero_both_ways() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![3], vec![-1.0, -0.5, -2.0]).unwrap()).unwrap();
    let f = |t: &mut Tape, p: &ParamStore| {
        let w = t.param("w", p.get("w")?);
        let r = t.relu(w)?;
        t.sum(r)
    };
    let r = grad_check(f, &store, 1e-5, None).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
    let mut t = Tape::new();
    let l = f(&mut t, &store).unwrap();
    assert_eq!(t.backward(l).unwrap().params()["w"], Tensor::zeros(&[3]));
}

#[test]
fn fan_out_accumulates_both_branches() {
    let w0 = Tensor::new(vec![2, 2], vec![0.3, -1.2, 0.7, 2.0]).unwrap();
    let branch = |which: u8| {
        let mut t = Tape::new();
        let w = t.param("w", &w0);
        let a = t.exp(w).unwrap();
        let b = t.sin(w).unwrap();
        let l = match which {
            0 => t.sum(a).unwrap(),
            1 => t.sum(b).unwrap(),
            _ => {
                let s = t.add(a, b).unwrap();
                t.sum(s).unwrap()
            }
        };
        t.backward(l).unwrap().params()["w"].clone()
    };
    let (ga, gb, both) = (branch(0), branch(1), branch(2));
    for i in 0..4 {
        assert!((both.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn softmax_normalizes(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>(), axis in 0usize..2) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = t.softmax(x, axis).unwrap();
        let v = t.value(s);
        prop_assert!(v.data().iter().all(|&p| p >= 0.0));
        let (outer, inner) = if axis == 1 { (rows, cols) } else { (cols, rows) };
        for o in 0..outer {
            let sum: f64 = (0..inner)
                .map(|i| if axis == 1 { v.at(&[o, i]) } else { v.at(&[i, o]) })
                .sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(values in proptest::collection::vec(-1e300f64..1e300, 1..40)) {
        let mut store = ParamStore::new();
        let n = values.len();
        store.insert("layer.weight", Tensor::new(vec![n], values).unwrap()).unwrap();
        store.insert("layer.bias", Tensor::new(vec![1, 1], vec![f64::MIN_POSITIVE]).unwrap()).unwrap();
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        for (name, t) in store.iter() {
            let b = back.get(name).unwrap();
            prop_assert_eq!(t.shape(), b.shape());
            prop_assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
