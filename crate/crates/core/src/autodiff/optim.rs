use std::collections::HashMap;

use crate::autodiff::params::{Moments, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// are left untouched, but the shared step counter still advances.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &HashMap<String, Tensor>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.values().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite { op: "adam_step" });
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in names {
        let Some(g) = grads.get(&name) else { continue };
        let n = store.get(&name)?.numel();
        if g.numel() != n {
            return Err(Error::shape("adam_step", format!("gradient for `{name}`")));
        }
        let mom = store.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let mut update = vec![0.0; n];
        for (i, &gi) in g.data().iter().enumerate() {
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * gi;
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = mom.m[i] / bc1;
            let v_hat = mom.v[i] / bc2;
            update[i] = cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        for (w, u) in store.get_mut(&name)?.data_mut().iter_mut().zip(update) {
            *w -= u;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m̂ = g, v̂ = g², update = lr·g/(|g|+ε)
        let cfg = AdamConfig::default();
        for g in [0.5, -3.0, 1e-2] {
            let mut s = single(2.0);
            let grads = HashMap::from([("w".to_owned(), Tensor::scalar(g))]);
            adam_step(&mut s, &grads, &cfg).unwrap();
            let expected = 2.0 - cfg.lr * g / (g.abs() + cfg.eps);
            let got = s.get("w").unwrap().item();
            assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
            assert!((2.0 - got - cfg.lr * g.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = single(1.25);
        let grads = HashMap::from([("w".to_owned(), Tensor::scalar(0.0))]);
        for _ in 0..10 {
            adam_step(&mut s, &grads, &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.get("w").unwrap().item(), 1.25);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = single(0.3);
            for k in 0..50 {
                let g = ((k as f64) * 0.7).sin();
                let grads = HashMap::from([("w".to_owned(), Tensor::scalar(g))]);
                adam_step(&mut s, &grads, &AdamConfig::default()).unwrap();
            }
            s.get("w").unwrap().item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_is_error() {
        let mut s = single(0.0);
        let grads = HashMap::from([("w".to_owned(), Tensor::scalar(f64::NAN))]);
        assert!(adam_step(&mut s, &grads, &AdamConfig::default()).is_err());
    }
}
