//! Adam training over prepared samples, with periodic validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, ParamStore, Tape};
use crate::config::DetectorMode;
use crate::error::{Error, Result};
use crate::eval::{instance_ap, ApReport};
use crate::geometry::MapScene;
use crate::losses::LossValues;
use crate::pipeline::{Model, Sample};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub vertex: f64,
    pub dt: f64,
    pub adjacency: f64,
    pub class: f64,
    pub total: f64,
    pub vertices: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_map: Option<f64>,
}

pub fn evaluate(model: &Model, store: &ParamStore, samples: &[Sample]) -> Result<ApReport> {
    let preds = samples
        .iter()
        .map(|s| model.predict_scene(store, s))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<MapScene> = samples.iter().map(|s| s.scene.clone()).collect();
    instance_ap(&preds, &gts, &model.cfg.eval)
}

/// Cosine decay from `lr` at step 1 to `lr_final` at step `steps`.
pub fn cosine_lr(lr: f64, lr_final: f64, step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return lr;
    }
    let t = (step - 1) as f64 / (steps - 1) as f64;
    lr_final + 0.5 * (lr - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Runs `cfg.train.steps` Adam steps on mini-batches drawn without
/// replacement per epoch; `on_log` sees every step.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    train: &[Sample],
    val: &[Sample],
    mut on_log: impl FnMut(&LogEntry),
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data("no training scenes".into()));
    }
    let cfg = &model.cfg.train;
    let mut adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = Vec::new();
    let mut visits = vec![0u64; train.len()];
    for step in 1..=cfg.steps {
        adam.lr = cosine_lr(cfg.lr, cfg.lr_final, step, cfg.steps);
        let mut tape = Tape::new();
        let mut batch_total = None;
        let mut sum = LossValues::default();
        let mut vertices = 0;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            let k = order.pop().expect("refilled");
            visits[k] += 1;
            let fresh;
            let noisy = cfg.resample_noise && model.cfg.model.detector == DetectorMode::Trained;
            let sample = if noisy || cfg.flip_augment {
                fresh = train[k].revisit(&model.cfg, visits[k], cfg.flip_augment)?;
                &fresh
            } else {
                &train[k]
            };
            let l = model.scene_loss(&mut tape, store, sample)?;
            let v = l.terms.values(&tape, l.total);
            sum.vertex += v.vertex;
            sum.dt += v.dt;
            sum.adjacency += v.adjacency;
            sum.class += v.class;
            sum.total += v.total;
            vertices += l.vertices.num_valid();
            batch_total = Some(match batch_total {
                Some(acc) => tape.add(acc, l.total)?,
                None => l.total,
            });
        }
        let b = cfg.batch_size as f64;
        let loss = tape.scale(batch_total.expect("batch_size >= 1"), 1.0 / b)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
        let mut grads = tape.backward(loss)?.params();
        let grad_norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            let k = cfg.grad_clip / grad_norm;
            for g in grads.values_mut() {
                *g = g.map(|x| x * k);
            }
        }
        adam_step(store, &grads, &adam)?;
        let val_map = if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps) && !val.is_empty() {
            Some(evaluate(model, store, val)?.map)
        } else {
            None
        };
        on_log(&LogEntry {
            step,
            vertex: sum.vertex / b,
            dt: sum.dt / b,
            adjacency: sum.adjacency / b,
            class: sum.class / b,
            total: sum.total / b,
            vertices: vertices / cfg.batch_size,
            grad_norm,
            val_map,
        });
    }
    Ok(())
}
