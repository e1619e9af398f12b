//! Minibatch training loop shared by every model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Bound, Graph, ParamStore, SeededRng, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Learning rate decays linearly to `lr * final_lr_frac` over the run.
    pub final_lr_frac: f32,
}

/// Runs `schedule.epochs` shuffled passes over `n` examples. `loss` builds a
/// scalar loss for one batch of example indices on a fresh tape. Returns the
/// mean training loss of every epoch.
pub fn fit<F>(
    store: &mut ParamStore,
    n: usize,
    schedule: &Schedule,
    rng: &mut SeededRng,
    mut loss: F,
) -> Result<Vec<f32>>
where
    F: FnMut(&mut Graph, &Bound, &[usize], &mut SeededRng) -> Result<Var>,
{
    if n == 0 || schedule.batch_size == 0 {
        return Err(Error::Contract("training needs at least one example and a positive batch size".into()));
    }
    let mut adam = Adam::new(AdamConfig { lr: schedule.lr, ..AdamConfig::default() }, store);
    let batches = n.div_ceil(schedule.batch_size);
    let total = (batches * schedule.epochs).max(1) as f32;
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0f64;
        for (b, idx) in order.chunks(schedule.batch_size).enumerate() {
            let progress = (epoch * batches + b) as f32 / total;
            adam.config.lr = schedule.lr * (1.0 - (1.0 - schedule.final_lr_frac) * progress);
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let l = loss(&mut g, &p, idx, rng)?;
            let value = g.value(l).item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("loss {value} at epoch {} batch {b}", epoch + 1)));
            }
            sum += value as f64;
            let mut grads = g.backward(l)?;
            let grads: Vec<_> = p.vars().iter().map(|&v| grads.take(v)).collect();
            if grads.iter().flatten().any(|t| !t.is_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient at epoch {} batch {b}", epoch + 1)));
            }
            adam.step(store, &grads)?;
        }
        let mean = (sum / batches as f64) as f32;
        log::debug!("epoch {} mean loss {mean:.4}", epoch + 1);
        curve.push(mean);
    }
    Ok(curve)
}
