use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps a count outcome to the binary target: 1 iff `y >= threshold`, where
/// the threshold defaults to `t` (every stage effective).
pub fn binarize_outcome(y: u32, t: usize, threshold: Option<u32>) -> Result<u8> {
    if y as usize > t {
        return Err(Error::Domain(format!("outcome {y} outside [0, {t}]")));
    }
    Ok(u8::from(y >= threshold.unwrap_or(t as u32)))
}

/// One stage of a sequential decision problem solved by backward induction.
pub trait StageProblem {
    type Model;

    fn horizon(&self) -> usize;

    /// Fits the stage-`t` Q-function to per-row pseudo outcomes.
    fn fit(&mut self, t: usize, targets: &[f32]) -> Result<Self::Model>;

    /// Per row, Q at the observed action and at the maximizing action.
    fn maximize(&mut self, t: usize, q: &Self::Model) -> Result<Vec<(f32, f32)>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub rows: usize,
    pub target_mean: f32,
    pub target_min: f32,
    pub target_max: f32,
    pub q_original_mean: f32,
    pub q_optimized_mean: f32,
}

#[derive(Clone, Debug)]
pub struct Induction<M> {
    /// Stages in processing order, `T` down to 1.
    pub order: Vec<usize>,
    /// `models[t - 1]` is the stage-`t` Q-function.
    pub models: Vec<M>,
    /// `targets[t - 1]` holds the pseudo outcomes stage `t` was fitted to.
    pub targets: Vec<Vec<f32>>,
    /// Summaries in processing order.
    pub summaries: Vec<StageSummary>,
}

fn mean(xs: &[f32]) -> f32 {
    (xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len().max(1) as f64) as f32
}

/// Fits stages `T..1`. Stage `T` is fitted to `outcomes`; each earlier stage
/// to the Q-values of the next stage at its maximizing actions.
pub fn backward_induction<P: StageProblem>(problem: &mut P, outcomes: &[f32]) -> Result<Induction<P::Model>> {
    let horizon = problem.horizon();
    if horizon == 0 {
        return Err(Error::Contract("horizon must be at least 1".into()));
    }
    let mut values = outcomes.to_vec();
    let mut models: Vec<Option<P::Model>> = (0..horizon).map(|_| None).collect();
    let mut targets = vec![Vec::new(); horizon];
    let mut summaries = Vec::with_capacity(horizon);
    for t in (1..=horizon).rev() {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("stage {t}: pseudo outcome {v} outside [0, 1]")));
        }
        let model = problem.fit(t, &values)?;
        let qs = problem.maximize(t, &model)?;
        if qs.len() != values.len() {
            return Err(Error::Contract(format!("stage {t}: {} Q-values for {} rows", qs.len(), values.len())));
        }
        let (orig, opt): (Vec<f32>, Vec<f32>) = qs.into_iter().unzip();
        summaries.push(StageSummary {
            stage: t,
            rows: values.len(),
            target_mean: mean(&values),
            target_min: values.iter().copied().fold(f32::INFINITY, f32::min),
            target_max: values.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            q_original_mean: mean(&orig),
            q_optimized_mean: mean(&opt),
        });
        log::info!("stage {t}: mean Q original {:.4}, optimized {:.4}", mean(&orig), mean(&opt));
        models[t - 1] = Some(model);
        targets[t - 1] = std::mem::replace(&mut values, opt);
    }
    Ok(Induction {
        order: (1..=horizon).rev().collect(),
        models: models.into_iter().map(|m| m.expect("every stage fitted")).collect(),
        targets,
        summaries,
    })
}
