use serde::{Deserialize, Serialize};

use super::classifier::{ClassifierConfig, ClassifierTrainConfig, Example, FitReport, StageClassifier};
use super::induction::{backward_induction, binarize_outcome, Induction, StageProblem};
use super::input::{build_stage_input, StageInput};
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, stream_key};
use crate::optimize::{AscentConfig, RefinementResult, Refiner};
use crate::par;
use crate::repeat::{DecodeConfig, EncoderDecoderModel, FluencyModel};
use crate::text::Trajectory;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InductionConfig {
    pub classifier: ClassifierConfig,
    pub train: ClassifierTrainConfig,
    pub ascent: AscentConfig,
    pub decode: DecodeConfig,
    /// Append the current stage's source text to the history.
    pub include_source: bool,
    /// Count at or above which an outcome is positive; defaults to T.
    pub outcome_threshold: Option<u32>,
}

/// Per-row seed for stage `t` refinements.
pub fn row_seed(seed: u64, id: &str, t: usize) -> u64 {
    derive_seed(seed ^ stream_key(id), t as u64)
}

type StageHook<'a> = Box<dyn FnMut(usize, &StageClassifier, &FitReport, &[RefinementResult]) -> Result<()> + 'a>;

/// Backward induction over text trajectories with classifier Q-functions and
/// embedding-space maximization.
pub struct TextInduction<'a> {
    trajectories: &'a [Trajectory],
    repeat: &'a EncoderDecoderModel,
    fluency: &'a FluencyModel,
    cfg: &'a InductionConfig,
    inputs: Vec<StageInput>,
    /// Fit reports and refinements of finished stages, in processing order.
    pub reports: Vec<(usize, FitReport)>,
    pub refinements: Vec<(usize, Vec<RefinementResult>)>,
    on_stage: StageHook<'a>,
}

impl<'a> TextInduction<'a> {
    pub fn new(
        trajectories: &'a [Trajectory],
        repeat: &'a EncoderDecoderModel,
        fluency: &'a FluencyModel,
        cfg: &'a InductionConfig,
    ) -> Self {
        Self {
            trajectories,
            repeat,
            fluency,
            cfg,
            inputs: Vec::new(),
            reports: Vec::new(),
            refinements: Vec::new(),
            on_stage: Box::new(|_, _, _, _| Ok(())),
        }
    }

    /// Called after each stage finishes, e.g. to persist its artifacts.
    pub fn on_stage(
        mut self,
        f: impl FnMut(usize, &StageClassifier, &FitReport, &[RefinementResult]) -> Result<()> + 'a,
    ) -> Self {
        self.on_stage = Box::new(f);
        self
    }

    fn horizon_checked(&self) -> Result<usize> {
        let t = self
            .trajectories
            .first()
            .map(Trajectory::horizon)
            .ok_or_else(|| Error::Validation("no trajectories".into()))?;
        if let Some(bad) = self.trajectories.iter().find(|tr| tr.horizon() != t) {
            return Err(Error::Validation(format!("{} has {} stages, expected {t}", bad.id, bad.horizon())));
        }
        Ok(t)
    }
}

impl StageProblem for TextInduction<'_> {
    type Model = StageClassifier;

    fn horizon(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::horizon)
    }

    fn fit(&mut self, t: usize, targets: &[f32]) -> Result<StageClassifier> {
        let (repeat, include) = (self.repeat, self.cfg.include_source);
        self.inputs = par::try_map(self.trajectories, |_, tr| {
            build_stage_input(repeat, &tr.history(t, include).flatten(), &tr.stages[t - 1].action)
        })?;
        let examples: Vec<Example> =
            self.inputs.iter().zip(targets).map(|(i, &value)| Example { input: i.memory.clone(), value }).collect();
        let seed = derive_seed(self.cfg.train.seed, t as u64);
        let mut f = StageClassifier::new(self.cfg.classifier.clone(), seed)?;
        let train = ClassifierTrainConfig { seed, ..self.cfg.train.clone() };
        let report = f.fit(&examples, &train).map_err(|e| Error::Validation(format!("stage {t}: {e}")))?;
        log::info!("stage {t}: classifier train accuracy {:.3}", report.train_accuracy);
        self.reports.push((t, report));
        Ok(f)
    }

    fn maximize(&mut self, t: usize, f: &StageClassifier) -> Result<Vec<(f32, f32)>> {
        let refiner = Refiner {
            classifier: f,
            repeat: self.repeat,
            fluency: self.fluency,
            ascent: &self.cfg.ascent,
            decode: &self.cfg.decode,
        };
        let seed = self.cfg.ascent.seed;
        let rows: Vec<(&Trajectory, &StageInput)> = self.trajectories.iter().zip(&self.inputs).collect();
        let include = self.cfg.include_source;
        let results = par::try_map(&rows, |_, (tr, input)| {
            let history = tr.history(t, include).flatten();
            refiner.refine_input(&history, input, &tr.stages[t - 1].action, t, row_seed(seed, &tr.id, t))
        })?;
        let report = &self.reports.last().expect("fit precedes maximize").1;
        (self.on_stage)(t, f, report, &results)?;
        let qs = results.iter().map(|r| (r.p_before, r.p_after)).collect();
        self.refinements.push((t, results));
        Ok(qs)
    }
}

/// Binarizes outcomes and runs backward induction over `trajectories`.
pub fn run_backward_induction(problem: &mut TextInduction<'_>) -> Result<Induction<StageClassifier>> {
    let t = problem.horizon_checked()?;
    let threshold = problem.cfg.outcome_threshold;
    let outcomes = problem
        .trajectories
        .iter()
        .map(|tr| binarize_outcome(tr.outcome, t, threshold).map(f32::from))
        .collect::<Result<Vec<_>>>()?;
    backward_induction(problem, &outcomes)
}
