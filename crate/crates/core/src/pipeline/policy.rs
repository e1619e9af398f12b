use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::EvalClassifier;
use crate::optimize::{RefinementResult, Refiner};
use crate::qlearn::{row_seed, InductionConfig, StageClassifier};
use crate::repeat::{EncoderDecoderModel, FluencyModel};
use crate::text::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedStage {
    pub source: String,
    pub original: String,
    /// The text that stands as this stage's action after the policy ran.
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub judged_negative: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<RefinementResult>,
    /// Set when refinement failed; the original action was kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedTrajectory {
    pub id: String,
    pub outcome: u32,
    pub stages: Vec<RefinedStage>,
}

impl RefinedTrajectory {
    /// Stages whose action was rewritten by the policy.
    pub fn rewritten(&self) -> impl Iterator<Item = (&RefinedStage, &RefinementResult)> {
        self.stages.iter().filter_map(|s| s.refinement.as_ref().map(|r| (s, r)))
    }
}

/// Learned per-stage policies applied forward in time: stage `t` sees the
/// already refined actions of stages before it.
pub struct Policy<'a> {
    pub classifiers: &'a [StageClassifier],
    pub repeat: &'a EncoderDecoderModel,
    pub fluency: &'a FluencyModel,
    /// With no judge every stage is refined.
    pub judge: Option<&'a EvalClassifier>,
    pub induction: &'a InductionConfig,
    pub tts: bool,
    pub seed: u64,
}

impl Policy<'_> {
    pub fn apply(&self, tr: &Trajectory) -> Result<RefinedTrajectory> {
        let mut current = tr.clone();
        let mut stages = Vec::with_capacity(tr.horizon());
        for t in 1..=tr.horizon() {
            let original = tr.stages[t - 1].action.clone();
            let judged_negative = match self.judge {
                Some(j) => !j.is_positive(self.repeat, &original)?,
                None => true,
            };
            let mut stage = RefinedStage {
                source: tr.stages[t - 1].source.clone(),
                output: original.clone(),
                original,
                label: tr.stages[t - 1].label,
                judged_negative,
                refinement: None,
                error: None,
            };
            if judged_negative {
                match self.refine(&current, t) {
                    Ok(r) => {
                        stage.output = r.refined.clone();
                        current.stages[t - 1].action = r.refined.clone();
                        stage.refinement = Some(r);
                    }
                    Err(e) => {
                        log::warn!("{} stage {t}: refinement failed, keeping the original: {e}", tr.id);
                        stage.error = Some(e.to_string());
                    }
                }
            }
            stages.push(stage);
        }
        Ok(RefinedTrajectory { id: tr.id.clone(), outcome: tr.outcome, stages })
    }

    fn refine(&self, tr: &Trajectory, t: usize) -> Result<RefinementResult> {
        let classifier = &self.classifiers[t - 1];
        let refiner = Refiner {
            classifier,
            repeat: self.repeat,
            fluency: self.fluency,
            ascent: &self.induction.ascent,
            decode: &self.induction.decode,
        };
        let history = tr.history(t, self.induction.include_source).flatten();
        let action = &tr.stages[t - 1].action;
        let seed = row_seed(self.seed, &tr.id, t);
        if self.tts {
            refiner.tts(&history, action, t, seed)
        } else {
            refiner.refine(&history, action, t, seed)
        }
    }
}
