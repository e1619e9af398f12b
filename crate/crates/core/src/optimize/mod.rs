//! Gradient ascent on action embeddings, candidate selection and decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::derive_seed;
use crate::numerics::{SeededRng, Tensor};
use crate::qlearn::{build_stage_input, StageClassifier, StageInput};
use crate::repeat::{DecodeConfig, EncoderDecoderModel, FluencyModel};
use crate::text::edit_distance;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Decode every improving iterate and keep the most fluent.
    #[default]
    NllBest,
    /// Decode only the final iterate.
    LastIterate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AscentConfig {
    /// Iterations for stage `t` are `iterations[t - 1]`; later stages reuse
    /// the last entry.
    pub iterations: Vec<usize>,
    pub step_size: f32,
    pub selection: SelectionMode,
    pub seed: u64,
    /// Classifier dropout while computing ascent gradients. This is what makes
    /// different seeds take different paths.
    pub dropout: bool,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self { iterations: vec![15, 10], step_size: 24.0, selection: SelectionMode::NllBest, seed: 0, dropout: true }
    }
}

impl AscentConfig {
    pub fn iterations_for(&self, t: usize) -> usize {
        self.iterations.get(t.saturating_sub(1)).or(self.iterations.last()).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size {} must be positive", self.step_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub action: Tensor,
    /// Dropout-free P(y+) at this iterate.
    pub p: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscentTrace {
    pub snapshots: Vec<Snapshot>,
    /// A non-finite gradient or iterate stopped the run early.
    pub truncated: bool,
}

/// `iterations` steps of `e <- e + step * grad log P(y+)` on the action rows.
/// Snapshot 0 is the unmodified block.
pub fn ascend(
    f: &StageClassifier,
    input: &StageInput,
    iterations: usize,
    cfg: &AscentConfig,
    rng: &mut SeededRng,
) -> Result<AscentTrace> {
    cfg.validate()?;
    let prefix = input.prefix();
    let mut action = input.action();
    let p0 = f.predict_q(&input.memory)?;
    let mut snapshots = vec![Snapshot { iteration: 0, action: action.clone(), p: p0 }];
    let mut truncated = false;
    for it in 1..=iterations {
        let (_, grad) = f.action_gradient(Some(&prefix), &action, cfg.dropout.then_some(&mut *rng))?;
        if !grad.is_finite() {
            truncated = true;
            break;
        }
        let mut next = action.clone();
        next.data_mut().iter_mut().zip(grad.data()).for_each(|(e, g)| *e += cfg.step_size * g);
        let p = f.predict_q(&input.with_action(&next)?)?;
        if !next.is_finite() || !p.is_finite() {
            truncated = true;
            break;
        }
        snapshots.push(Snapshot { iteration: it, action: next.clone(), p });
        action = next;
    }
    Ok(AscentTrace { snapshots, truncated })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Index into the trace; 0 means the original action was kept.
    pub snapshot: usize,
    pub text: String,
    pub nll: f32,
    /// Decoding of the chosen iterate needed the no-SEP fallback.
    pub fallback: bool,
    /// The chosen iterate decoded without reaching EOS.
    pub no_eos: bool,
}

/// Picks among iterates that raised P(y+). With no usable candidate the
/// original text is returned with `snapshot == 0`.
pub fn select_candidate(
    trace: &AscentTrace,
    input: &StageInput,
    original: &str,
    repeat: &EncoderDecoderModel,
    fluency: &FluencyModel,
    mode: SelectionMode,
    decode: &DecodeConfig,
) -> Result<Selection> {
    let p0 = trace.snapshots.first().ok_or_else(|| Error::Contract("empty ascent trace".into()))?.p;
    let improving: Vec<usize> = (1..trace.snapshots.len()).filter(|&i| trace.snapshots[i].p > p0).collect();
    let pool: Vec<usize> = match mode {
        SelectionMode::NllBest => improving,
        SelectionMode::LastIterate => {
            improving.last().filter(|&&i| i == trace.snapshots.len() - 1).copied().into_iter().collect()
        }
    };
    let (history, sep) = (input.history_rows(), input.sep_row());
    let mut best: Option<Selection> = None;
    for i in pool {
        let out = repeat.decode_split(Some(&history), &sep, &trace.snapshots[i].action, decode)?;
        if out.action.is_empty() || repeat.vocab().tokenize(&out.action).is_err() {
            continue;
        }
        let nll = fluency.nll(&out.action)?;
        if best.as_ref().is_none_or(|b| nll < b.nll) {
            best =
                Some(Selection { snapshot: i, text: out.action, nll, fallback: out.fallback, no_eos: !out.finished });
        }
    }
    match best {
        Some(s) => Ok(s),
        None => Ok(Selection {
            snapshot: 0,
            text: original.to_string(),
            nll: fluency.nll(original)?,
            fallback: false,
            no_eos: false,
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementResult {
    pub original: String,
    pub refined: String,
    pub p_before: f32,
    /// Q of the refined text, re-encoded in its history.
    pub p_after: f32,
    /// P(y+) at the chosen ascent iterate, before decoding.
    pub p_iterate: f32,
    pub nll: f32,
    pub edit_distance: usize,
    pub iterations: usize,
    /// Ascent iterate the refined text was decoded from; 0 for the original.
    pub snapshot: usize,
    pub no_eos: bool,
    pub no_improvement: bool,
    /// The decoded text scored below the original and was discarded.
    pub rejected: bool,
    pub fallback: bool,
    pub truncated: bool,
}

/// Everything a refinement needs besides the texts.
#[derive(Clone, Copy)]
pub struct Refiner<'a> {
    pub classifier: &'a StageClassifier,
    pub repeat: &'a EncoderDecoderModel,
    pub fluency: &'a FluencyModel,
    pub ascent: &'a AscentConfig,
    pub decode: &'a DecodeConfig,
}

impl Refiner<'_> {
    /// Encode, ascend, select, decode, then re-score the decoded text. A
    /// refinement that lowers Q is rejected. `seed` fixes the dropout stream.
    pub fn refine(&self, history: &str, action: &str, stage: usize, seed: u64) -> Result<RefinementResult> {
        let input = build_stage_input(self.repeat, history, action)?;
        self.refine_input(history, &input, action, stage, seed)
    }

    /// `refine` with the encoding of (history, action) already computed.
    pub fn refine_input(
        &self,
        history: &str,
        input: &StageInput,
        action: &str,
        stage: usize,
        seed: u64,
    ) -> Result<RefinementResult> {
        let mut rng = SeededRng::new(seed);
        let iterations = self.ascent.iterations_for(stage);
        let trace = ascend(self.classifier, input, iterations, self.ascent, &mut rng)?;
        let sel =
            select_candidate(&trace, input, action, self.repeat, self.fluency, self.ascent.selection, self.decode)?;
        let p_before = trace.snapshots[0].p;
        let p_iterate = trace.snapshots[sel.snapshot].p;
        let scored = if sel.snapshot == 0 || sel.text == action {
            None
        } else {
            Some(self.classifier.predict_q(&build_stage_input(self.repeat, history, &sel.text)?.memory)?)
        };
        let rejected = scored.is_some_and(|q| q < p_before);
        let (refined, p_after, nll) = match scored {
            Some(q) if !rejected => (sel.text, q, sel.nll),
            _ if sel.text == action => (sel.text, p_before, sel.nll),
            _ => (action.to_string(), p_before, self.fluency.nll(action)?),
        };
        Ok(RefinementResult {
            original: action.to_string(),
            edit_distance: edit_distance(action, &refined),
            no_improvement: refined == action,
            refined,
            p_before,
            p_after,
            p_iterate,
            nll,
            iterations: trace.snapshots.len() - 1,
            snapshot: sel.snapshot,
            no_eos: sel.no_eos,
            rejected,
            fallback: sel.fallback,
            truncated: trace.truncated,
        })
    }

    /// Two refinements under `seed` and a derived seed; keeps the higher
    /// P(y+), then the smaller edit distance, then the first.
    pub fn tts(&self, history: &str, action: &str, stage: usize, seed: u64) -> Result<RefinementResult> {
        let input = build_stage_input(self.repeat, history, action)?;
        let a = self.refine_input(history, &input, action, stage, seed)?;
        let b = self.refine_input(history, &input, action, stage, derive_seed(seed, 1))?;
        Ok(pick_tts(a, b))
    }
}

/// TTS rule on two finished refinements.
pub fn pick_tts(a: RefinementResult, b: RefinementResult) -> RefinementResult {
    if (a.p_after - b.p_after).abs() > 1e-4 {
        return if b.p_after > a.p_after { b } else { a };
    }
    if b.edit_distance < a.edit_distance {
        b
    } else {
        a
    }
}
