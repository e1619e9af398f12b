//! Automatic evaluation of refined text: transfer strength under an
//! independent sentence classifier, content similarity, fluency, their
//! geometric and harmonic means, and lexicon-based signal accuracy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::qlearn::{ClassifierConfig, ClassifierTrainConfig, Example, FitReport, StageClassifier};
use crate::repeat::{EncoderDecoderModel, FluencyModel};
use crate::text::SignalGrammar;
use crate::{par, Error, Result};

const NAMESPACE: &str = "eval";

/// Sentence-level judge, trained on every single sentence of the training
/// trajectories and never on refined output.
pub struct EvalClassifier {
    classifier: StageClassifier,
}

impl EvalClassifier {
    pub fn train(
        repeat: &EncoderDecoderModel,
        sentences: &[(String, u8)],
        config: ClassifierConfig,
        train: &ClassifierTrainConfig,
    ) -> Result<(Self, FitReport)> {
        let inputs = par::try_map(sentences, |_, (s, _)| repeat.encode_prompted(s))?;
        let examples: Vec<Example> = inputs
            .into_iter()
            .zip(sentences)
            .map(|(input, (_, label))| Example { input, value: f32::from(*label) })
            .collect();
        let mut classifier = StageClassifier::new(config, train.seed)?;
        let report = classifier.fit(&examples, train)?;
        Ok((Self { classifier }, report))
    }

    pub fn p_positive(&self, repeat: &EncoderDecoderModel, text: &str) -> Result<f32> {
        self.classifier.predict_q(&repeat.encode_prompted(text)?)
    }

    pub fn is_positive(&self, repeat: &EncoderDecoderModel, text: &str) -> Result<bool> {
        Ok(self.p_positive(repeat, text)? >= 0.5)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.classifier.save(path, NAMESPACE)
    }

    pub fn load(path: &Path, config: ClassifierConfig) -> Result<Self> {
        Ok(Self { classifier: StageClassifier::load(path, NAMESPACE, config)? })
    }
}

/// Percentage of outputs the judge labels positive.
pub fn transfer_strength(outputs: &[String], judge: &EvalClassifier, repeat: &EncoderDecoderModel) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Contract("transfer strength of an empty output set".into()));
    }
    let hits = par::try_map(outputs, |_, s| judge.is_positive(repeat, s))?.into_iter().filter(|&p| p).count();
    Ok(100.0 * hits as f64 / outputs.len() as f64)
}

fn mean_pool(t: &Tensor) -> Vec<f64> {
    let mut acc = vec![0.0f64; t.cols()];
    for r in 0..t.rows() {
        acc.iter_mut().zip(t.row(r)).for_each(|(a, &v)| *a += f64::from(v));
    }
    let n = t.rows().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Cosine of mean-pooled encoder states, clamped to [0, 1] and scaled to a
/// percentage. Symmetric in its arguments.
pub fn pair_similarity(repeat: &EncoderDecoderModel, a: &str, b: &str) -> Result<f64> {
    let pa = mean_pool(&repeat.encode(a)?);
    let pb = mean_pool(&repeat.encode(b)?);
    Ok(100.0 * cosine(&pa, &pb).clamp(0.0, 1.0))
}

pub fn similarity(originals: &[String], outputs: &[String], repeat: &EncoderDecoderModel) -> Result<f64> {
    if originals.len() != outputs.len() {
        return Err(Error::Contract(format!("{} originals but {} outputs", originals.len(), outputs.len())));
    }
    if originals.is_empty() {
        return Err(Error::Contract("similarity of an empty set".into()));
    }
    let pairs: Vec<(&String, &String)> = originals.iter().zip(outputs).collect();
    let sims = par::try_map(&pairs, |_, (a, b)| pair_similarity(repeat, a, b))?;
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fluency {
    pub mean_perplexity: f64,
    pub scored: usize,
    /// Empty outputs, which have no perplexity and are left out of the mean.
    pub skipped: usize,
}

pub fn fluency(outputs: &[String], model: &FluencyModel) -> Result<Fluency> {
    let scores =
        par::try_map(outputs, |_, s| if s.trim().is_empty() { Ok(None) } else { model.perplexity(s).map(Some) })?;
    let kept: Vec<f64> = scores.iter().flatten().map(|&p| f64::from(p)).collect();
    let skipped = scores.len() - kept.len();
    if skipped > 0 {
        log::warn!("fluency: skipped {skipped} empty output(s)");
    }
    if kept.is_empty() {
        return Err(Error::Contract("no non-empty outputs to score".into()));
    }
    Ok(Fluency { mean_perplexity: kept.iter().sum::<f64>() / kept.len() as f64, scored: kept.len(), skipped })
}

/// Geometric and harmonic means of similarity, strength and 100/ln(fluency).
pub fn aggregate(similarity: f64, strength: f64, fluency: f64) -> Result<(f64, f64)> {
    for (name, v) in [("similarity", similarity), ("strength", strength)] {
        if !(v > 0.0 && v <= 100.0) {
            return Err(Error::Domain(format!("{name} {v} outside (0, 100]")));
        }
    }
    if !(fluency > std::f64::consts::E) {
        return Err(Error::Domain(format!("fluency {fluency} must exceed e for 100/ln(fluency) to be a percentage")));
    }
    let f = 100.0 / fluency.ln();
    let gm = (similarity * strength * f).cbrt();
    let hm = 3.0 / (1.0 / similarity + 1.0 / strength + 1.0 / f);
    Ok((gm, hm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub similarity: f64,
    pub strength: f64,
    pub fluency: f64,
    pub gm: f64,
    pub hm: f64,
    pub n: usize,
}

impl MetricReport {
    /// A zero similarity or strength gives GM = HM = 0, the limit of both
    /// means; `aggregate` itself rejects zeros.
    pub fn new(similarity: f64, strength: f64, fluency: f64, n: usize) -> Result<Self> {
        let zero = |v: f64| v == 0.0;
        let (gm, hm) = if zero(similarity) || zero(strength) {
            aggregate(100.0, 100.0, fluency)?;
            (0.0, 0.0)
        } else {
            aggregate(similarity, strength, fluency)?
        };
        Ok(Self { similarity, strength, fluency, gm, hm, n })
    }

    /// One results-table row: similarity, strength, fluency, GM, HM.
    pub fn row(&self, label: &str) -> String {
        format!(
            "{label:<12} sim {:>6.1}  str {:>6.1}  flu {:>7.2}  gm {:>6.1}  hm {:>6.1}  (n={})",
            self.similarity, self.strength, self.fluency, self.gm, self.hm, self.n
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalReport {
    pub converted: f64,
    pub deleted: f64,
    pub n: usize,
}

/// Lexicon scan of refined negatives. Converted needs a positive signal and
/// no negative one; deleted only needs the negative signal gone.
pub fn signal_accuracy(refined: &[String], grammar: &SignalGrammar) -> SignalReport {
    let (mut converted, mut deleted) = (0usize, 0usize);
    for text in refined {
        let c = grammar.scan(text);
        if c.negative == 0 {
            deleted += 1;
            if c.positive > 0 {
                converted += 1;
            }
        }
    }
    let n = refined.len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    SignalReport { converted: frac(converted), deleted: frac(deleted), n }
}
