//! Multi-stage episodes, their construction from the grammar, and the JSONL
//! file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grammar::{Polarity, SignalGrammar};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub source: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub stages: Vec<Stage>,
    pub outcome: u32,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Validation(format!("{}: no stages", self.id)));
        }
        if self.outcome as usize > self.horizon() {
            return Err(Error::Validation(format!(
                "{}: outcome {} exceeds stage count {}",
                self.id,
                self.outcome,
                self.horizon()
            )));
        }
        if let Some(l) = self.stages.iter().filter_map(|s| s.label).find(|&l| l > 1) {
            return Err(Error::Validation(format!("{}: stage label {l} is not 0/1", self.id)));
        }
        Ok(())
    }

    /// History available when choosing the action of stage `t` (1-based).
    pub fn history(&self, t: usize, include_source: bool) -> History<'_> {
        assert!(t >= 1 && t <= self.horizon(), "stage {t} out of range");
        History { stages: &self.stages[..t], include_source }
    }
}

/// Read-only view of the texts preceding the action at one stage: the
/// (source, action) pairs of earlier stages, then optionally the current
/// stage's source.
#[derive(Clone, Copy, Debug)]
pub struct History<'a> {
    stages: &'a [Stage],
    include_source: bool,
}

impl<'a> History<'a> {
    pub fn empty() -> Self {
        History { stages: &[], include_source: false }
    }

    pub fn stage(&self) -> usize {
        self.stages.len()
    }

    pub fn texts(&self) -> Vec<&'a str> {
        let Some((current, earlier)) = self.stages.split_last() else {
            return Vec::new();
        };
        let mut out: Vec<&str> = earlier.iter().flat_map(|s| [s.source.as_str(), s.action.as_str()]).collect();
        if self.include_source {
            out.push(&current.source);
        }
        out
    }

    pub fn flatten(&self) -> String {
        self.texts().join(" ")
    }
}

/// Every label pattern of length `t` in lexicographic order with positive
/// first, e.g. (+,+), (+,-), (-,+), (-,-) for two stages.
pub fn label_patterns(t: usize) -> Vec<Vec<Polarity>> {
    (0..1usize << t)
        .map(|bits| {
            (0..t).map(|i| if bits >> (t - 1 - i) & 1 == 0 { Polarity::Positive } else { Polarity::Negative }).collect()
        })
        .collect()
}

fn episode(g: &SignalGrammar, pattern: &[Polarity], rng: &mut SeededRng) -> Vec<Stage> {
    pattern
        .iter()
        .map(|&p| {
            let s = g.generate(p, rng);
            Stage { action: s.text.clone(), source: s.text, label: Some(s.label) }
        })
        .collect()
}

fn finish(mut stages: Vec<Vec<Stage>>, rng: &mut SeededRng) -> Vec<Trajectory> {
    rng.shuffle(&mut stages);
    stages
        .into_iter()
        .enumerate()
        .map(|(i, stages)| {
            let outcome = stages.iter().filter(|s| s.label == Some(1)).count() as u32;
            Trajectory { id: format!("t-{i:06}"), stages, outcome }
        })
        .collect()
}

/// Training set: `x` episodes for every label pattern over `t` stages, in
/// shuffled order. Actions start out equal to sources.
pub fn assemble_trajectories(g: &SignalGrammar, x: usize, t: usize, rng: &mut SeededRng) -> Vec<Trajectory> {
    let mut eps = Vec::with_capacity(x << t);
    for pattern in label_patterns(t) {
        for _ in 0..x {
            eps.push(episode(g, &pattern, rng));
        }
    }
    finish(eps, rng)
}

/// Test set: `y` episodes, each with one negative stage and positives
/// elsewhere. The negative stage is uniform over stages unless
/// `single_stage`, which pins it to stage 1.
pub fn test_trajectories(
    g: &SignalGrammar,
    y: usize,
    t: usize,
    single_stage: bool,
    rng: &mut SeededRng,
) -> Vec<Trajectory> {
    let eps = (0..y)
        .map(|_| {
            let neg = if single_stage { 0 } else { rng.below(t) };
            let pattern: Vec<Polarity> =
                (0..t).map(|i| if i == neg { Polarity::Negative } else { Polarity::Positive }).collect();
            episode(g, &pattern, rng)
        })
        .collect();
    finish(eps, rng)
}

/// Texts for training the Repeat model: plain sentences and the
/// `history SEP action` strings that stage classifiers are built on.
/// Earlier-stage actions are kept (half), flipped, or replaced so the model
/// also sees histories where source and action differ.
pub fn repeat_corpus(g: &SignalGrammar, n: usize, t: usize, include_source: bool, rng: &mut SeededRng) -> Vec<String> {
    let polarity = |rng: &mut SeededRng| if rng.coin() { Polarity::Positive } else { Polarity::Negative };
    (0..n)
        .map(|_| {
            let a = g.generate(polarity(rng), rng).text;
            if rng.below(5) < 2 {
                return a;
            }
            let stage = 1 + rng.below(t);
            let mut parts = Vec::new();
            for _ in 1..stage {
                let l = g.generate(polarity(rng), rng).text;
                let act = match rng.below(4) {
                    0 => g.flip(&l).unwrap_or_else(|| l.clone()),
                    1 => g.generate(polarity(rng), rng).text,
                    _ => l.clone(),
                };
                parts.push(l);
                parts.push(act);
            }
            if include_source {
                parts.push(g.generate(polarity(rng), rng).text);
            }
            parts.push("SEP".into());
            parts.push(a);
            parts.join(" ")
        })
        .collect()
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajs {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        t.validate().map_err(|e| Error::Format { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
        out.push(t);
    }
    Ok(out)
}

/// One training row for a stage classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRow {
    pub history: String,
    pub action: String,
    pub pseudo_value: f32,
}

impl StageRow {
    pub fn pseudo_label(&self) -> u8 {
        u8::from(self.pseudo_value >= 0.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageDataset {
    pub stage: usize,
    pub rows: Vec<StageRow>,
}

impl StageDataset {
    /// Pairs each trajectory's stage-`t` history and action with its pseudo
    /// outcome.
    pub fn new(trajs: &[Trajectory], t: usize, values: &[f32], include_source: bool) -> Result<Self> {
        if trajs.len() != values.len() {
            return Err(Error::Contract(format!("{} trajectories but {} pseudo values", trajs.len(), values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("pseudo value {v} outside [0, 1]")));
        }
        let rows = trajs
            .iter()
            .zip(values)
            .map(|(tr, &v)| StageRow {
                history: tr.history(t, include_source).flatten(),
                action: tr.stages[t - 1].action.clone(),
                pseudo_value: v,
            })
            .collect();
        Ok(Self { stage: t, rows })
    }
}
