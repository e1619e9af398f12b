//! End-to-end runs: data generation, model training, backward induction,
//! test-time refinement and evaluation, with every artifact recorded in a run
//! manifest so completed phases are skipped on rerun.

mod config;
mod manifest;
mod policy;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::{DataConfig, EvalSection, FluencySection, Paths, PipelineConfig, RepeatSection, Variant};
pub use manifest::{PhaseRecord, RunManifest};
pub use policy::{Policy, RefinedStage, RefinedTrajectory};

use crate::error::{Error, Result};
use crate::eval::{self, EvalClassifier, MetricReport, SignalReport};
use crate::numerics::rng::{derive_seed, stream_key};
use crate::numerics::SeededRng;
use crate::optimize::RefinementResult;
use crate::par;
use crate::qlearn::{run_backward_induction, FitReport, InductionConfig, StageClassifier, StageSummary, TextInduction};
use crate::repeat::{EncoderDecoderModel, FluencyModel, RepeatTrainConfig};
use crate::text::{
    assemble_trajectories, read_trajectories, repeat_corpus, test_trajectories, write_trajectories, Polarity,
    SignalGrammar, Trajectory, Vocabulary,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseStatus {
    Ran,
    /// Already complete under the same configuration.
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub reconstruction: f64,
    pub holdout: usize,
    pub losses: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluencyReport {
    pub train_perplexity: f64,
    pub holdout_perplexity: f64,
    pub losses: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub summary: StageSummary,
    pub fit: FitReport,
}

/// Written by `train-q`: stages in processing order with their statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InductionManifest {
    pub order: Vec<usize>,
    pub train_seed: u64,
    pub ascent_seed: u64,
    pub stages: Vec<StageRecord>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// One run directory and its configuration.
pub struct Run {
    root: PathBuf,
    cfg: PipelineConfig,
    force: bool,
}

impl Run {
    pub fn new(root: impl Into<PathBuf>, cfg: PipelineConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        let run = Self { root: root.into(), cfg, force };
        for dir in [run.data_dir(), run.checkpoint_dir(), run.variant_dir()] {
            create_dir(&dir)?;
        }
        Ok(run)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join(&self.cfg.paths.data_dir)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join(&self.cfg.paths.checkpoint_dir)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join(&self.cfg.paths.report_dir)
    }

    /// Reports that depend on the variant.
    pub fn variant_dir(&self) -> PathBuf {
        self.report_dir().join(self.cfg.variant.name())
    }

    pub fn train_path(&self) -> PathBuf {
        self.data_dir().join("train.jsonl")
    }

    /// Base and TTS share one test set so their reports are comparable.
    pub fn test_path(&self) -> PathBuf {
        match self.cfg.variant {
            Variant::OneStage => self.data_dir().join("test-one-stage.jsonl"),
            _ => self.data_dir().join("test.jsonl"),
        }
    }

    pub fn refined_path(&self) -> PathBuf {
        self.variant_dir().join("refined.jsonl")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.variant_dir().join("metrics.json")
    }

    pub fn signal_path(&self) -> PathBuf {
        self.variant_dir().join("signal.json")
    }

    fn repeat_dir(&self) -> PathBuf {
        self.checkpoint_dir().join("repeat")
    }

    fn fluency_dir(&self) -> PathBuf {
        self.checkpoint_dir().join("fluency")
    }

    fn classifier_path(&self, t: usize) -> PathBuf {
        self.checkpoint_dir().join("qf").join(format!("stage{t}.ntck"))
    }

    fn judge_path(&self) -> PathBuf {
        self.checkpoint_dir().join("eval.ntck")
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    /// Seed of one named phase, derived from the global seed.
    pub fn seed(&self, phase: &str) -> u64 {
        derive_seed(self.cfg.seed, stream_key(phase))
    }

    pub fn grammar(&self) -> SignalGrammar {
        SignalGrammar::new(self.cfg.data.pair_mode)
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned()
    }

    fn phase(&self, name: &str, body: impl FnOnce() -> Result<Vec<PathBuf>>) -> Result<PhaseStatus> {
        let hash = self.cfg.hash();
        if !self.force && RunManifest::open(&self.manifest_path(), &hash)?.is_complete(name, &self.root) {
            log::debug!("{name}: already complete for this configuration");
            return Ok(PhaseStatus::Skipped);
        }
        let artifacts = body()?;
        let mut m = RunManifest::open(&self.manifest_path(), &hash)?;
        m.record(name, artifacts.iter().map(|p| self.relative(p)).collect());
        m.save(&self.manifest_path())?;
        Ok(PhaseStatus::Ran)
    }

    fn train_data(&self) -> Result<Vec<Trajectory>> {
        let path = self.train_path();
        if !path.exists() {
            return Err(Error::Validation(format!("{} not found; run gen-data first", path.display())));
        }
        read_trajectories(&path)
    }

    pub fn gen_data(&self) -> Result<PhaseStatus> {
        self.phase("gen-data", || {
            let g = self.grammar();
            let d = &self.cfg.data;
            let train =
                assemble_trajectories(&g, d.x_per_combo, d.horizon, &mut SeededRng::new(self.seed("data/train")));
            let test =
                test_trajectories(&g, d.test_negatives, d.horizon, false, &mut SeededRng::new(self.seed("data/test")));
            let one = test_trajectories(
                &g,
                d.test_negatives,
                d.horizon,
                true,
                &mut SeededRng::new(self.seed("data/test-one-stage")),
            );
            let paths =
                [self.train_path(), self.data_dir().join("test.jsonl"), self.data_dir().join("test-one-stage.jsonl")];
            write_trajectories(&paths[0], &train)?;
            write_trajectories(&paths[1], &test)?;
            write_trajectories(&paths[2], &one)?;
            let config_path = self.root.join("config.toml");
            std::fs::write(&config_path, self.cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
            log::info!("gen-data: {} train and {} test trajectories", train.len(), test.len());
            Ok(paths.into_iter().chain([config_path]).collect())
        })
    }

    /// Vocabulary of the configured grammar; every training text must be in it.
    fn vocabulary(&self, data: &[Trajectory]) -> Result<Vocabulary> {
        let vocab = Vocabulary::build(&self.grammar().words());
        for tr in data {
            for s in &tr.stages {
                for text in [&s.source, &s.action] {
                    vocab.tokenize(text).map_err(|e| Error::Validation(format!("{}: {e}", tr.id)))?;
                }
            }
        }
        Ok(vocab)
    }

    fn holdout(&self) -> Vec<String> {
        let mut rng = SeededRng::new(self.seed("holdout"));
        let g = self.grammar();
        (0..self.cfg.data.holdout).map(|i| g.generate(Polarity::from_label((i % 2) as u8), &mut rng).text).collect()
    }

    pub fn train_repeat(&self) -> Result<PhaseStatus> {
        self.phase("train-repeat", || {
            let data = self.train_data()?;
            let vocab = self.vocabulary(&data)?;
            let d = &self.cfg.data;
            let corpus = repeat_corpus(
                &self.grammar(),
                d.repeat_corpus,
                d.horizon,
                self.cfg.induction.include_source,
                &mut SeededRng::new(self.seed("repeat/corpus")),
            );
            let mut model = EncoderDecoderModel::new(vocab, self.cfg.repeat.model.clone(), self.seed("repeat/init"))?;
            let train = RepeatTrainConfig { seed: self.seed("repeat/train"), ..self.cfg.repeat.train.clone() };
            let losses = model.train(&corpus, &train)?;
            let held = self.holdout();
            let decode = self.cfg.induction.decode;
            let ok = par::try_map(&held, |_, s| model.reconstructs(s, &decode))?.into_iter().filter(|&b| b).count();
            let reconstruction = ok as f64 / held.len().max(1) as f64;
            println!("train-repeat: held-out reconstruction {ok}/{} = {reconstruction:.3}", held.len());
            create_dir(&self.repeat_dir())?;
            model.save(&self.repeat_dir())?;
            let report = self.report_dir().join("repeat.json");
            write_json(&report, &RepeatReport { reconstruction, holdout: held.len(), losses })?;
            Ok(vec![self.repeat_dir().join("repeat.ntck"), self.repeat_dir().join("repeat.json"), report])
        })
    }

    pub fn train_fluency(&self) -> Result<PhaseStatus> {
        self.phase("train-fluency", || {
            let data = self.train_data()?;
            let vocab = self.vocabulary(&data)?;
            let sentences: Vec<String> = data.iter().flat_map(|t| t.stages.iter().map(|s| s.source.clone())).collect();
            let seed = self.seed("fluency");
            let mut model = FluencyModel::new(vocab, self.cfg.fluency.model.clone(), seed)?;
            let losses = model.train(&sentences, &self.cfg.fluency.schedule, seed)?;
            let train_perplexity = eval::fluency(&sentences, &model)?.mean_perplexity;
            let holdout_perplexity = eval::fluency(&self.holdout(), &model)?.mean_perplexity;
            println!("train-fluency: perplexity train {train_perplexity:.3}, held-out {holdout_perplexity:.3}");
            create_dir(&self.fluency_dir())?;
            model.save(&self.fluency_dir())?;
            let report = self.report_dir().join("fluency.json");
            write_json(&report, &FluencyReport { train_perplexity, holdout_perplexity, losses })?;
            Ok(vec![self.fluency_dir().join("fluency.ntck"), self.fluency_dir().join("fluency.json"), report])
        })
    }

    pub fn load_repeat(&self) -> Result<EncoderDecoderModel> {
        let dir = self.repeat_dir();
        if !dir.join("repeat.json").exists() {
            return Err(Error::Checkpoint(format!("{} has no Repeat model; run train-repeat first", dir.display())));
        }
        EncoderDecoderModel::load(&dir)
    }

    pub fn load_fluency(&self, repeat: &EncoderDecoderModel) -> Result<FluencyModel> {
        let dir = self.fluency_dir();
        if !dir.join("fluency.json").exists() {
            return Err(Error::Checkpoint(format!("{} has no fluency model; run train-fluency first", dir.display())));
        }
        let model = FluencyModel::load(&dir)?;
        if model.vocab().fingerprint() != repeat.vocab().fingerprint() {
            return Err(Error::Checkpoint("fluency and Repeat vocabularies differ".into()));
        }
        Ok(model)
    }

    /// Induction settings with seeds derived from the global seed.
    pub fn induction_config(&self) -> InductionConfig {
        let mut c = self.cfg.induction.clone();
        c.train.seed = self.seed("q/train");
        c.ascent.seed = self.seed("q/ascent");
        c
    }

    pub fn train_q(&self) -> Result<PhaseStatus> {
        self.phase("train-q", || {
            let data = self.train_data()?;
            let repeat = self.load_repeat()?;
            let fluency = self.load_fluency(&repeat)?;
            self.vocabulary(&data)?;
            create_dir(&self.classifier_path(1).with_file_name(""))?;
            let cfg = self.induction_config();
            let mut artifacts = Vec::new();
            let mut problem = TextInduction::new(&data, &repeat, &fluency, &cfg).on_stage(|t, f, fit, results| {
                let ckpt = self.classifier_path(t);
                f.save(&ckpt, &format!("qf/stage{t}"))?;
                let refined = self.report_dir().join(format!("refine_stage{t}.jsonl"));
                write_jsonl(&refined, results)?;
                println!(
                    "train-q: stage {t} fitted (accuracy {:.3}), {} actions refined",
                    fit.train_accuracy,
                    results.iter().filter(|r| r.refined != r.original).count()
                );
                artifacts.push(ckpt);
                artifacts.push(refined);
                Ok(())
            });
            let induction = run_backward_induction(&mut problem).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("backward induction: {m}")),
                other => other,
            })?;
            let reports = std::mem::take(&mut problem.reports);
            drop(problem);
            let stages = induction
                .summaries
                .iter()
                .cloned()
                .zip(reports.into_iter().map(|(_, r)| r))
                .map(|(summary, fit)| StageRecord { summary, fit })
                .collect();
            let manifest = self.report_dir().join("induction.json");
            write_json(
                &manifest,
                &InductionManifest {
                    order: induction.order.clone(),
                    train_seed: cfg.train.seed,
                    ascent_seed: cfg.ascent.seed,
                    stages,
                },
            )?;
            artifacts.push(manifest);
            Ok(artifacts)
        })
    }

    pub fn load_classifiers(&self) -> Result<Vec<StageClassifier>> {
        (1..=self.cfg.data.horizon)
            .map(|t| {
                let path = self.classifier_path(t);
                if !path.exists() {
                    return Err(Error::Checkpoint(format!("{} missing; run train-q first", path.display())));
                }
                StageClassifier::load(&path, &format!("qf/stage{t}"), self.cfg.induction.classifier.clone())
            })
            .collect()
    }

    /// The evaluation classifier, trained on first use.
    pub fn judge(&self, repeat: &EncoderDecoderModel) -> Result<EvalClassifier> {
        self.phase("eval-classifier", || {
            let data = self.train_data()?;
            let sentences: Vec<(String, u8)> = data
                .iter()
                .flat_map(|t| t.stages.iter())
                .map(|s| {
                    s.label
                        .map(|l| (s.source.clone(), l))
                        .ok_or_else(|| Error::Validation("training stage without a label".into()))
                })
                .collect::<Result<_>>()?;
            let train = crate::qlearn::ClassifierTrainConfig {
                seed: self.seed("eval/judge"),
                ..self.cfg.eval.classifier.clone()
            };
            let (judge, fit) =
                EvalClassifier::train(repeat, &sentences, self.cfg.induction.classifier.clone(), &train)?;
            println!("eval: judge trained on {} sentences (accuracy {:.3})", sentences.len(), fit.train_accuracy);
            judge.save(&self.judge_path())?;
            Ok(vec![self.judge_path()])
        })?;
        EvalClassifier::load(&self.judge_path(), self.cfg.induction.classifier.clone())
    }

    pub fn refine(&self) -> Result<PhaseStatus> {
        let name = format!("refine:{}", self.cfg.variant.name());
        self.phase(&name, || {
            let path = self.test_path();
            if !path.exists() {
                return Err(Error::Validation(format!("{} not found; run gen-data first", path.display())));
            }
            let test = read_trajectories(&path)?;
            let repeat = self.load_repeat()?;
            let fluency = self.load_fluency(&repeat)?;
            let classifiers = self.load_classifiers()?;
            if let Some(tr) = test.iter().find(|t| t.horizon() != classifiers.len()) {
                return Err(Error::Validation(format!(
                    "{} has {} stages, the policy has {}",
                    tr.id,
                    tr.horizon(),
                    classifiers.len()
                )));
            }
            let judge = if self.cfg.eval.refine_all_stages { None } else { Some(self.judge(&repeat)?) };
            let cfg = self.induction_config();
            let policy = Policy {
                classifiers: &classifiers,
                repeat: &repeat,
                fluency: &fluency,
                judge: judge.as_ref(),
                induction: &cfg,
                tts: self.cfg.variant == Variant::Tts,
                seed: self.seed("refine"),
            };
            let refined = par::try_map(&test, |_, tr| policy.apply(tr))?;
            let out = self.refined_path();
            write_jsonl(&out, &refined)?;
            let n: usize = refined.iter().map(|r| r.rewritten().count()).sum();
            println!(
                "refine ({}): {n} stages rewritten across {} trajectories",
                self.cfg.variant.name(),
                refined.len()
            );
            Ok(vec![out])
        })
    }

    pub fn eval(&self) -> Result<PhaseStatus> {
        let name = format!("eval:{}", self.cfg.variant.name());
        self.phase(&name, || {
            let path = self.refined_path();
            if !path.exists() {
                return Err(Error::Validation(format!("{} not found; run refine first", path.display())));
            }
            let refined: Vec<RefinedTrajectory> = read_jsonl(&path)?;
            let repeat = self.load_repeat()?;
            let fluency = self.load_fluency(&repeat)?;
            let judge = self.judge(&repeat)?;
            let (metrics, signal) = evaluate(&refined, &self.grammar(), &repeat, &fluency, &judge)?;
            write_json(&self.metrics_path(), &metrics)?;
            write_json(&self.signal_path(), &signal)?;
            println!("{}", metrics.row(self.cfg.variant.name()));
            println!("signal: converted {:.3}, deleted {:.3} (n={})", signal.converted, signal.deleted, signal.n);
            Ok(vec![self.metrics_path(), self.signal_path()])
        })
    }

    /// Every phase in order.
    pub fn run_all(&self) -> Result<()> {
        self.gen_data()?;
        self.train_repeat()?;
        self.train_fluency()?;
        self.train_q()?;
        self.refine()?;
        self.eval()?;
        Ok(())
    }

    /// Human-readable summary of whatever reports exist.
    pub fn report(&self) -> Result<String> {
        let mut out = String::new();
        let rd = self.report_dir();
        if let Ok(r) = read_json::<RepeatReport>(&rd.join("repeat.json")) {
            out += &format!("repeat: held-out reconstruction {:.3} (n={})\n", r.reconstruction, r.holdout);
        }
        if let Ok(r) = read_json::<FluencyReport>(&rd.join("fluency.json")) {
            out +=
                &format!("fluency: perplexity train {:.3}, held-out {:.3}\n", r.train_perplexity, r.holdout_perplexity);
        }
        if let Ok(m) = read_json::<InductionManifest>(&rd.join("induction.json")) {
            for s in &m.stages {
                let q = &s.summary;
                out += &format!(
                    "stage {}: rows {}, target mean {:.3}, Q original {:.3} -> optimized {:.3}, train accuracy {:.3}\n",
                    q.stage, q.rows, q.target_mean, q.q_original_mean, q.q_optimized_mean, s.fit.train_accuracy
                );
            }
        }
        for v in [Variant::Base, Variant::Tts, Variant::OneStage] {
            let dir = rd.join(v.name());
            if let Ok(m) = read_json::<MetricReport>(&dir.join("metrics.json")) {
                out += &m.row(v.name());
                out.push('\n');
            }
            if let Ok(s) = read_json::<SignalReport>(&dir.join("signal.json")) {
                out += &format!("{:<12} converted {:.3}  deleted {:.3}  (n={})\n", "", s.converted, s.deleted, s.n);
            }
        }
        if out.is_empty() {
            return Err(Error::Validation(format!("no reports under {}", rd.display())));
        }
        Ok(out)
    }
}

/// Metric and signal reports over every rewritten stage. Signal accuracy is
/// scored on the stages that were negative in the data.
pub fn evaluate(
    refined: &[RefinedTrajectory],
    grammar: &SignalGrammar,
    repeat: &EncoderDecoderModel,
    fluency: &FluencyModel,
    judge: &EvalClassifier,
) -> Result<(MetricReport, SignalReport)> {
    let rewritten: Vec<&RefinementResult> = refined.iter().flat_map(|t| t.rewritten().map(|(_, r)| r)).collect();
    if rewritten.is_empty() {
        return Err(Error::Validation("no rewritten stages to evaluate".into()));
    }
    let originals: Vec<String> = rewritten.iter().map(|r| r.original.clone()).collect();
    let outputs: Vec<String> = rewritten.iter().map(|r| r.refined.clone()).collect();
    let strength = eval::transfer_strength(&outputs, judge, repeat)?;
    let similarity = eval::similarity(&originals, &outputs, repeat)?;
    let flu = eval::fluency(&outputs, fluency)?;
    let metrics = MetricReport::new(similarity, strength, flu.mean_perplexity, outputs.len())?;
    let negatives: Vec<String> =
        refined.iter().flat_map(|t| t.stages.iter()).filter(|s| s.label == Some(0)).map(|s| s.output.clone()).collect();
    Ok((metrics, eval::signal_accuracy(&negatives, grammar)))
}
