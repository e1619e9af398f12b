//! End-to-end acceptance checks, one line per criterion.
//!
//! The pipeline criteria train full-size models, which takes several minutes
//! on one core. Set `ACCEPTANCE_DIR` to keep the run directories; a rerun
//! then skips every phase that already completed.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::gradcheck::{random_graph, relative_error, OPS};
use nlpolicy::eval::{aggregate, MetricReport, SignalReport};
use nlpolicy::numerics::SeededRng;
use nlpolicy::optimize::RefinementResult;
use nlpolicy::pipeline::{
    read_json, read_jsonl, InductionManifest, PipelineConfig, RefinedTrajectory, RepeatReport, Run, Variant,
};
use nlpolicy::qlearn::{backward_induction, StageProblem};
use nlpolicy::text::PairMode;
use nlpolicy::Result;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Published reference rows: (similarity, strength, fluency, gm, hm).
const TABLE: [(f64, f64, f64, f64, f64); 15] = [
    (80.7, 41.1, 138.0, 40.7, 34.9),
    (74.0, 57.3, 142.5, 44.1, 37.2),
    (82.8, 23.7, 130.7, 34.3, 29.1),
    (57.0, 23.1, 447.4, 27.8, 24.6),
    (63.6, 23.3, 100.2, 31.8, 28.7),
    (65.3, 77.7, 173.0, 46.2, 37.6),
    (65.3, 90.5, 161.5, 48.8, 38.9),
    (69.2, 72.9, 116.5, 47.3, 39.6),
    (69.8, 74.8, 276.0, 45.3, 35.8),
    (65.8, 88.0, 174.5, 48.2, 38.4),
    (75.4, 52.1, 119.6, 43.5, 37.4),
    (73.1, 63.5, 117.2, 46.0, 38.9),
    (66.5, 67.3, 91.4, 46.3, 40.0),
    (59.5, 55.9, 172.6, 40.1, 34.8),
    (52.0, 43.9, 69.5, 37.8, 35.5),
];

fn aggregate_table() -> Verdict {
    let mut worst = 0.0f64;
    for &(sim, str, flu, gm, hm) in &TABLE {
        match aggregate(sim, str, flu) {
            Ok((g, h)) => worst = worst.max((g - gm).abs()).max((h - hm).abs()),
            Err(e) => return verdict(false, format!("({sim}, {str}, {flu}): {e}")),
        }
    }
    verdict(worst <= 0.15, format!("{} rows, max |error| {worst:.3}", TABLE.len()))
}

fn gradients() -> Verdict {
    let mut rng = SeededRng::new(2024);
    let mut worst = (0.0f64, "");
    for trial in 0..100 {
        let (op, inputs, build) = random_graph(trial, &mut rng);
        let err = relative_error(&inputs, &*build, 1e-3);
        if err > worst.0 || err.is_nan() {
            worst = (err, op);
        }
    }
    verdict(
        worst.0 <= 1e-3,
        format!("100 graphs over {} ops, max relative error {:.2e} ({})", OPS.len(), worst.0, worst.1),
    )
}

/// Two-stage problem with two actions per stage and a tabular Q-function.
/// Each of the four action sequences is observed `reps` times with a
/// Bernoulli outcome drawn from its success probability.
struct Toy {
    rows: Vec<(usize, usize)>,
    q2: [[f32; 2]; 2],
    q1: [f32; 2],
}

fn cell_means(
    rows: &[(usize, usize)],
    targets: &[f32],
    key: impl Fn(&(usize, usize)) -> usize,
    cells: usize,
) -> Vec<f32> {
    let mut sum = vec![0.0f64; cells];
    let mut n = vec![0usize; cells];
    for (r, &y) in rows.iter().zip(targets) {
        sum[key(r)] += y as f64;
        n[key(r)] += 1;
    }
    sum.iter().zip(&n).map(|(s, &k)| (s / k.max(1) as f64) as f32).collect()
}

impl StageProblem for Toy {
    type Model = ();

    fn horizon(&self) -> usize {
        2
    }

    fn fit(&mut self, t: usize, targets: &[f32]) -> Result<()> {
        if t == 2 {
            let m = cell_means(&self.rows, targets, |&(a1, a2)| 2 * a1 + a2, 4);
            self.q2 = [[m[0], m[1]], [m[2], m[3]]];
        } else {
            let m = cell_means(&self.rows, targets, |&(a1, _)| a1, 2);
            self.q1 = [m[0], m[1]];
        }
        Ok(())
    }

    fn maximize(&mut self, t: usize, _: &()) -> Result<Vec<(f32, f32)>> {
        Ok(self
            .rows
            .iter()
            .map(|&(a1, a2)| {
                if t == 2 {
                    (self.q2[a1][a2], self.q2[a1][0].max(self.q2[a1][1]))
                } else {
                    (self.q1[a1], self.q1[0].max(self.q1[1]))
                }
            })
            .collect())
    }
}

fn argmax(v: &[f32]) -> usize {
    usize::from(v[1] > v[0])
}

fn toy_oracle() -> Verdict {
    let mut rng = SeededRng::new(77);
    let reps = 400;
    let mut hits = 0;
    for _ in 0..20 {
        let p: Vec<f32> = (0..4).map(|_| rng.uniform()).collect();
        let mut rows = Vec::new();
        let mut outcomes = Vec::new();
        for (cell, &pc) in p.iter().enumerate() {
            for _ in 0..reps {
                rows.push((cell / 2, cell % 2));
                outcomes.push(f32::from(u8::from(rng.uniform() < pc)));
            }
        }
        let mut toy = Toy { rows, q2: [[0.0; 2]; 2], q1: [0.0; 2] };
        if let Err(e) = backward_induction(&mut toy, &outcomes) {
            return verdict(false, format!("induction failed: {e}"));
        }
        let a1 = argmax(&toy.q1);
        let induced = (a1, argmax(&toy.q2[a1]));
        let best = (0..4).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        if induced == (best / 2, best % 2) {
            hits += 1;
        }
    }
    verdict(hits >= 19, format!("{hits}/20 instances match exhaustive enumeration"))
}

/// A pipeline run plus how long its phases took when they actually ran.
struct Pipeline {
    run: Run,
    repeat_time: Option<Duration>,
    total_time: Option<Duration>,
}

fn pipeline(root: &Path, cfg: PipelineConfig, variants: &[Variant]) -> Result<Pipeline> {
    let start = Instant::now();
    let run = Run::new(root, cfg.clone(), false)?;
    run.gen_data()?;
    let t = Instant::now();
    let repeat_ran = run.train_repeat()? == nlpolicy::pipeline::PhaseStatus::Ran;
    let repeat_time = repeat_ran.then(|| t.elapsed());
    run.train_fluency()?;
    run.train_q()?;
    for &v in variants {
        let r = Run::new(root, PipelineConfig { variant: v, ..cfg.clone() }, false)?;
        r.refine()?;
        r.eval()?;
    }
    let total_time = repeat_ran.then(|| start.elapsed());
    Ok(Pipeline { run, repeat_time, total_time })
}

fn variant_reports(run: &Run, v: Variant) -> Result<(MetricReport, SignalReport, Vec<RefinedTrajectory>)> {
    let dir = run.report_dir().join(v.name());
    Ok((
        read_json(&dir.join("metrics.json"))?,
        read_json(&dir.join("signal.json"))?,
        read_jsonl(&dir.join("refined.jsonl"))?,
    ))
}

fn minutes(d: Option<Duration>) -> String {
    d.map_or("cached".into(), |d| format!("{:.1} min", d.as_secs_f64() / 60.0))
}

fn repeat_fidelity(one: &Pipeline) -> Result<Verdict> {
    let r: RepeatReport = read_json(&one.run.report_dir().join("repeat.json"))?;
    let in_time = one.repeat_time.is_none_or(|d| d <= Duration::from_secs(15 * 60));
    Ok(verdict(
        r.reconstruction >= 0.99 && in_time,
        format!(
            "held-out exact match {:.3} over {} sentences, training {}",
            r.reconstruction,
            r.holdout,
            minutes(one.repeat_time)
        ),
    ))
}

fn transfer(one: &Pipeline, two: &Pipeline) -> Result<Verdict> {
    let (_, s1, _) = variant_reports(&one.run, Variant::Base)?;
    let (_, s2, _) = variant_reports(&two.run, Variant::Base)?;
    let limit = Duration::from_secs(30 * 60);
    let in_time = [one.total_time, two.total_time].iter().all(|d| d.is_none_or(|d| d <= limit));
    Ok(verdict(
        s1.converted >= 0.70 && s1.deleted >= 0.80 && s2.deleted >= 0.70 && in_time,
        format!(
            "one-pair converted {:.3} deleted {:.3} (n={}), two-pairs deleted {:.3} (n={}); runtimes {} / {}",
            s1.converted,
            s1.deleted,
            s1.n,
            s2.deleted,
            s2.n,
            minutes(one.total_time),
            minutes(two.total_time)
        ),
    ))
}

/// Stage means from `induction.json`, and per-row results from the training
/// refinements, both compared against the original actions.
fn improvement(runs: &[(&str, &Run)]) -> Result<Verdict> {
    let mut notes = Vec::new();
    let mut pass = true;
    for (name, run) in runs {
        let m: InductionManifest = read_json(&run.report_dir().join("induction.json"))?;
        for s in &m.stages {
            let q = &s.summary;
            let t = q.stage;
            let rows: Vec<RefinementResult> = read_jsonl(&run.report_dir().join(format!("refine_stage{t}.jsonl")))?;
            let worse = rows.iter().filter(|r| r.p_after < r.p_before).count();
            pass &= q.q_optimized_mean >= q.q_original_mean && worse == 0;
            notes.push(format!("{name} t={t} {:.3}->{:.3}", q.q_original_mean, q.q_optimized_mean));
        }
    }
    Ok(verdict(pass, notes.join(", ")))
}

fn mean_edit(refined: &[RefinedTrajectory]) -> f64 {
    let d: Vec<usize> = refined.iter().flat_map(|t| t.rewritten().map(|(_, r)| r.edit_distance)).collect();
    d.iter().sum::<usize>() as f64 / d.len().max(1) as f64
}

fn tts_dominance(one: &Pipeline) -> Result<Verdict> {
    let (base, _, base_rows) = variant_reports(&one.run, Variant::Base)?;
    let (tts, _, tts_rows) = variant_reports(&one.run, Variant::Tts)?;
    let (eb, et) = (mean_edit(&base_rows), mean_edit(&tts_rows));
    Ok(verdict(
        tts.strength >= base.strength - 1.0 && et <= eb * 1.1,
        format!(
            "strength tts {:.1} vs base {:.1}; mean edit distance tts {et:.3} vs base {eb:.3}",
            tts.strength, base.strength
        ),
    ))
}

/// Reduced-size configuration for the repeated determinism runs.
fn reduced(seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig { seed, ..Default::default() };
    c.data.x_per_combo = 40;
    c.data.test_negatives = 20;
    c.data.repeat_corpus = 1500;
    c.data.holdout = 20;
    c.repeat.train.schedule.epochs = 8;
    c.fluency.schedule.epochs = 2;
    c.induction.decode.max_len = 24;
    c.eval.classifier.epochs = 3;
    c
}

fn determinism(a: &Run, b: &Run) -> Result<Verdict> {
    let mut same = true;
    for file in ["metrics.json", "signal.json", "refined.jsonl"] {
        let read = |r: &Run| std::fs::read(r.variant_dir().join(file)).ok();
        same &= read(a).is_some() && read(a) == read(b);
    }
    let m: MetricReport = read_json(&a.metrics_path())?;
    Ok(verdict(
        same,
        format!("two reduced-size runs, seed {}: reports identical = {same} (gm {:.3})", a.config().seed, m.gm),
    ))
}

fn report(n: usize, name: &str, v: Result<Verdict>) -> bool {
    let v = v.unwrap_or_else(|e| verdict(false, format!("error: {e}")));
    println!("criterion {n} [{}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v.pass
}

fn main() -> ExitCode {
    let _ =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).is_test(true).try_init();
    // libtest-style filter arguments are meaningless here; `--list` must
    // print nothing so test discovery does not start the pipelines.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut ok = true;
    ok &= report(1, "GM/HM reproduce the reference rows", Ok(aggregate_table()));
    ok &= report(3, "gradient correctness", Ok(gradients()));
    ok &= report(4, "backward-induction oracle", Ok(toy_oracle()));

    let keep = std::env::var_os("ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    println!("acceptance runs under {}", root.display());

    let one = pipeline(&root.join("one-pair"), PipelineConfig::default(), &[Variant::Base, Variant::Tts]);
    let mut two_cfg = PipelineConfig::default();
    two_cfg.data.pair_mode = PairMode::TwoPairs;
    let two = pipeline(&root.join("two-pairs"), two_cfg, &[Variant::Base]);
    let small_a = pipeline(&root.join("reduced-a"), reduced(11), &[Variant::Base]);
    let small_b = pipeline(&root.join("reduced-b"), reduced(11), &[Variant::Base]);

    let failed = |e: &nlpolicy::Error| nlpolicy::Error::Validation(format!("pipeline failed: {e}"));
    ok &= report(2, "Repeat fidelity", one.as_ref().map_err(failed).and_then(repeat_fidelity));
    ok &= report(
        5,
        "synthetic transfer",
        match (&one, &two) {
            (Ok(a), Ok(b)) => transfer(a, b),
            (Err(e), _) | (_, Err(e)) => Err(failed(e)),
        },
    );
    let runs: Vec<(&str, &Run)> =
        [("one-pair", &one), ("two-pairs", &two), ("reduced-a", &small_a), ("reduced-b", &small_b)]
            .into_iter()
            .filter_map(|(n, p)| p.as_ref().ok().map(|p| (n, &p.run)))
            .collect();
    let all_ran = runs.len() == 4;
    ok &= report(
        6,
        "pseudo-outcome improvement",
        improvement(&runs)
            .map(|v| if all_ran { v } else { verdict(false, format!("a pipeline failed; {}", v.detail)) }),
    );
    ok &= report(7, "TTS dominance", one.as_ref().map_err(failed).and_then(tts_dominance));
    ok &= report(
        8,
        "determinism",
        match (&small_a, &small_b) {
            (Ok(a), Ok(b)) => determinism(&a.run, &b.run),
            (Err(e), _) | (_, Err(e)) => Err(failed(e)),
        },
    );
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
