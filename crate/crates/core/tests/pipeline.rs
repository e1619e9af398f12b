use std::path::Path;

use nlpolicy::pipeline::*;
use nlpolicy::text::{read_trajectories, PairMode};
use nlpolicy::Error;

fn tiny() -> PipelineConfig {
    let mut c = PipelineConfig { seed: 9, ..Default::default() };
    c.data.x_per_combo = 5;
    c.data.test_negatives = 4;
    c
}

#[test]
fn config_round_trips_through_toml() {
    let mut c = tiny();
    c.variant = Variant::Tts;
    c.data.pair_mode = PairMode::TwoPairs;
    let text = c.to_toml().unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap(), c);
}

#[test]
fn partial_toml_keeps_defaults() {
    let c = PipelineConfig::from_toml("seed = 4\n[data]\nx_per_combo = 7\n").unwrap();
    assert_eq!((c.seed, c.data.x_per_combo), (4, 7));
    assert_eq!(c.data.test_negatives, DataConfig::default().test_negatives);
    assert_eq!(c.induction.ascent.iterations, vec![15, 10]);
}

#[test]
fn invalid_configs_are_config_errors() {
    for text in [
        "[data]\nhorizon = 0\n",
        "[data]\nx_per_combo = 0\n",
        "[induction.ascent]\nstep_size = -1.0\n",
        "[induction.ascent]\niterations = []\n",
        "[induction]\noutcome_threshold = 3\n",
        "variant = \"sideways\"\n",
        "seed = \"x\"\n",
    ] {
        assert!(matches!(PipelineConfig::from_toml(text), Err(Error::Config(_))), "{text}");
    }
    assert!(matches!(PipelineConfig::load(Path::new("/nonexistent/cfg.toml")), Err(Error::Config(_))));
}

#[test]
fn variants_parse_by_name() {
    for v in [Variant::Base, Variant::Tts, Variant::OneStage] {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!(matches!("both".parse::<Variant>(), Err(Error::Config(_))));
}

#[test]
fn hash_ignores_only_the_variant() {
    let a = tiny();
    let b = PipelineConfig { variant: Variant::OneStage, ..a.clone() };
    let c = PipelineConfig { seed: 10, ..a.clone() };
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn manifest_tracks_completed_phases() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    let mut m = RunManifest::open(&path, "h1").unwrap();
    assert!(m.phases.is_empty());
    std::fs::write(dir.path().join("a.txt"), "x").unwrap();
    m.record("p", vec!["a.txt".into()]);
    m.save(&path).unwrap();

    let back = RunManifest::open(&path, "h1").unwrap();
    assert_eq!(back, m);
    assert!(back.is_complete("p", dir.path()));
    assert!(!back.is_complete("q", dir.path()));
    std::fs::remove_file(dir.path().join("a.txt")).unwrap();
    assert!(!back.is_complete("p", dir.path()));
    assert!(RunManifest::open(&path, "h2").unwrap().phases.is_empty());

    std::fs::write(&path, "{ not json").unwrap();
    assert!(matches!(RunManifest::open(&path, "h1"), Err(Error::Format { .. })));
}

#[test]
fn jsonl_round_trip_and_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.jsonl");
    let rows = vec![vec![1u32, 2], vec![], vec![3]];
    write_jsonl(&path, &rows).unwrap();
    assert_eq!(read_jsonl::<Vec<u32>>(&path).unwrap(), rows);
    std::fs::write(&path, "[1]\n\n[2]\n{oops\n").unwrap();
    match read_jsonl::<Vec<u32>>(&path) {
        Err(Error::Format { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a format error, got {other:?}"),
    }
    assert!(matches!(read_jsonl::<Vec<u32>>(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn gen_data_is_idempotent_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), tiny(), false).unwrap();
    assert_eq!(run.gen_data().unwrap(), PhaseStatus::Ran);
    assert_eq!(run.gen_data().unwrap(), PhaseStatus::Skipped);
    let train = read_trajectories(&run.train_path()).unwrap();
    assert_eq!(train.len(), 4 * 5);
    let test = read_trajectories(&run.test_path()).unwrap();
    assert_eq!(test.len(), 4);
    assert!(test.iter().all(|t| t.stages.iter().filter(|s| s.label == Some(0)).count() == 1));
    let saved = PipelineConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(saved, tiny());

    let bytes = std::fs::read(run.train_path()).unwrap();
    let forced = Run::new(dir.path(), tiny(), true).unwrap();
    assert_eq!(forced.gen_data().unwrap(), PhaseStatus::Ran);
    assert_eq!(std::fs::read(run.train_path()).unwrap(), bytes);

    // A different configuration invalidates the earlier phase.
    let other = Run::new(dir.path(), PipelineConfig { seed: 1, ..tiny() }, false).unwrap();
    assert_eq!(other.gen_data().unwrap(), PhaseStatus::Ran);
    assert_ne!(std::fs::read(run.train_path()).unwrap(), bytes);
}

#[test]
fn one_stage_test_set_puts_negatives_first() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), PipelineConfig { variant: Variant::OneStage, ..tiny() }, false).unwrap();
    run.gen_data().unwrap();
    let test = read_trajectories(&run.test_path()).unwrap();
    assert!(test.iter().all(|t| t.stages[0].label == Some(0) && t.stages[1].label == Some(1)));
}

#[test]
fn phases_report_missing_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), tiny(), false).unwrap();
    assert!(matches!(run.train_repeat(), Err(Error::Validation(_))));
    assert!(matches!(run.refine(), Err(Error::Validation(_))));
    assert!(matches!(run.eval(), Err(Error::Validation(_))));
    assert!(matches!(run.report(), Err(Error::Validation(_))));
    run.gen_data().unwrap();
    assert!(matches!(run.train_q(), Err(Error::Checkpoint(_))));
    assert!(matches!(run.refine(), Err(Error::Checkpoint(_))));
}

#[test]
fn phase_seeds_are_distinct_and_follow_the_global_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = Run::new(dir.path(), tiny(), false).unwrap();
    let b = Run::new(dir.path(), PipelineConfig { seed: 10, ..tiny() }, false).unwrap();
    assert_ne!(a.seed("repeat/init"), a.seed("fluency"));
    assert_ne!(a.seed("refine"), b.seed("refine"));
    assert_eq!(a.seed("refine"), Run::new(dir.path(), tiny(), false).unwrap().seed("refine"));
    assert_eq!(a.induction_config().ascent.seed, a.seed("q/ascent"));
}
