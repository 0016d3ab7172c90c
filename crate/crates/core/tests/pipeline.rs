use std::fs;
use std::path::{Path, PathBuf};

use sqlsynth_core::pipeline::{self, read_jsonl, report, Pipeline, PipelineError, RunOptions, Stage, StageStatus, DATASET};
use sqlsynth_core::sql::corpus_stats;
use sqlsynth_core::DataSample;

const CONFIG: &str = r#"
seed = 5

[paths]
tables = "tables"
work_dir = "work"

[[providers.default]]
kind = "mock"
model_id = "mock"

[schema]
mean = 2.0
stddev = 0.5

[query]
budget = 8

[question]
n_samples = 3

[cot]
n_samples = 4
"#;

fn setup(dir: &Path) -> PathBuf {
    fs::create_dir_all(dir.join("tables")).unwrap();
    fs::write(
        dir.join("tables/lakes.csv"),
        "Lake,Country,Area,Depth,Elevation\nSuperior,Canada,82100,406,183\nVictoria,Uganda,68870,84,1134\nHuron,Canada,59600,229,176\nMichigan,United States,58000,281,176\nTanganyika,Tanzania,32600,1470,773\n",
    )
    .unwrap();
    fs::write(
        dir.join("tables/bridges.csv"),
        "Bridge,City,Span,Opened,Type\nAkashi,Kobe,1991,1998,Suspension\nGreat Belt,Korsor,1624,1998,Suspension\nHumber,Hull,1410,1981,Suspension\nTsing Ma,Hong Kong,1377,1997,Suspension\nMillau,Millau,342,2004,Cable\n",
    )
    .unwrap();
    let cfg = dir.join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    cfg
}

#[test]
fn full_run_marks_six_stages_complete() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::from_file(&setup(dir.path())).unwrap();
    let m = p.run(&RunOptions::default()).unwrap();
    assert_eq!(m.stages.len(), 6);
    assert!(m.stages.iter().all(|s| s.status == StageStatus::Complete));
    assert_eq!(m.stage(Stage::Ingest).items_done, 2);
    assert_eq!(m.stage(Stage::Schema).items_done, 2);
    assert!(m.artifacts.contains_key("train"));
}

#[test]
fn a_later_stage_needs_earlier_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::from_file(&setup(dir.path())).unwrap();
    let err = p
        .run(&RunOptions {
            stages: vec![Stage::Query],
            ..Default::default()
        })
        .unwrap_err();
    assert!(matches!(err, PipelineError::Precondition { stage: Stage::Query, .. }), "{err}");

    // Running the missing stages first satisfies the precondition.
    p.run(&RunOptions {
        stages: vec![Stage::Ingest, Stage::Schema],
        ..Default::default()
    })
    .unwrap();
    let m = p
        .run(&RunOptions {
            stages: vec![Stage::Query],
            ..Default::default()
        })
        .unwrap();
    assert_eq!(m.stage(Stage::Query).status, StageStatus::Complete);
    assert_eq!(m.stage(Stage::Question).status, StageStatus::Pending);
}

#[test]
fn resuming_a_finished_run_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::from_file(&setup(dir.path())).unwrap();
    p.run(&RunOptions::default()).unwrap();
    let manifest = p.manifest_path();
    let before = fs::read(&manifest).unwrap();
    let dataset = fs::read(p.work_dir().join(DATASET)).unwrap();
    pipeline::resume(&manifest, None, None).unwrap();
    assert_eq!(fs::read(&manifest).unwrap(), before);
    assert_eq!(fs::read(p.work_dir().join(DATASET)).unwrap(), dataset);
}

#[test]
fn edited_config_is_rejected_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let p = Pipeline::from_file(&cfg).unwrap();
    let halted = p.run(&RunOptions {
        stages: vec![],
        halt_after_items: Some(3),
    });
    assert!(matches!(halted, Err(PipelineError::Halted { .. })));
    let hash = serde_json::from_str::<serde_json::Value>(&fs::read_to_string(p.manifest_path()).unwrap()).unwrap()["config_hash"].clone();

    fs::write(&cfg, CONFIG.replace("budget = 8", "budget = 9")).unwrap();
    let err = pipeline::resume(&p.manifest_path(), None, None).unwrap_err();
    assert!(matches!(err, PipelineError::ConfigDrift { .. }), "{err}");
    // A fresh pipeline over the edited config refuses the old manifest too.
    let err = Pipeline::from_file(&cfg).unwrap().run(&RunOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::ConfigDrift { .. }), "{err}");
    let after = serde_json::from_str::<serde_json::Value>(&fs::read_to_string(p.manifest_path()).unwrap()).unwrap()["config_hash"].clone();
    assert_eq!(hash, after);

    fs::write(&cfg, CONFIG).unwrap();
    let m = pipeline::resume(&p.manifest_path(), None, None).unwrap();
    assert!(m.stages.iter().all(|s| s.status == StageStatus::Complete));
}

#[test]
fn done_counts_never_decrease_across_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::from_file(&setup(dir.path())).unwrap();
    let mut last = vec![0usize; 6];
    let mut result = p.run(&RunOptions {
        stages: vec![],
        halt_after_items: Some(1),
    });
    loop {
        let m = pipeline::RunManifest::load(&p.manifest_path()).unwrap();
        let now: Vec<usize> = m.stages.iter().map(|s| s.items_done).collect();
        assert!(now.iter().zip(&last).all(|(n, l)| n >= l), "{last:?} -> {now:?}");
        last = now;
        match result {
            Err(PipelineError::Halted { .. }) => result = pipeline::resume(&p.manifest_path(), None, Some(2)),
            Ok(_) => break,
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn report_matches_corpus_stats_over_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::from_file(&setup(dir.path())).unwrap();
    p.run(&RunOptions::default()).unwrap();
    let r = report(p.work_dir()).unwrap();
    let samples: Vec<DataSample> = read_jsonl(&p.work_dir().join(DATASET)).unwrap();
    let sqls: Vec<&str> = samples.iter().map(|s| s.sql.as_str()).collect();
    assert_eq!(r.sql, Some(corpus_stats(&sqls)));
    assert_eq!(r.n_databases, 2);
    assert_eq!(r.n_samples, samples.len());
    assert_eq!(r.style_histogram.values().sum::<usize>(), samples.len());
    assert_eq!(r.complexity_histogram.values().sum::<usize>(), samples.len());
    assert!(r.to_text().contains("tables/db"));
}

#[test]
fn empty_work_dir_gives_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let r = report(dir.path()).unwrap();
    assert_eq!(r.n_databases, 0);
    assert_eq!(r.n_samples, 0);
    assert!(r.sql.is_none());
    assert!(!r.to_text().is_empty());
}
