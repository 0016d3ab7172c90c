use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sqlsynth(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sqlsynth"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "sqlsynth {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const CONFIG: &str = r#"
seed = 9

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

#[test]
fn stage_commands_then_reports_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::create_dir_all(root.join("tables")).unwrap();
    fs::write(
        root.join("tables/rivers.csv"),
        "River,Continent,Length,Discharge,Countries\nNile,Africa,6650,2800,11\nAmazon,South America,6400,209000,9\nYangtze,Asia,6300,30166,1\nMississippi,North America,6275,16792,2\nYenisei,Asia,5539,19600,2\n",
    )
    .unwrap();
    fs::write(root.join("run.toml"), CONFIG).unwrap();

    for cmd in ["ingest", "synth-db", "synth-sql", "synth-question", "synth-cot", "export"] {
        sqlsynth(&[cmd, "--config", "run.toml"], root);
    }
    let out = sqlsynth(&["run", "--config", "run.toml"], root);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("complete").count(), 6, "{text}");
    sqlsynth(&["resume", "--manifest", "work/manifest.json"], root);

    let report = String::from_utf8(sqlsynth(&["report", "--work-dir", "work"], root).stdout).unwrap();
    assert!(report.contains("tables/db"), "{report}");
    let json: serde_json::Value = serde_json::from_slice(&sqlsynth(&["report", "--work-dir", "work", "--json"], root).stdout).unwrap();
    assert_eq!(json["n_databases"], 1);

    sqlsynth(&["judge", "--config", "run.toml", "--max", "3"], root);
    assert!(root.join("work/reports/quality.json").exists());
    sqlsynth(&["audit", "--config", "run.toml"], root);
    assert!(root.join("work/reports/audit.json").exists());

    // A Spider-layout benchmark built from the synthesized dataset, with the
    // dataset's own SQL as predictions: every item is correct.
    let samples: Vec<serde_json::Value> = fs::read_to_string(root.join("work/dataset.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!samples.is_empty());
    let db_id = samples[0]["db_name"].as_str().unwrap();
    let bench = root.join("bench");
    fs::create_dir_all(bench.join("database").join(db_id)).unwrap();
    fs::copy(
        root.join("work").join(samples[0]["db_path"].as_str().unwrap()),
        bench.join("database").join(db_id).join(format!("{db_id}.sqlite")),
    )
    .unwrap();
    let dev: Vec<serde_json::Value> = samples
        .iter()
        .map(|s| serde_json::json!({"db_id": db_id, "question": s["question"], "query": s["sql"]}))
        .collect();
    fs::write(bench.join("dev.json"), serde_json::to_string(&dev).unwrap()).unwrap();
    let preds: serde_json::Map<String, serde_json::Value> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (i.to_string(), s["sql"].clone()))
        .collect();
    fs::write(root.join("preds.json"), serde_json::to_string(&preds).unwrap()).unwrap();
    sqlsynth(
        &["eval", "--benchmark", "bench", "--predictions", "preds.json", "--out", "eval.json"],
        root,
    );
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["ex_greedy"], 1.0);
    assert_eq!(eval["n_items"], samples.len());
}
