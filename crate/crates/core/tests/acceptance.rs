//! Acceptance checks. Each test prints one `PASS`/`FAIL` line and then
//! asserts, so `cargo test -- --nocapture` shows the full scoreboard.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rusqlite::Connection;

use sqlsynth_core::eval::{evaluate, majority_vote_infer, quality_score, BenchmarkItem, RatingTally};
use sqlsynth_core::exec::{execute, fingerprint, majority_vote, same_result, Cell, ExecOutcome};
use sqlsynth_core::ingest::{filter_size, WebTable};
use sqlsynth_core::pipeline::{self, read_jsonl, Pipeline, PipelineError, RunOptions, StageStatus, DATASET};
use sqlsynth_core::query_synth::{postprocess, sample_select_count_uncapped, Candidate, ComplexityLevel};
use sqlsynth_core::schema::{table_count_draw, SynthesisParams};
use sqlsynth_core::sql::{corpus_stats, skeleton_of, template_of, CorpusStats};
use sqlsynth_core::DataSample;

fn verdict(n: u32, title: &str, elapsed: Duration, failures: &[String]) {
    let status = if failures.is_empty() { "PASS" } else { "FAIL" };
    println!("{status} criterion {n}: {title} ({:.2?})", elapsed);
    for f in failures.iter().take(10) {
        println!("    {f}");
    }
    assert!(failures.is_empty(), "criterion {n} failed: {failures:?}");
}

fn check(failures: &mut Vec<String>, ok: bool, what: impl FnOnce() -> String) {
    if !ok {
        failures.push(what());
    }
}

#[test]
fn c1_template_and_skeleton_examples() {
    let t0 = Instant::now();
    let sql = "SELECT name FROM school WHERE age > 18";
    let mut fails = Vec::new();
    let template = template_of(sql).unwrap();
    let skeleton = skeleton_of(sql).unwrap();
    check(&mut fails, template == "SELECT name FROM school WHERE age > [MASK]", || format!("template {template:?}"));
    check(&mut fails, skeleton == "SELECT [MASK] FROM [MASK] WHERE [MASK] > [MASK]", || format!("skeleton {skeleton:?}"));
    let elapsed = t0.elapsed();
    check(&mut fails, elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"));
    verdict(1, "template/skeleton examples byte-exact", elapsed, &fails);
}

#[test]
fn c2_sampler_moments() {
    let t0 = Instant::now();
    const N: usize = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let geo_mean = (0..N).map(|_| sample_select_count_uncapped(&mut rng) as f64).sum::<f64>() / N as f64;

    let params = SynthesisParams::default();
    let draws: Vec<f64> = (0..N).map(|_| table_count_draw(&mut rng, &params)).collect();
    let mean = draws.iter().sum::<f64>() / N as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (N - 1) as f64;
    let sd = var.sqrt();

    let mut fails = Vec::new();
    // E[1 + Geometric(0.6)] = 1 / 0.6.
    check(&mut fails, (geo_mean - 1.0 / 0.6).abs() <= 0.01, || format!("geometric mean {geo_mean}"));
    check(&mut fails, (mean - 10.0).abs() <= 0.05, || format!("normal mean {mean}"));
    check(&mut fails, (sd - 4.0).abs() <= 0.05, || format!("normal stddev {sd}"));
    let elapsed = t0.elapsed();
    check(&mut fails, elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"));
    println!("    geometric mean {geo_mean:.4}, normal mean {mean:.4}, stddev {sd:.4}");
    verdict(2, "sampler moments", elapsed, &fails);
}

fn random_cell(rng: &mut impl Rng) -> Cell {
    match rng.random_range(0..8) {
        0 => Cell::Null,
        1 | 2 => Cell::Int(rng.random_range(0..3)),
        // Integral reals must compare equal to the matching integer.
        3 => Cell::Real(rng.random_range(0..3) as f64),
        4 => Cell::Real([0.5, 1.25, 2.5][rng.random_range(0..3)]),
        _ => Cell::Text(["a", "b", "1", ""][rng.random_range(0..4)].to_string()),
    }
}

fn random_rows(rng: &mut impl Rng, cols: usize) -> Vec<Vec<Cell>> {
    let n = rng.random_range(0..5);
    (0..n).map(|_| (0..cols).map(|_| random_cell(rng)).collect()).collect()
}

/// Value equality defined from scratch: numbers compare numerically across
/// integer and real storage, everything else by kind and payload.
fn cell_eq(a: &Cell, b: &Cell) -> bool {
    let num = |c: &Cell| match c {
        Cell::Int(i) => Some(*i as f64),
        Cell::Real(x) => Some(*x),
        _ => None,
    };
    match (a, b) {
        (Cell::Null, Cell::Null) => true,
        (Cell::Text(x), Cell::Text(y)) => x == y,
        (Cell::Blob(x), Cell::Blob(y)) => x == y,
        _ => match (num(a), num(b)) {
            (Some(x), Some(y)) => (x - y).abs() < 1e-9,
            _ => false,
        },
    }
}

/// Multiset equality by repeated removal of a matching row.
fn brute_force_same(a: &(usize, Vec<Vec<Cell>>), b: &(usize, Vec<Vec<Cell>>)) -> bool {
    if a.0 != b.0 || a.1.len() != b.1.len() {
        return false;
    }
    let mut pool: Vec<&Vec<Cell>> = b.1.iter().collect();
    for row in &a.1 {
        let Some(pos) = pool
            .iter()
            .position(|r| r.len() == row.len() && r.iter().zip(row).all(|(x, y)| cell_eq(x, y)))
        else {
            return false;
        };
        pool.swap_remove(pos);
    }
    true
}

#[test]
fn c3_comparator_matches_brute_force() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut fails = Vec::new();
    let (mut equal_pairs, mut rows_pairs) = (0, 0);
    for i in 0..10_000 {
        let cols_a = rng.random_range(1..=3);
        let raw_a = (cols_a, random_rows(&mut rng, cols_a));
        let raw_b = match rng.random_range(0..4) {
            // A permutation of the same rows, sometimes with one cell changed.
            0 | 1 => {
                let mut rows = raw_a.1.clone();
                rows.shuffle(&mut rng);
                if rng.random_bool(0.3) && !rows.is_empty() {
                    let r = rng.random_range(0..rows.len());
                    let c = rng.random_range(0..cols_a);
                    rows[r][c] = random_cell(&mut rng);
                }
                (cols_a, rows)
            }
            _ => {
                let cols = rng.random_range(1..=3);
                (cols, random_rows(&mut rng, cols))
            }
        };
        let kind = |rng: &mut ChaCha8Rng, raw: &(usize, Vec<Vec<Cell>>)| match rng.random_range(0..20) {
            0 => ExecOutcome::error("SQLITE_ERROR", "no such table"),
            1 => ExecOutcome::timeout(),
            _ => ExecOutcome::rows(raw.0, raw.1.clone()),
        };
        let a = kind(&mut rng, &raw_a);
        let b = kind(&mut rng, &raw_b);
        let expected = a.is_rows() && b.is_rows() && brute_force_same(&raw_a, &raw_b);
        let got = same_result(&a, &b);
        equal_pairs += expected as usize;
        check(&mut fails, got == expected, || format!("pair {i}: same_result {got}, oracle {expected}: {raw_a:?} vs {raw_b:?}"));
        check(&mut fails, same_result(&b, &a) == got, || format!("pair {i}: asymmetric"));
        if a.is_rows() && b.is_rows() {
            rows_pairs += 1;
            let fp_eq = fingerprint(&a) == fingerprint(&b);
            check(&mut fails, fp_eq == got, || format!("pair {i}: fingerprint equality {fp_eq}, same_result {got}"));
        }
    }
    println!("    {equal_pairs} equal pairs, {rows_pairs} rows/rows pairs");
    check(&mut fails, equal_pairs > 1000, || format!("only {equal_pairs} equal pairs generated"));
    let elapsed = t0.elapsed();
    check(&mut fails, elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"));
    verdict(3, "EX comparator agrees with brute force", elapsed, &fails);
}

#[test]
fn c4_voting_properties() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let results: Vec<ExecOutcome> = (0..4)
        .map(|k| ExecOutcome::rows(1, (0..=k).map(|v| vec![Cell::Int(v)]).collect()))
        .collect();
    let mut fails = Vec::new();
    let (mut unique_max, mut valid_sets) = (0, 0);
    for i in 0..10_000 {
        let n = rng.random_range(1..=8);
        let labels: Vec<Option<usize>> = (0..n)
            .map(|_| match rng.random_range(0..7) {
                0 => None,
                k => Some(k - 1),
            })
            .collect();
        let build = |labels: &[Option<usize>]| -> Vec<Option<ExecOutcome>> {
            labels
                .iter()
                .map(|l| match l {
                    None => None,
                    Some(4) => Some(ExecOutcome::error("SQLITE_ERROR", "boom")),
                    Some(5) => Some(ExecOutcome::timeout()),
                    Some(k) => Some(results[*k].clone()),
                })
                .collect()
        };
        let outcomes = build(&labels);
        // Group sizes per distinct result, counted independently.
        let mut sizes = [0usize; 4];
        for k in labels.iter().flatten().filter(|k| **k < 4) {
            sizes[*k] += 1;
        }
        let max = *sizes.iter().max().unwrap();
        let vote = majority_vote(&outcomes);
        if max == 0 {
            check(&mut fails, vote.is_err(), || format!("set {i}: expected a vote failure"));
            continue;
        }
        valid_sets += 1;
        let Ok(vote) = vote else {
            fails.push(format!("set {i}: vote failed on a valid set"));
            continue;
        };
        let winner_label = labels[vote.winner].unwrap();
        check(&mut fails, sizes[winner_label] == max, || format!("set {i}: winning group size {} < {max}", sizes[winner_label]));
        check(&mut fails, vote.group.len() == max, || format!("set {i}: group length {}", vote.group.len()));
        // Tie-break: among maximal groups, the one whose first member comes first.
        let expected_winner = (0..n)
            .find(|&j| matches!(labels[j], Some(k) if k < 4 && sizes[k] == max))
            .unwrap();
        check(&mut fails, vote.winner == expected_winner, || format!("set {i}: winner {} expected {expected_winner}", vote.winner));
        check(&mut fails, majority_vote(&outcomes).ok() == Some(vote.clone()), || format!("set {i}: nondeterministic"));

        let mut perm = labels.clone();
        perm.shuffle(&mut rng);
        let pvote = majority_vote(&build(&perm)).unwrap();
        let plabel = perm[pvote.winner].unwrap();
        let n_max = sizes.iter().filter(|&&s| s == max).count();
        if n_max == 1 {
            unique_max += 1;
            check(&mut fails, results[plabel].canonical_rows() == results[winner_label].canonical_rows(), || {
                format!("set {i}: winning result changed under permutation")
            });
        } else {
            check(&mut fails, sizes[plabel] == max, || format!("set {i}: permuted winner not maximal"));
        }
    }
    println!("    {valid_sets} sets with a valid candidate, {unique_max} with a unique plurality");
    let elapsed = t0.elapsed();
    check(&mut fails, elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"));
    verdict(4, "voting maximality, tie-break, permutation invariance", elapsed, &fails);
}

#[test]
fn c5_quality_score_closed_form() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut fails = Vec::new();
    for _ in 0..1000 {
        let (e, g, a, p) = (
            rng.random_range(0..50u32),
            rng.random_range(0..50u32),
            rng.random_range(0..50u32),
            rng.random_range(0..50u32),
        );
        let t = RatingTally::new(e.into(), g.into(), a.into(), p.into());
        let total = e + g + a + p;
        match quality_score(&t) {
            Ok(s) if total > 0 => {
                let expected = (4 * e + 3 * g + 2 * a + p) as f64 / (4 * total) as f64;
                check(&mut fails, (s - expected).abs() < 1e-12, || format!("{e},{g},{a},{p}: {s} vs {expected}"));
                check(&mut fails, (0.25..=1.0).contains(&s), || format!("{e},{g},{a},{p}: {s} out of bounds"));
            }
            Ok(s) => fails.push(format!("empty tally scored {s}")),
            Err(_) => check(&mut fails, total == 0, || format!("{e},{g},{a},{p}: unexpected error")),
        }
    }
    let q = |e, g, a, p| quality_score(&RatingTally::new(e, g, a, p)).unwrap();
    check(&mut fails, q(1, 1, 1, 1) == 0.625, || format!("(1,1,1,1) -> {}", q(1, 1, 1, 1)));
    check(&mut fails, q(0, 0, 0, 7) == 0.25, || "lower bound not attained".into());
    check(&mut fails, q(7, 0, 0, 0) == 1.0, || "upper bound not attained".into());
    check(&mut fails, quality_score(&RatingTally::new(0, 0, 0, 0)).is_err(), || "empty tally accepted".into());
    let elapsed = t0.elapsed();
    check(&mut fails, elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"));
    verdict(5, "quality score closed form and bounds", elapsed, &fails);
}

fn toy_db(dir: &Path) -> PathBuf {
    let path = dir.join("toy.sqlite");
    let conn = Connection::open(&path).unwrap();
    conn.execute_batch(
        "CREATE TABLE people(id INTEGER PRIMARY KEY, name TEXT, age INTEGER, city TEXT);
         INSERT INTO people VALUES (1,'Ann',31,'Oslo'),(2,'Bo',25,'Rome'),(3,'Cy',40,'Oslo'),(4,'Di',19,'Lima'),(5,'Ed',25,'Rome');
         CREATE TABLE pets(owner_id INTEGER REFERENCES people(id), kind TEXT);
         INSERT INTO pets VALUES (1,'cat'),(1,'dog'),(3,'fish'),(5,'cat');",
    )
    .unwrap();
    path
}

fn fuzz_candidate(rng: &mut impl Rng) -> String {
    let v = rng.random_range(0..50);
    let city = ["Oslo", "Rome", "Lima", "Paris"][rng.random_range(0..4)];
    let shapes = [
        format!("SELECT name FROM people WHERE age > {v}"),
        format!("SELECT name FROM people WHERE age < {v}"),
        format!("SELECT name, age FROM people WHERE city = '{city}'"),
        format!("SELECT COUNT(*) FROM people WHERE age >= {v}"),
        format!("SELECT p.name, q.kind FROM people AS p JOIN pets AS q ON p.id = q.owner_id WHERE p.age > {v}"),
        format!("SELECT city, AVG(age) FROM people GROUP BY city HAVING COUNT(*) > {}", v % 3),
        format!("SELECT name FROM people WHERE age > {v} LIMIT {}", v % 4 + 1),
        format!("SELECT nope FROM people WHERE age > {v}"),
        format!("SELECT name FROM missing WHERE x = {v}"),
        format!("DELETE FROM people WHERE age > {v}"),
        format!("UPDATE people SET age = {v}"),
        "SELEC name FROM people".to_string(),
        format!("WITH t AS (SELECT age FROM people WHERE city = '{city}') SELECT MAX(age) FROM t"),
    ];
    shapes[rng.random_range(0..shapes.len())].clone()
}

#[test]
fn c6_postprocess_and_size_filter() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let db = toy_db(dir.path());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut fails = Vec::new();
    let mut retained_total = 0;
    for round in 0..40 {
        let n = rng.random_range(0..40);
        let candidates: Vec<Candidate> = (0..n)
            .map(|_| Candidate {
                sql: fuzz_candidate(&mut rng),
                complexity: ComplexityLevel::Simple,
                requested_select_count: 1,
            })
            .collect();
        let (kept, report) = postprocess(&candidates, "toy", &db, 5000);
        retained_total += kept.len();
        let mut templates = std::collections::HashSet::new();
        for s in &kept {
            let t = template_of(&s.sql_text).unwrap();
            check(&mut fails, templates.insert(t.clone()), || format!("round {round}: duplicate template {t}"));
            let out = execute(&db, &s.sql_text, 5000);
            check(&mut fails, out.is_rows(), || format!("round {round}: retained query fails: {}", s.sql_text));
        }
        check(&mut fails, report.retained == kept.len(), || format!("round {round}: report mismatch"));
        check(
            &mut fails,
            report.non_select + report.exec_failed + report.duplicate_template + report.retained == report.input,
            || format!("round {round}: counts do not add up: {report:?}"),
        );
    }
    // The database was opened read-only: no mutation leaked through.
    let count: i64 = Connection::open(&db)
        .unwrap()
        .query_row("SELECT COUNT(*) FROM people WHERE age BETWEEN 19 AND 40", [], |r| r.get(0))
        .unwrap();
    check(&mut fails, count == 5, || format!("database mutated, {count} people left"));
    check(&mut fails, retained_total > 40, || format!("only {retained_total} retained overall"));

    for cols in 1..=8 {
        for rows in 1..=8 {
            let table = WebTable {
                table_id: format!("t{cols}x{rows}"),
                headers: (0..cols).map(|c| format!("col{c}")).collect(),
                rows: (0..rows).map(|r| (0..cols).map(|c| format!("{r}-{c}")).collect()).collect(),
                source_ref: String::new(),
            };
            let expected = cols >= 5 && rows >= 5;
            check(&mut fails, filter_size(&table) == expected, || format!("filter_size {cols}x{rows}"));
        }
    }
    verdict(6, "dedup uniqueness, retained queries execute, size filter grid", t0.elapsed(), &fails);
}

#[test]
fn c7_corpus_stats_hand_oracle() {
    let t0 = Instant::now();
    let corpus = [
        // tables 1, joins 0, functions 0, tokens 8
        "SELECT name FROM students WHERE age > 18",
        // tables 3, joins 2, tokens 23
        "SELECT s.name, c.title FROM students AS s JOIN enrollments AS e ON s.id = e.student_id JOIN courses AS c ON e.course_id = c.id",
        // CTE, aggregation; tables 1 (adults is a CTE), functions COUNT, tokens 16
        "WITH adults AS (SELECT id, name FROM students WHERE age >= 18) SELECT COUNT(*) FROM adults",
        // window; tables 1, functions RANK, tokens 10
        "SELECT name, RANK() OVER (ORDER BY age DESC) FROM students",
        // set operator; tables 2, functions LOWER x2, tokens 9
        "SELECT LOWER(name) FROM students UNION SELECT LOWER(title) FROM courses",
        // subquery; tables 2, tokens 15
        "SELECT name FROM students WHERE id IN (SELECT student_id FROM enrollments WHERE grade > 90)",
        // aggregation; tables 1, functions AVG MAX COUNT, tokens 13
        "SELECT city, AVG(age), MAX(age) FROM students GROUP BY city HAVING COUNT(*) > 2",
        // derived-table subquery; tables 1, tokens 16
        "SELECT t.name FROM (SELECT name, age FROM students ORDER BY age DESC LIMIT 5) AS t",
        // self-join; tables 2, joins 1, tokens 19
        "SELECT a.name, b.name FROM students AS a JOIN students AS b ON a.city = b.city WHERE a.id < b.id",
        // same skeleton as the first query; tables 1, tokens 8
        "SELECT title FROM courses WHERE credits > 3",
    ];
    let oracle = CorpusStats {
        n_queries: 10,
        n_skipped: 0,
        avg_tables: 15.0 / 10.0,
        avg_joins: 3.0 / 10.0,
        avg_functions: 7.0 / 10.0,
        avg_tokens: 137.0 / 10.0,
        n_aggregation: 2,
        n_set_operator: 1,
        n_subquery: 2,
        n_window_function: 1,
        n_cte: 1,
        n_unique_skeletons: 9,
        n_unique_functions: 5,
    };
    let got = corpus_stats(&corpus);
    let mut fails = Vec::new();
    check(&mut fails, got == oracle, || format!("got {got:?}\nwant {oracle:?}"));
    verdict(7, "corpus statistics equal the hand count", t0.elapsed(), &fails);
}

const SEED_TABLES: [(&str, &str); 3] = [
    (
        "medals.csv",
        "Nation,Gold,Silver,Bronze,Total\nNorway,16,8,13,37\nGermany,12,10,5,27\nCanada,11,8,10,29\nUnited States,9,8,8,25\nNetherlands,8,5,4,17\nSweden,7,6,1,14\n",
    ),
    (
        "films.csv",
        "Title,Year,Director,Country,Rating\nThe Long Road,1999,Ann Lee,France,7.5\nQuiet Harbor,2004,Bo Chen,Canada,6.8\nRed Valley,2011,Cy Diaz,Spain,8.1\nNorth Wind,2015,Di Evans,Norway,7.2\nLast Light,2020,Ed Fox,Japan,6.4\n",
    ),
    (
        "stations.csv",
        "Station,Line,Opened,Zone,Passengers\nCentral,Red,1904,1,52000\nHarbor,Blue,1921,2,18000\nMarket,Red,1904,1,33000\nUniversity,Green,1968,2,27000\nAirport,Blue,1999,4,21000\nRiverside,Green,1975,3,9000\n",
    ),
];

const MOCK_CONFIG: &str = r#"
seed = 11

[paths]
tables = "tables"
work_dir = "work"

[[providers.default]]
kind = "mock"
model_id = "mock-large"
weight = 0.5

[[providers.default]]
kind = "mock"
model_id = "mock-small"
weight = 0.5

[schema]
mean = 3.0
stddev = 1.0

[query]
budget = 12

[question]
n_samples = 4

[cot]
n_samples = 8
"#;

fn setup_run_dir(dir: &Path) -> PathBuf {
    fs::create_dir_all(dir.join("tables")).unwrap();
    for (name, body) in SEED_TABLES {
        fs::write(dir.join("tables").join(name), body).unwrap();
    }
    let config = dir.join("run.toml");
    fs::write(&config, MOCK_CONFIG).unwrap();
    config
}

#[test]
fn c8_mock_end_to_end() {
    let t0 = Instant::now();
    let mut fails = Vec::new();

    let dir_a = tempfile::tempdir().unwrap();
    let cfg_a = setup_run_dir(dir_a.path());
    let p = Pipeline::from_file(&cfg_a).unwrap();
    let m = p.run(&RunOptions::default()).unwrap();
    check(&mut fails, m.stages.iter().all(|s| s.status == StageStatus::Complete), || format!("{:?}", m.stages));
    let work_a = p.work_dir().to_path_buf();
    let dataset_a = fs::read(work_a.join(DATASET)).unwrap();
    let samples: Vec<DataSample> = read_jsonl(&work_a.join(DATASET)).unwrap();
    let n_dbs = fs::read_dir(work_a.join("databases")).unwrap().count();
    println!("    {n_dbs} databases, {} samples", samples.len());
    check(&mut fails, n_dbs >= 1, || "no database".into());
    check(&mut fails, samples.len() >= 5, || format!("only {} samples", samples.len()));
    for s in &samples {
        check(&mut fails, s.check(&work_a.join(&s.db_path), 5000).is_ok(), || format!("{} violates its invariants", s.sample_id));
        check(&mut fails, s.cot_matches_sql(), || format!("{}: CoT final SQL differs", s.sample_id));
        check(&mut fails, execute(&work_a.join(&s.db_path), &s.sql, 5000).is_rows(), || format!("{}: SQL fails", s.sample_id));
    }

    // Same config and seed in a fresh directory.
    let dir_b = tempfile::tempdir().unwrap();
    let cfg_b = setup_run_dir(dir_b.path());
    let pb = Pipeline::from_file(&cfg_b).unwrap();
    pb.run(&RunOptions::default()).unwrap();
    let dataset_b = fs::read(pb.work_dir().join(DATASET)).unwrap();
    check(&mut fails, dataset_a == dataset_b, || "two identical runs differ".into());
    check(
        &mut fails,
        fs::read(p.train_path()).unwrap() == fs::read(pb.train_path()).unwrap(),
        || "training files differ".into(),
    );

    // Killed repeatedly, resumed each time.
    let dir_c = tempfile::tempdir().unwrap();
    let cfg_c = setup_run_dir(dir_c.path());
    let pc = Pipeline::from_file(&cfg_c).unwrap();
    let manifest = pc.manifest_path();
    let mut kills = 0;
    let mut result = pc.run(&RunOptions {
        stages: vec![],
        halt_after_items: Some(2),
    });
    while let Err(PipelineError::Halted { .. }) = result {
        kills += 1;
        result = pipeline::resume(&manifest, None, Some(3));
        if kills > 200 {
            break;
        }
    }
    check(&mut fails, result.is_ok(), || format!("resumed run ended with {result:?}"));
    check(&mut fails, kills >= 3, || format!("only {kills} interruptions"));
    let dataset_c = fs::read(pc.work_dir().join(DATASET)).unwrap_or_default();
    check(&mut fails, dataset_a == dataset_c, || "kill-and-resume differs from the uninterrupted run".into());
    println!("    resumed after {kills} interruptions");

    let elapsed = t0.elapsed();
    check(&mut fails, elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"));
    verdict(8, "mock end-to-end run, determinism, kill and resume", elapsed, &fails);
}

#[test]
fn c9_mini_benchmark() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("bench.sqlite");
    Connection::open(&db)
        .unwrap()
        .execute_batch(
            "CREATE TABLE t(id INTEGER PRIMARY KEY, grp TEXT, val REAL);
             WITH RECURSIVE n(i) AS (SELECT 0 UNION ALL SELECT i + 1 FROM n WHERE i < 39)
             INSERT INTO t SELECT i, CHAR(65 + i % 4), i * 1.5 FROM n;",
        )
        .unwrap();

    // Items with index divisible by 3 get a wrong prediction: 7 of 20.
    let mut items = Vec::new();
    let mut preds = BTreeMap::new();
    for i in 0..20 {
        let gold = format!("SELECT val FROM t WHERE id = {i}");
        let pred = match (i % 3, i % 2) {
            (0, 0) => format!("SELECT val FROM t WHERE id = {}", i + 1),
            (0, _) => "SELECT val FROM nowhere".to_string(),
            (_, 0) => format!("SELECT val FROM t WHERE id + 0 = {i}"),
            _ => format!("SELECT val FROM t WHERE id BETWEEN {i} AND {i} ORDER BY val DESC"),
        };
        items.push(BenchmarkItem {
            item_id: i.to_string(),
            db_path: db.clone(),
            question: format!("value of item {i}"),
            external_knowledge: None,
            gold_sql: gold,
        });
        preds.insert(i.to_string(), vec![pred]);
    }
    let report = evaluate(&items, &preds, 5000);
    let mut fails = Vec::new();
    check(&mut fails, report.ex_greedy == 13.0 / 20.0, || format!("ex_greedy {}", report.ex_greedy));
    check(&mut fails, report.n_items == 20, || format!("n_items {}", report.n_items));

    // Scripted 8-candidate sets: (candidates, index of the plurality SQL).
    let r = |g: &str| format!("SELECT id FROM t WHERE grp = '{g}'");
    let same_as = |g: &str| format!("SELECT id FROM t WHERE grp = '{g}' ORDER BY id DESC");
    let bad = "SELECT * FROM nowhere".to_string();
    let cases: Vec<(Vec<String>, usize)> = vec![
        (vec![r("A"), r("B"), r("B"), same_as("B"), r("C"), r("C"), r("D"), bad.clone()], 1),
        (vec![bad.clone(), bad.clone(), bad.clone(), bad.clone(), r("A"), r("B"), same_as("B"), r("C")], 5),
        (vec![r("A"), r("B"), r("A"), r("B"), r("C"), r("C"), r("C"), r("D")], 4),
        (vec![r("D"); 8], 0),
        (vec![bad.clone(), r("C"), same_as("C"), r("A"), r("A"), r("B"), r("A"), same_as("C")], 1),
        (vec![r("B"), r("A"), r("A"), same_as("A"), bad.clone(), r("B"), bad.clone(), bad], 1),
    ];
    for (k, (cands, plural)) in cases.iter().enumerate() {
        assert_eq!(cands.len(), 8);
        match majority_vote_infer(cands, &db, 5000) {
            Ok(choice) => {
                let chosen = execute(&db, &cands[choice], 5000);
                let expected = execute(&db, &cands[*plural], 5000);
                check(&mut fails, same_result(&chosen, &expected), || format!("case {k}: chose {choice}, plurality at {plural}"));
                check(&mut fails, choice == *plural, || format!("case {k}: chose {choice}, expected first plurality index {plural}"));
            }
            Err(e) => fails.push(format!("case {k}: {e}")),
        }
    }
    verdict(9, "mini-benchmark EX and majority inference", t0.elapsed(), &fails);
}
