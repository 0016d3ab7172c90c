use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use sqlsynth_core::eval::{audit_corrections, evaluate, judge_dataset, load_benchmark, load_predictions, BenchmarkFormat};
use sqlsynth_core::pipeline::{self, load_schemas, read_jsonl, Pipeline, RunManifest, RunOptions, Stage, DATASET};
use sqlsynth_core::DataSample;

#[derive(Parser)]
#[command(name = "sqlsynth", version, about = "Synthesize and evaluate text-to-SQL data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Spider,
    Bird,
}

#[derive(Subcommand)]
enum Command {
    /// Load and filter seed tables.
    Ingest(ConfigArg),
    /// Synthesize and materialize databases from the kept tables.
    SynthDb(ConfigArg),
    /// Generate SQL queries for every database.
    SynthSql(ConfigArg),
    /// Back-translate every SQL query into a stylized question.
    SynthQuestion(ConfigArg),
    /// Synthesize chain-of-thought solutions and build the dataset.
    SynthCot(ConfigArg),
    /// Write input/output training pairs.
    Export(ConfigArg),
    /// Run the given stages (all by default) in pipeline order.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated subset of ingest,schema,query,question,cot,export.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
    },
    /// Continue an interrupted run.
    Resume {
        /// The run's manifest.json.
        #[arg(short, long)]
        manifest: PathBuf,
        /// Config to use instead of the path recorded in the manifest.
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
    /// Database and SQL statistics of a work directory.
    Report {
        #[arg(short, long)]
        work_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Execution accuracy of predictions on a Spider- or BIRD-style benchmark.
    Eval {
        /// Benchmark directory holding the questions file and databases.
        #[arg(short, long)]
        benchmark: PathBuf,
        /// JSON object mapping item ids to a SQL string or a list of candidates.
        #[arg(short, long)]
        predictions: PathBuf,
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Questions file inside the benchmark directory (default dev.json).
        #[arg(long)]
        questions: Option<String>,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
        /// Also write the full report here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rate dataset samples with the judge model.
    Judge {
        #[command(flatten)]
        config: ConfigArg,
        /// Judge at most this many samples (taken in dataset order).
        #[arg(long)]
        max: Option<usize>,
    },
    /// Blind A/B comparison of CoT-corrected queries against the originals.
    Audit {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 100)]
        max: usize,
    },
}

fn run_stages(config: &Path, stages: Vec<Stage>) -> Result<()> {
    let pipeline = Pipeline::from_file(config)?;
    let manifest = pipeline.run(&RunOptions {
        stages,
        halt_after_items: None,
    })?;
    print_manifest(&manifest);
    Ok(())
}

fn print_manifest(m: &RunManifest) {
    println!("{} ({})", m.run_id, m.config_hash);
    for s in &m.stages {
        println!("  {:<9} {:<9} done {:>6}  failed {:>6}", s.stage.name(), format!("{:?}", s.status).to_lowercase(), s.items_done, s.items_failed);
    }
}

fn load_dataset(pipeline: &Pipeline) -> Result<Vec<DataSample>> {
    let path = pipeline.work_dir().join(DATASET);
    read_jsonl(&path).with_context(|| format!("reading {}", path.display()))
}

fn write_report(pipeline: &Pipeline, name: &str, json: String) -> Result<()> {
    let path = pipeline.work_dir().join("reports").join(name);
    fs::create_dir_all(path.parent().unwrap())?;
    fs::write(&path, json)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();

    match Cli::parse().command {
        Command::Ingest(c) => run_stages(&c.config, vec![Stage::Ingest]),
        Command::SynthDb(c) => run_stages(&c.config, vec![Stage::Schema]),
        Command::SynthSql(c) => run_stages(&c.config, vec![Stage::Query]),
        Command::SynthQuestion(c) => run_stages(&c.config, vec![Stage::Question]),
        Command::SynthCot(c) => run_stages(&c.config, vec![Stage::Cot]),
        Command::Export(c) => run_stages(&c.config, vec![Stage::Export]),
        Command::Run { config, stages } => {
            let stages = stages
                .iter()
                .map(|s| Stage::parse(s).with_context(|| format!("unknown stage {s}")))
                .collect::<Result<Vec<_>>>()?;
            run_stages(&config.config, stages)
        }
        Command::Resume { manifest, config } => {
            let m = pipeline::resume(&manifest, config.as_deref(), None)?;
            print_manifest(&m);
            Ok(())
        }
        Command::Report { work_dir, json } => {
            if !work_dir.is_dir() {
                bail!("{} is not a directory", work_dir.display());
            }
            let r = pipeline::report(&work_dir)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print!("{}", r.to_text());
            }
            Ok(())
        }
        Command::Eval {
            benchmark,
            predictions,
            format,
            questions,
            timeout_ms,
            out,
        } => {
            let format = format.map(|f| match f {
                Format::Spider => BenchmarkFormat::Spider,
                Format::Bird => BenchmarkFormat::Bird,
            });
            let bench = load_benchmark(&benchmark, format, questions.as_deref(), timeout_ms)?;
            let preds = load_predictions(&predictions)?;
            let mut report = evaluate(&bench.items, &preds, timeout_ms);
            report.gold_defects.extend(bench.gold_defects);
            print!("{}", report.summary_table());
            if let Some(out) = out {
                fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(())
        }
        Command::Judge { config, max } => {
            let pipeline = Pipeline::from_file(&config.config)?;
            let mut samples = load_dataset(&pipeline)?;
            if let Some(max) = max {
                samples.truncate(max);
            }
            let schemas = load_schemas(pipeline.work_dir())?;
            let gateway = pipeline.pool("judge").pick("judge");
            let report = judge_dataset(pipeline.catalog(), &samples, &schemas, gateway);
            print!("{}", report.to_text_table());
            write_report(&pipeline, "quality.json", serde_json::to_string_pretty(&report)?)
        }
        Command::Audit { config, max } => {
            let pipeline = Pipeline::from_file(&config.config)?;
            let samples = load_dataset(&pipeline)?;
            let schemas = load_schemas(pipeline.work_dir())?;
            let gateway = pipeline.pool("judge").pick("audit");
            let report = audit_corrections(pipeline.catalog(), &samples, &schemas, gateway, max, pipeline.config().seed);
            println!(
                "corrected {}  audited {}  prefer CoT {}  prefer original {}  unparsable {}  failed {}",
                report.n_corrected, report.n_audited, report.prefers_cot, report.prefers_original, report.unparsable, report.failed_requests
            );
            write_report(&pipeline, "audit.json", serde_json::to_string_pretty(&report)?)
        }
    }
}
