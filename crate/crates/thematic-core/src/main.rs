//! `thematic` — inductive thematic analysis runs over interview transcripts.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use thematic_core::config::{
    build_config, parse_strategy, ConfigFile, Overrides, RunConfig, RunMode,
};
use thematic_core::pipeline;

#[derive(Parser)]
#[command(
    name = "thematic",
    version,
    about = "Chunked inductive thematic analysis of interview transcripts with an LLM, \
             plus quantitative evaluation against a human theme set"
)]
struct Cli {
    /// Config file (TOML). Defaults to ./thematic.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct CommonOpts {
    /// Use the deterministic offline provider instead of the HTTP API.
    #[arg(long)]
    mock: bool,
    /// Directory of transcript files (.jsonl or .txt).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Root directory for run artifacts.
    #[arg(long = "out")]
    output_dir: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Chat model identifier.
    #[arg(long)]
    model: Option<String>,
    /// Sampling temperature (defaults: 0 for run, 1.0 for baseline).
    #[arg(long)]
    temperature: Option<f64>,
    /// Chunk budget in words.
    #[arg(long = "max-words")]
    max_words: Option<usize>,
    /// Serialized-word budget per code group.
    #[arg(long = "group-budget")]
    group_budget: Option<usize>,
    /// Concurrent provider requests.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Ground-truth theme file (JSON array of {title, description}).
    #[arg(long = "ground-truth")]
    ground_truth: Option<PathBuf>,
    /// Similarity scorer (repeatable).
    #[arg(long = "scorer")]
    scorers: Vec<String>,
    /// Binarization threshold applied to every requested scorer.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and chunk the corpus, persisting chunks for a later `run`.
    Ingest {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Execute the chunked pipeline end to end.
    Run {
        /// Prompting strategy: zero | one | reflexion.
        #[arg(long)]
        strategy: Option<String>,
        /// Evaluate against the ground truth right after the run.
        #[arg(long)]
        eval: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Execute the whole-transcript comparison method (no chunking).
    Baseline {
        /// Apply a Reflexion critique/refine round to the themes.
        #[arg(long)]
        reflexion: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate a completed run against the ground truth.
    Eval {
        run_id: String,
        /// Also compute the ground-truth-vs-itself reference row.
        #[arg(long = "human-row")]
        human_row: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Threshold sensitivity sweep for one scorer.
    Sweep {
        run_id: String,
        /// Grid as start:end:step (default 0:1:0.02).
        #[arg(long)]
        grid: Option<String>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Human-readable summary of a run.
    Report {
        run_id: String,
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn overrides_from(common: &CommonOpts) -> Result<Overrides> {
    Ok(Overrides {
        mock: common.mock.then_some(true),
        corpus_dir: common.corpus.clone(),
        output_dir: common.output_dir.clone(),
        templates_dir: common.templates.clone(),
        model_id: common.model.clone(),
        temperature: common.temperature,
        max_words: common.max_words,
        group_budget_words: common.group_budget,
        parallelism: common.parallelism,
        ground_truth: common.ground_truth.clone(),
        scorers: (!common.scorers.is_empty()).then(|| common.scorers.clone()),
        threshold: common.threshold,
        ..Default::default()
    })
}

fn load_config(cli_config: &Option<PathBuf>, overrides: Overrides) -> Result<RunConfig> {
    let file = match cli_config {
        Some(path) => ConfigFile::load(path)?,
        None => {
            let default = PathBuf::from("thematic.toml");
            if default.is_file() {
                ConfigFile::load(&default)?
            } else {
                ConfigFile::default()
            }
        }
    };
    Ok(build_config(file, overrides)?)
}

fn parse_grid(expr: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = expr.split(':').collect();
    if parts.len() != 3 {
        bail!("grid must be start:end:step, got `{expr}`");
    }
    let start: f64 = parts[0].parse().context("grid start")?;
    let end: f64 = parts[1].parse().context("grid end")?;
    let step: f64 = parts[2].parse().context("grid step")?;
    if step <= 0.0 || end < start {
        bail!("grid must ascend with a positive step");
    }
    let mut grid = Vec::new();
    let mut theta = start;
    while theta <= end + 1e-12 {
        grid.push(theta.min(end));
        theta += step;
    }
    Ok(grid)
}

fn print_run_outcome(manifest: &pipeline::RunManifest) {
    println!("run {}  [{}]", manifest.run_id, manifest.status);
    println!(
        "  mode {}  strategy {}  model {}  temperature {}",
        manifest.mode, manifest.strategy, manifest.model_id, manifest.temperature
    );
    if !manifest.resumed_stages.is_empty() {
        println!("  resumed stages: {}", manifest.resumed_stages.join(", "));
    }
    for timing in &manifest.stage_timings {
        println!("  {:<16} {:>10.1} ms", timing.stage, timing.ms);
    }
    println!("  {:<16} {:>10.1} ms", "total", manifest.total_ms);
    println!(
        "  gateway: {} provider calls, {} network calls, {} cache hits",
        manifest.gateway.provider_calls,
        manifest.gateway.network_calls,
        manifest.gateway.cache_hits
    );
    if !manifest.warnings.is_empty() {
        println!("  warnings: {}", manifest.warnings.len());
    }
    println!("  artifacts under {}", manifest.run_id);
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    match cli.command {
        Command::Ingest { common } => {
            let cfg = load_config(&cli.config, overrides_from(&common)?)?;
            let manifest = pipeline::ingest(&cfg)?;
            print_run_outcome(&manifest);
        }
        Command::Run {
            strategy,
            eval,
            common,
        } => {
            let mut ov = overrides_from(&common)?;
            ov.mode = Some(RunMode::LlmTa);
            ov.strategy = strategy.as_deref().map(parse_strategy).transpose()?;
            ov.eval_auto = eval.then_some(true);
            let cfg = load_config(&cli.config, ov)?;
            let manifest = pipeline::run_pipeline(&cfg)?;
            print_run_outcome(&manifest);
            if cfg.eval.auto {
                let report_path = cfg
                    .paths
                    .output_dir
                    .join(&manifest.run_id)
                    .join("eval/report.json");
                let raw = std::fs::read_to_string(report_path)?;
                let report: thematic_core::evaluation::EvaluationReport =
                    serde_json::from_str(&raw)?;
                println!("\n{}", pipeline::format_report_table(&[&report]));
            }
        }
        Command::Baseline { reflexion, common } => {
            let mut ov = overrides_from(&common)?;
            ov.mode = Some(RunMode::Baseline);
            ov.baseline_reflexion = reflexion.then_some(true);
            let cfg = load_config(&cli.config, ov)?;
            let manifest = pipeline::run_pipeline(&cfg)?;
            print_run_outcome(&manifest);
        }
        Command::Eval {
            run_id,
            human_row,
            common,
        } => {
            let cfg = load_config(&cli.config, overrides_from(&common)?)?;
            let (report, human) = pipeline::evaluate_run(&cfg, &run_id, human_row)?;
            let mut rows = vec![&report];
            if let Some(human) = &human {
                rows.push(human);
            }
            println!("{}", pipeline::format_report_table(&rows));
        }
        Command::Sweep {
            run_id,
            grid,
            common,
        } => {
            let scorer = common
                .scorers
                .first()
                .cloned()
                .unwrap_or_else(|| thematic_core::config::DEFAULT_SCORER.to_string());
            let cfg = load_config(&cli.config, overrides_from(&common)?)?;
            let grid = match grid {
                Some(expr) => parse_grid(&expr)?,
                None => pipeline::default_sweep_grid(),
            };
            let points = pipeline::sweep_run(&cfg, &run_id, &scorer, &grid)?;
            println!("{:>9} {:>9} {:>9}", "θ", "jaccard", "hit_rate");
            for p in points {
                println!("{:>9.3} {:>9.3} {:>9.3}", p.threshold, p.jaccard, p.hit_rate);
            }
        }
        Command::Report { run_id, common } => {
            let cfg = load_config(&cli.config, overrides_from(&common)?)?;
            print!("{}", pipeline::report(&cfg, &run_id)?);
        }
    }
    Ok(())
}
