//! Run configuration: TOML file plus command-line overrides.
//!
//! Every value in the file is optional; unset values fall back to the
//! pipeline defaults (chunk budget 1,500 words, group budget 6,000 words,
//! temperature 0 for the chunked pipeline and 1.0 for the baseline).

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{StrategyKind, StudyContext};

pub const DEFAULT_MODEL_ID: &str = "gpt-4o-mini-2024-07-18";
pub const DEFAULT_GROUP_BUDGET_WORDS: usize = 6_000;
pub const DEFAULT_PARALLELISM: usize = 4;
pub const DEFAULT_SCORER: &str = "all-MiniLM-L6-v2";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    LlmTa,
    Baseline,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::LlmTa => "llm_ta",
            RunMode::Baseline => "baseline",
        }
    }
}

/// Options specific to the no-chunking comparison method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineOptions {
    pub reflexion: bool,
    pub temperature: f64,
    pub refine_iterations: usize,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            reflexion: false,
            temperature: 1.0,
            refine_iterations: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub scorers: Vec<String>,
    pub thresholds: BTreeMap<String, f64>,
    /// Evaluate immediately after the pipeline completes.
    pub auto: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            scorers: vec![DEFAULT_SCORER.to_string()],
            thresholds: BTreeMap::new(),
            auto: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub ground_truth: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub templates_dir: Option<PathBuf>,
}

/// Fully resolved configuration for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub strategy: StrategyKind,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
    pub max_words: usize,
    pub group_budget_words: usize,
    pub include_quotes_in_theming: bool,
    pub include_facilitator_turns: bool,
    pub parallelism: usize,
    pub mock: bool,
    pub baseline: BaselineOptions,
    pub eval: EvalOptions,
    pub paths: Paths,
    pub context: StudyContext,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct ConfigFile {
    #[serde(default)]
    run: RunSection,
    #[serde(default)]
    baseline: BaselineSection,
    #[serde(default)]
    eval: EvalSection,
    #[serde(default)]
    paths: PathsSection,
    #[serde(default)]
    context: Option<StudyContext>,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct RunSection {
    mode: Option<String>,
    strategy: Option<String>,
    model_id: Option<String>,
    temperature: Option<f64>,
    max_output_tokens: Option<u32>,
    max_words: Option<usize>,
    group_budget_words: Option<usize>,
    include_quotes_in_theming: Option<bool>,
    include_facilitator_turns: Option<bool>,
    parallelism: Option<usize>,
    mock: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct BaselineSection {
    reflexion: Option<bool>,
    temperature: Option<f64>,
    refine_iterations: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct EvalSection {
    scorers: Option<Vec<String>>,
    thresholds: Option<BTreeMap<String, f64>>,
    auto: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct PathsSection {
    corpus_dir: Option<PathBuf>,
    ground_truth: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    templates_dir: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        toml::from_str(&raw).map_err(|e| ConfigError::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Command-line overrides; every set field wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<RunMode>,
    pub strategy: Option<StrategyKind>,
    pub model_id: Option<String>,
    pub temperature: Option<f64>,
    pub max_words: Option<usize>,
    pub group_budget_words: Option<usize>,
    pub parallelism: Option<usize>,
    pub mock: Option<bool>,
    pub baseline_reflexion: Option<bool>,
    pub scorers: Option<Vec<String>>,
    pub threshold: Option<f64>,
    pub eval_auto: Option<bool>,
    pub corpus_dir: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
}

pub fn parse_strategy(name: &str) -> Result<StrategyKind, ConfigError> {
    match name {
        "zero" | "zero_shot" => Ok(StrategyKind::ZeroShot),
        "one" | "one_shot" => Ok(StrategyKind::OneShot),
        "reflexion" | "one_shot_reflexion" => Ok(StrategyKind::OneShotReflexion),
        other => Err(ConfigError::Invalid(format!(
            "unknown strategy `{other}` (expected zero|one|reflexion)"
        ))),
    }
}

fn parse_mode(name: &str) -> Result<RunMode, ConfigError> {
    match name {
        "llm_ta" => Ok(RunMode::LlmTa),
        "baseline" => Ok(RunMode::Baseline),
        other => Err(ConfigError::Invalid(format!(
            "unknown mode `{other}` (expected llm_ta|baseline)"
        ))),
    }
}

/// Merge file and overrides into a resolved [`RunConfig`].
pub fn build_config(file: ConfigFile, ov: Overrides) -> Result<RunConfig, ConfigError> {
    let mode = match ov.mode {
        Some(m) => m,
        None => match &file.run.mode {
            Some(m) => parse_mode(m)?,
            None => RunMode::LlmTa,
        },
    };
    let strategy = match ov.strategy {
        Some(s) => s,
        None => match &file.run.strategy {
            Some(s) => parse_strategy(s)?,
            None => StrategyKind::ZeroShot,
        },
    };

    let baseline = BaselineOptions {
        reflexion: ov
            .baseline_reflexion
            .or(file.baseline.reflexion)
            .unwrap_or(false),
        temperature: file.baseline.temperature.unwrap_or(1.0),
        refine_iterations: file.baseline.refine_iterations.unwrap_or(1),
    };
    if baseline.temperature <= 0.0 {
        return Err(ConfigError::Invalid(
            "baseline temperature must be > 0".to_string(),
        ));
    }

    // Mode-dependent default: 0 for the chunked pipeline (reproducibility),
    // the baseline option's value for baseline runs. Explicit values win and
    // are recorded in the manifest either way.
    let temperature = ov
        .temperature
        .or(file.run.temperature)
        .unwrap_or(match mode {
            RunMode::LlmTa => 0.0,
            RunMode::Baseline => baseline.temperature,
        });
    if !(0.0..=2.0).contains(&temperature) {
        return Err(ConfigError::Invalid(format!(
            "temperature {temperature} outside [0, 2]"
        )));
    }

    let mut thresholds = file.eval.thresholds.unwrap_or_default();
    let scorers = ov
        .scorers
        .or(file.eval.scorers)
        .unwrap_or_else(|| vec![DEFAULT_SCORER.to_string()]);
    if let Some(threshold) = ov.threshold {
        for scorer in &scorers {
            thresholds.insert(scorer.clone(), threshold);
        }
    }

    let max_words = ov
        .max_words
        .or(file.run.max_words)
        .unwrap_or(crate::corpus::DEFAULT_MAX_WORDS);
    if max_words == 0 {
        return Err(ConfigError::Invalid("max_words must be ≥ 1".to_string()));
    }

    Ok(RunConfig {
        mode,
        strategy,
        model_id: ov
            .model_id
            .or(file.run.model_id)
            .unwrap_or_else(|| DEFAULT_MODEL_ID.to_string()),
        temperature,
        max_output_tokens: file.run.max_output_tokens,
        max_words,
        group_budget_words: ov
            .group_budget_words
            .or(file.run.group_budget_words)
            .unwrap_or(DEFAULT_GROUP_BUDGET_WORDS),
        include_quotes_in_theming: file.run.include_quotes_in_theming.unwrap_or(false),
        include_facilitator_turns: file.run.include_facilitator_turns.unwrap_or(true),
        parallelism: ov
            .parallelism
            .or(file.run.parallelism)
            .unwrap_or(DEFAULT_PARALLELISM)
            .max(1),
        mock: ov.mock.or(file.run.mock).unwrap_or(false),
        baseline,
        eval: EvalOptions {
            scorers,
            thresholds,
            auto: ov.eval_auto.or(file.eval.auto).unwrap_or(false),
        },
        paths: Paths {
            corpus_dir: ov
                .corpus_dir
                .or(file.paths.corpus_dir)
                .unwrap_or_else(|| PathBuf::from("corpus")),
            ground_truth: ov.ground_truth.or(file.paths.ground_truth),
            output_dir: ov
                .output_dir
                .or(file.paths.output_dir)
                .unwrap_or_else(|| PathBuf::from("runs")),
            templates_dir: ov.templates_dir.or(file.paths.templates_dir),
        },
        context: file.context.unwrap_or_default(),
    })
}
