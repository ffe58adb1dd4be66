//! End-to-end run orchestration with persisted stage artifacts.
//!
//! A run is identified by a content hash of its configuration, corpus and
//! template digests, so repeating an experiment lands in the same run
//! directory and resumes from whatever artifacts already exist. Every stage
//! is timed on a contiguous clock (the laps partition the wall time), every
//! persisted file is listed in the manifest, and gateway statistics make
//! "zero network calls on replay" checkable after the fact.
//!
//! Run directory layout:
//!
//! ```text
//! runs/<run_id>/
//!   manifest.json  chunks.json  codes.json  groups.json
//!   prelim_themes.json  critiques.json  final_themes.json
//!   eval/<scorer>/{scores.csv, mask.csv, metrics.json, sweep.csv}
//!   cache/<digest>.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{
    baseline_coding_stage, baseline_theming_stage, BaselineConfig, BaselineError,
};
use crate::codegen::{generate_codes, group_codes, Code, CodeGroup, CodegenError};
use crate::config::{RunConfig, RunMode};
use crate::corpus::{chunk_transcript, load_corpus, Chunk, CorpusError, Transcript};
use crate::evaluation::{
    binarize, export_heatmap, export_sweep, hit_rate, jaccard, sensitivity_sweep,
    similarity_matrix, EvalError, EvaluationReport, GroundTruth, Scorer, ScorerMetrics,
    SweepPoint,
};
use crate::gateway::http::{HttpProvider, API_KEY_ENV};
use crate::gateway::mock::MockProvider;
use crate::gateway::{sha256_hex, ChatRequest, Gateway, GatewayError, GatewayStats};
use crate::prompts::{PromptError, Prompts, Strategy, StrategyKind, TemplateStore};
use crate::theming::{
    generate_preliminary_themes, reflexion_refine, synthesize_final_themes, Critique, Theme,
    ThemeStageTag, ThemingError,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHUNKS_FILE: &str = "chunks.json";
pub const CODES_FILE: &str = "codes.json";
pub const GROUPS_FILE: &str = "groups.json";
pub const PRELIM_THEMES_FILE: &str = "prelim_themes.json";
pub const CRITIQUES_FILE: &str = "critiques.json";
pub const FINAL_THEMES_FILE: &str = "final_themes.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run {run_id} is missing artifact {artifact}")]
    MissingArtifact { run_id: String, artifact: String },
    #[error("{path}: {reason}")]
    Artifact { path: String, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Codegen(#[from] CodegenError),
    #[error(transparent)]
    Theming(#[from] ThemingError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub mode: String,
    pub strategy: String,
    pub status: String,
    pub failed_stage: Option<String>,
    pub model_id: String,
    pub temperature: f64,
    pub config: serde_json::Value,
    pub template_digests: BTreeMap<String, String>,
    /// Digest over everything that determines the rendered prompts:
    /// strategy, templates, exemplar, model and temperature.
    pub prompt_digest: String,
    pub corpus_digests: BTreeMap<String, String>,
    pub notes: BTreeMap<String, String>,
    pub stage_timings: Vec<StageTiming>,
    pub total_ms: f64,
    pub warnings: Vec<String>,
    pub artifacts: Vec<String>,
    pub resumed_stages: Vec<String>,
    pub gateway: GatewayStats,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, PipelineError> {
        let path = run_dir.join(MANIFEST_FILE);
        let raw = fs::read_to_string(&path).map_err(|_| {
            PipelineError::UnknownRun(run_dir.display().to_string())
        })?;
        serde_json::from_str(&raw).map_err(|e| PipelineError::Artifact {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), PipelineError> {
        write_json(&run_dir.join(MANIFEST_FILE), self)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupRecord {
    group_index: usize,
    code_ids: Vec<String>,
}

/// Sequential stage clock: laps are contiguous, so they partition the wall
/// time between construction and the last lap exactly.
struct RunState {
    run_id: String,
    run_dir: PathBuf,
    stage: String,
    start: Instant,
    last: Instant,
    timings: Vec<StageTiming>,
    warnings: Vec<String>,
    artifacts: Vec<String>,
    resumed: Vec<String>,
    notes: BTreeMap<String, String>,
}

impl RunState {
    fn new() -> Self {
        let now = Instant::now();
        Self {
            run_id: String::new(),
            run_dir: PathBuf::new(),
            stage: "setup".to_string(),
            start: now,
            last: now,
            timings: Vec::new(),
            warnings: Vec::new(),
            artifacts: Vec::new(),
            resumed: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    fn begin(&mut self, stage: &str) {
        self.stage = stage.to_string();
    }

    fn lap(&mut self) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage: self.stage.clone(),
            ms: now.duration_since(self.last).as_secs_f64() * 1e3,
        });
        self.last = now;
    }

    fn total_ms(&self) -> f64 {
        self.last.duration_since(self.start).as_secs_f64() * 1e3
    }

    fn record_artifact(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    fn save_artifact<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), PipelineError> {
        write_json(&self.run_dir.join(name), value)?;
        self.record_artifact(name);
        Ok(())
    }

    /// Load an artifact if present, marking the surrounding stage resumed.
    fn resume_artifact<T: serde::de::DeserializeOwned>(
        &mut self,
        name: &str,
    ) -> Result<Option<T>, PipelineError> {
        let path = self.run_dir.join(name);
        if !path.exists() {
            return Ok(None);
        }
        let value = read_json(&path)?;
        self.record_artifact(name);
        if !self.resumed.iter().any(|s| s == &self.stage) {
            self.resumed.push(self.stage.clone());
        }
        Ok(Some(value))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::Artifact {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    let mut body = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Artifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    body.push('\n');
    fs::write(path, body).map_err(|e| PipelineError::Artifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let raw = fs::read_to_string(path).map_err(|e| PipelineError::Artifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&raw).map_err(|e| PipelineError::Artifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn template_store(cfg: &RunConfig) -> TemplateStore {
    match &cfg.paths.templates_dir {
        Some(dir) => TemplateStore::with_dir(dir.clone()),
        None => TemplateStore::embedded_only(),
    }
}

fn resolve_strategy(kind: StrategyKind, store: &TemplateStore) -> Result<Strategy, PipelineError> {
    Ok(match kind {
        StrategyKind::ZeroShot => Strategy::zero_shot(),
        StrategyKind::OneShot => Strategy::one_shot(store.default_exemplar()?),
        StrategyKind::OneShotReflexion => Strategy::one_shot_reflexion(store.default_exemplar()?),
    })
}

fn build_gateway(cfg: &RunConfig, cache_dir: PathBuf) -> Result<Gateway, PipelineError> {
    let provider: Box<dyn crate::gateway::Provider> = if cfg.mock {
        Box::new(MockProvider::new())
    } else {
        Box::new(HttpProvider::from_env()?)
    };
    Ok(Gateway::new(provider, Some(cache_dir)).with_parallelism(cfg.parallelism))
}

fn request_factory(
    model_id: String,
    temperature: f64,
    max_output_tokens: Option<u32>,
) -> impl Fn(&str, &str) -> ChatRequest + Sync {
    move |system: &str, user: &str| ChatRequest {
        model_id: model_id.clone(),
        temperature,
        system_prompt: system.to_string(),
        user_prompt: user.to_string(),
        max_output_tokens,
    }
}

/// Fail-fast validation before any model call.
pub fn validate_config(cfg: &RunConfig) -> Result<(), PipelineError> {
    if !cfg.paths.corpus_dir.is_dir() {
        return Err(PipelineError::Config(format!(
            "corpus directory {} does not exist",
            cfg.paths.corpus_dir.display()
        )));
    }
    if cfg.eval.auto {
        match &cfg.paths.ground_truth {
            None => {
                return Err(PipelineError::Config(
                    "evaluation requested but no ground-truth path is configured".to_string(),
                ))
            }
            Some(path) if !path.is_file() => {
                return Err(PipelineError::Config(format!(
                    "ground-truth file {} does not exist",
                    path.display()
                )))
            }
            _ => {}
        }
    }
    if !cfg.mock && std::env::var(API_KEY_ENV).is_err() {
        return Err(PipelineError::Config(format!(
            "{API_KEY_ENV} is not set and --mock was not requested"
        )));
    }
    if cfg.mode == RunMode::Baseline {
        BaselineConfig {
            reflexion: cfg.baseline.reflexion,
            temperature: cfg.baseline.temperature,
            model_id: cfg.model_id.clone(),
            refine_iterations: cfg.baseline.refine_iterations,
        }
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    Ok(())
}

fn compute_run_id(
    cfg: &RunConfig,
    corpus_digests: &BTreeMap<String, String>,
    template_digests: &BTreeMap<String, String>,
) -> String {
    let identity = serde_json::json!({
        "mode": cfg.mode.as_str(),
        "strategy": cfg.strategy.as_str(),
        "model_id": cfg.model_id,
        "temperature": cfg.temperature,
        "max_output_tokens": cfg.max_output_tokens,
        "max_words": cfg.max_words,
        "group_budget_words": cfg.group_budget_words,
        "include_quotes_in_theming": cfg.include_quotes_in_theming,
        "include_facilitator_turns": cfg.include_facilitator_turns,
        "provider": if cfg.mock { "mock" } else { "http" },
        "baseline": if cfg.mode == RunMode::Baseline { Some(&cfg.baseline) } else { None },
        "corpus": corpus_digests,
        "templates": template_digests,
        "context": sha256_hex(
            serde_json::to_string(&cfg.context).expect("context serializes").as_bytes()
        ),
    });
    sha256_hex(identity.to_string().as_bytes())[..16].to_string()
}

fn prompt_digest(cfg: &RunConfig, strategy: &Strategy, templates: &BTreeMap<String, String>) -> String {
    let exemplar_digest = strategy
        .exemplar
        .as_ref()
        .map(|e| sha256_hex(format!("{}\n{}", e.coding, e.theming).as_bytes()));
    let value = serde_json::json!({
        "strategy": cfg.strategy.as_str(),
        "templates": templates,
        "exemplar": exemplar_digest,
        "model_id": cfg.model_id,
        "temperature": cfg.temperature,
    });
    sha256_hex(value.to_string().as_bytes())
}

const FACILITATOR_LABELS: &[&str] = &["fac", "facilitator", "int", "interviewer", "mod", "moderator"];

fn drop_facilitator_turns(transcripts: &mut [Transcript]) {
    for transcript in transcripts.iter_mut() {
        transcript.turns.retain(|t| {
            !FACILITATOR_LABELS.contains(&t.speaker.trim().to_lowercase().as_str())
        });
        for (i, turn) in transcript.turns.iter_mut().enumerate() {
            turn.index = i;
        }
        transcript.word_total = transcript
            .turns
            .iter()
            .map(|t| crate::corpus::word_count(&t.text))
            .sum();
    }
}

/// Execute a full run (chunked pipeline or baseline), persisting artifacts
/// and the manifest. Completed stages found on disk are loaded, not redone.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    validate_config(cfg)?;
    let prompts = Prompts::new(template_store(cfg), cfg.context.clone())?;
    let strategy = resolve_strategy(cfg.strategy, prompts.store())?;
    let template_digests = prompts.store().digests();

    let mut state = RunState::new();
    state.begin("ingest");
    let mut transcripts = load_corpus(&cfg.paths.corpus_dir)?;
    if transcripts.is_empty() {
        return Err(PipelineError::Config(format!(
            "corpus directory {} contains no transcripts",
            cfg.paths.corpus_dir.display()
        )));
    }
    if cfg.include_facilitator_turns {
        state.notes.insert(
            "facilitator_turns".to_string(),
            "included: all speaker turns are coded".to_string(),
        );
    } else {
        drop_facilitator_turns(&mut transcripts);
        transcripts.retain(|t| !t.turns.is_empty());
        state.notes.insert(
            "facilitator_turns".to_string(),
            "excluded by configuration".to_string(),
        );
    }
    state.notes.insert(
        "max_output_tokens".to_string(),
        cfg.max_output_tokens
            .map(|v| v.to_string())
            .unwrap_or_else(|| "provider default".to_string()),
    );
    state.notes.insert(
        "theming_payload".to_string(),
        if cfg.include_quotes_in_theming {
            "code names, descriptions and quotes".to_string()
        } else {
            "code names and descriptions only".to_string()
        },
    );

    let corpus_digests: BTreeMap<String, String> = transcripts
        .iter()
        .map(|t| {
            let body = serde_json::to_string(t).expect("transcript serializes");
            (t.id.clone(), sha256_hex(body.as_bytes()))
        })
        .collect();
    state.lap();

    state.run_id = compute_run_id(cfg, &corpus_digests, &template_digests);
    state.run_dir = cfg.paths.output_dir.join(&state.run_id);
    fs::create_dir_all(state.run_dir.join("cache")).map_err(|e| PipelineError::Artifact {
        path: state.run_dir.display().to_string(),
        reason: e.to_string(),
    })?;
    let gateway = build_gateway(cfg, state.run_dir.join("cache"))?;

    let result: Result<(), PipelineError> = match cfg.mode {
        RunMode::LlmTa => {
            run_llm_ta(cfg, &mut state, &transcripts, &prompts, &strategy, &gateway)
        }
        RunMode::Baseline => run_baseline_mode(cfg, &mut state, &transcripts, &prompts, &gateway),
    }
    .and_then(|()| {
        if cfg.eval.auto {
            state.begin("evaluate");
            let outcome = evaluate_into_run(cfg, &mut state, &prompts, &gateway);
            state.lap();
            outcome.map(|_| ())
        } else {
            Ok(())
        }
    });

    let (status, failed_stage) = match &result {
        Ok(()) => ("completed", None),
        Err(_) => ("failed", Some(state.stage.clone())),
    };
    let manifest = RunManifest {
        run_id: state.run_id.clone(),
        mode: cfg.mode.as_str().to_string(),
        strategy: cfg.strategy.as_str().to_string(),
        status: status.to_string(),
        failed_stage,
        model_id: cfg.model_id.clone(),
        temperature: cfg.temperature,
        config: serde_json::to_value(cfg).expect("config serializes"),
        template_digests,
        prompt_digest: prompt_digest(cfg, &strategy, &prompts.store().digests()),
        corpus_digests,
        notes: state.notes.clone(),
        stage_timings: state.timings.clone(),
        total_ms: state.total_ms(),
        warnings: state.warnings.clone(),
        artifacts: state.artifacts.clone(),
        resumed_stages: state.resumed.clone(),
        gateway: gateway.stats(),
    };
    manifest.save(&state.run_dir)?;
    result.map(|()| manifest)
}

fn run_llm_ta(
    cfg: &RunConfig,
    state: &mut RunState,
    transcripts: &[Transcript],
    prompts: &Prompts,
    strategy: &Strategy,
    gateway: &Gateway,
) -> Result<(), PipelineError> {
    let request = request_factory(cfg.model_id.clone(), cfg.temperature, cfg.max_output_tokens);

    state.begin("chunk");
    let chunks: Vec<Chunk> = match state.resume_artifact(CHUNKS_FILE)? {
        Some(chunks) => chunks,
        None => {
            let chunks: Vec<Chunk> = transcripts
                .iter()
                .flat_map(|t| chunk_transcript(t, cfg.max_words))
                .collect();
            state.save_artifact(CHUNKS_FILE, &chunks)?;
            chunks
        }
    };
    let oversize = chunks.iter().filter(|c| c.oversize).count();
    if oversize > 0 {
        state
            .warnings
            .push(format!("{oversize} chunk(s) exceed the word budget (indivisible sentences)"));
    }
    state.lap();

    state.begin("code");
    let codes: Vec<Code> = match state.resume_artifact(CODES_FILE)? {
        Some(codes) => codes,
        None => {
            let per_chunk: Vec<(Vec<Code>, Vec<String>)> =
                gateway.map_bounded(&chunks, |_, chunk| {
                    generate_codes(chunk, prompts, strategy, gateway, &request)
                })?;
            let mut codes = Vec::new();
            for (mut chunk_codes, mut warnings) in per_chunk {
                codes.append(&mut chunk_codes);
                state.warnings.append(&mut warnings);
            }
            state.save_artifact(CODES_FILE, &codes)?;
            codes
        }
    };
    state.lap();

    state.begin("group");
    let groups: Vec<CodeGroup> = match state.resume_artifact::<Vec<GroupRecord>>(GROUPS_FILE)? {
        Some(records) => rebuild_groups(&state.run_id, records, &codes)?,
        None => {
            let groups = group_codes(&codes, cfg.group_budget_words)?;
            let records: Vec<GroupRecord> = groups
                .iter()
                .map(|g| GroupRecord {
                    group_index: g.group_index,
                    code_ids: g.codes.iter().map(|c| c.id.clone()).collect(),
                })
                .collect();
            state.save_artifact(GROUPS_FILE, &records)?;
            groups
        }
    };
    state.lap();

    state.begin("prelim_themes");
    let mut critiques: Vec<Critique> = Vec::new();
    let prelim_sets: Vec<Vec<Theme>> = match state.resume_artifact::<Vec<Theme>>(PRELIM_THEMES_FILE)? {
        Some(themes) => {
            if let Some(existing) = state.resume_artifact::<Vec<Critique>>(CRITIQUES_FILE)? {
                critiques.extend(
                    existing
                        .into_iter()
                        .filter(|c| c.stage == ThemeStageTag::Preliminary),
                );
            }
            split_by_group(themes, groups.len())
        }
        None => {
            let per_group: Vec<(Vec<Theme>, Option<Critique>, Vec<String>)> =
                gateway.map_bounded(&groups, |_, group| {
                    let (themes, mut warnings) = generate_preliminary_themes(
                        group,
                        prompts,
                        strategy,
                        cfg.include_quotes_in_theming,
                        gateway,
                        &request,
                    )?;
                    if strategy.kind.uses_reflexion() {
                        let (critique, refined, mut more) =
                            reflexion_refine(&themes, &group.codes, prompts, gateway, &request)?;
                        warnings.append(&mut more);
                        Ok((refined, Some(critique), warnings))
                    } else {
                        Ok::<_, ThemingError>((themes, None, warnings))
                    }
                })?;
            let mut sets = Vec::with_capacity(per_group.len());
            for (themes, critique, mut warnings) in per_group {
                state.warnings.append(&mut warnings);
                critiques.extend(critique);
                sets.push(themes);
            }
            let flat: Vec<&Theme> = sets.iter().flatten().collect();
            state.save_artifact(PRELIM_THEMES_FILE, &flat)?;
            if strategy.kind.uses_reflexion() {
                state.save_artifact(CRITIQUES_FILE, &critiques)?;
            }
            sets
        }
    };
    state.lap();

    state.begin("final_themes");
    match state.resume_artifact::<Vec<Theme>>(FINAL_THEMES_FILE)? {
        Some(_) => {}
        None => {
            let all_codes = &codes;
            let (mut finals, mut warnings) = synthesize_final_themes(
                &prelim_sets,
                all_codes,
                prompts,
                strategy,
                gateway,
                &request,
            )?;
            state.warnings.append(&mut warnings);
            if strategy.kind.uses_reflexion() {
                let (critique, refined, mut more) =
                    reflexion_refine(&finals, all_codes, prompts, gateway, &request)?;
                state.warnings.append(&mut more);
                critiques.push(critique);
                finals = refined;
            }
            state.save_artifact(FINAL_THEMES_FILE, &finals)?;
            if strategy.kind.uses_reflexion() {
                state.save_artifact(CRITIQUES_FILE, &critiques)?;
            }
        }
    }
    state.lap();
    Ok(())
}

fn run_baseline_mode(
    cfg: &RunConfig,
    state: &mut RunState,
    transcripts: &[Transcript],
    prompts: &Prompts,
    gateway: &Gateway,
) -> Result<(), PipelineError> {
    let baseline_cfg = BaselineConfig {
        reflexion: cfg.baseline.reflexion,
        temperature: cfg.temperature,
        model_id: cfg.model_id.clone(),
        refine_iterations: cfg.baseline.refine_iterations,
    };
    baseline_cfg
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let request = request_factory(cfg.model_id.clone(), cfg.temperature, cfg.max_output_tokens);

    state.begin("code");
    let codes: Vec<Code> = match state.resume_artifact(CODES_FILE)? {
        Some(codes) => codes,
        None => {
            let (codes, mut warnings, overflowed) =
                baseline_coding_stage(transcripts, prompts, gateway, &request)?;
            state.warnings.append(&mut warnings);
            if !overflowed.is_empty() {
                state.notes.insert(
                    "overflowed_transcripts".to_string(),
                    overflowed.join(", "),
                );
            }
            state.save_artifact(CODES_FILE, &codes)?;
            codes
        }
    };
    state.lap();

    state.begin("theme");
    if state.resume_artifact::<Vec<Theme>>(FINAL_THEMES_FILE)?.is_none() {
        let (themes, critiques, mut warnings) =
            baseline_theming_stage(&codes, prompts, &baseline_cfg, gateway, &request)?;
        state.warnings.append(&mut warnings);
        state.save_artifact(FINAL_THEMES_FILE, &themes)?;
        if !critiques.is_empty() {
            state.save_artifact(CRITIQUES_FILE, &critiques)?;
        }
    }
    state.lap();
    Ok(())
}

fn rebuild_groups(
    run_id: &str,
    records: Vec<GroupRecord>,
    codes: &[Code],
) -> Result<Vec<CodeGroup>, PipelineError> {
    records
        .into_iter()
        .map(|record| {
            let group_codes: Result<Vec<Code>, PipelineError> = record
                .code_ids
                .iter()
                .map(|id| {
                    codes
                        .iter()
                        .find(|c| &c.id == id)
                        .cloned()
                        .ok_or_else(|| PipelineError::MissingArtifact {
                            run_id: run_id.to_string(),
                            artifact: format!("{GROUPS_FILE} references unknown code {id}"),
                        })
                })
                .collect();
            Ok(CodeGroup {
                group_index: record.group_index,
                codes: group_codes?,
            })
        })
        .collect()
}

fn split_by_group(themes: Vec<Theme>, group_count: usize) -> Vec<Vec<Theme>> {
    let mut sets: Vec<Vec<Theme>> = (0..group_count.max(1)).map(|_| Vec::new()).collect();
    for theme in themes {
        let idx = theme.group_index.unwrap_or(0).min(sets.len() - 1);
        sets[idx].push(theme);
    }
    sets
}

/// Default threshold grid for sweeps: 0.00, 0.02, …, 1.00.
pub fn default_sweep_grid() -> Vec<f64> {
    (0..=50).map(|i| f64::from(i) * 0.02).collect()
}

fn scorer_threshold(cfg: &RunConfig, scorer: &Scorer) -> f64 {
    cfg.eval
        .thresholds
        .get(&scorer.id)
        .copied()
        .unwrap_or(scorer.default_threshold)
}

fn ground_truth_from_config(cfg: &RunConfig) -> Result<GroundTruth, PipelineError> {
    let path = cfg.paths.ground_truth.as_ref().ok_or_else(|| {
        PipelineError::Config("no ground-truth path is configured".to_string())
    })?;
    Ok(GroundTruth::load(path)?)
}

struct EvalContext<'a> {
    cfg: &'a RunConfig,
    prompts: &'a Prompts,
    gateway: &'a Gateway,
}

fn evaluate_theme_set(
    ctx: &EvalContext,
    ground_truth: &GroundTruth,
    themes: &[Theme],
    method: &str,
    run_id: &str,
    mut export_dir: Option<(&mut RunState, &Path)>,
) -> Result<EvaluationReport, PipelineError> {
    let cfg = ctx.cfg;
    // Judge requests run at temperature 0 regardless of the pipeline
    // temperature so scoring stays reproducible.
    let request = request_factory(cfg.model_id.clone(), 0.0, cfg.max_output_tokens);
    let mut rows = Vec::new();
    for scorer_name in &cfg.eval.scorers {
        let scorer = Scorer::resolve(scorer_name);
        let threshold = scorer_threshold(cfg, &scorer);
        let (sim, warnings) =
            similarity_matrix(ground_truth, themes, &scorer, ctx.prompts, ctx.gateway, &request)?;
        let bin = binarize(&sim, threshold);
        let metrics = ScorerMetrics {
            scorer_id: scorer.id.clone(),
            threshold,
            jaccard: jaccard(&bin),
            hit_rate: hit_rate(&bin),
        };
        if let Some((state, eval_root)) = export_dir.as_mut() {
            state.warnings.extend(warnings);
            let scorer_dir = eval_root.join(&scorer.id);
            let scores_rel = format!("eval/{}/scores.csv", scorer.id);
            let mask_rel = format!("eval/{}/mask.csv", scorer.id);
            export_heatmap(
                &sim,
                Some(&bin),
                &scorer_dir.join("scores.csv"),
                &scorer_dir.join("mask.csv"),
            )?;
            write_json(&scorer_dir.join("metrics.json"), &metrics)?;
            let sweep = sensitivity_sweep(&sim, &default_sweep_grid())?;
            export_sweep(&sweep, &scorer_dir.join("sweep.csv"))?;
            state.record_artifact(&scores_rel);
            state.record_artifact(&mask_rel);
            state.record_artifact(&format!("eval/{}/metrics.json", scorer.id));
            state.record_artifact(&format!("eval/{}/sweep.csv", scorer.id));
        }
        rows.push(metrics);
    }
    Ok(EvaluationReport {
        run_id: run_id.to_string(),
        method: method.to_string(),
        human_theme_count: ground_truth.themes.len(),
        llm_theme_count: themes.len(),
        scorers: rows,
    })
}

fn evaluate_into_run(
    cfg: &RunConfig,
    state: &mut RunState,
    prompts: &Prompts,
    gateway: &Gateway,
) -> Result<EvaluationReport, PipelineError> {
    let ground_truth = ground_truth_from_config(cfg)?;
    let themes: Vec<Theme> = read_json(&state.run_dir.join(FINAL_THEMES_FILE))?;
    let method = format!("{}/{}", cfg.mode.as_str(), cfg.strategy.as_str());
    state.notes.insert(
        "judge_reply_format".to_string(),
        "bare number in [0, 1]".to_string(),
    );
    let run_id = state.run_id.clone();
    let eval_root = state.run_dir.join("eval");
    let ctx = EvalContext {
        cfg,
        prompts,
        gateway,
    };
    let report = evaluate_theme_set(
        &ctx,
        &ground_truth,
        &themes,
        &method,
        &run_id,
        Some((state, &eval_root)),
    )?;
    write_json(&state.run_dir.join("eval/report.json"), &report)?;
    state.record_artifact("eval/report.json");
    Ok(report)
}

/// Evaluate a completed run against the ground truth, writing matrices,
/// masks, metrics and sweeps under `eval/<scorer>/` and updating the
/// manifest's artifact inventory. With `human_row`, also compute the
/// ground-truth-vs-itself reference row.
pub fn evaluate_run(
    cfg: &RunConfig,
    run_id: &str,
    human_row: bool,
) -> Result<(EvaluationReport, Option<EvaluationReport>), PipelineError> {
    let run_dir = cfg.paths.output_dir.join(run_id);
    let mut manifest = RunManifest::load(&run_dir)?;
    let themes_path = run_dir.join(FINAL_THEMES_FILE);
    if !themes_path.exists() {
        return Err(PipelineError::MissingArtifact {
            run_id: run_id.to_string(),
            artifact: FINAL_THEMES_FILE.to_string(),
        });
    }
    let themes: Vec<Theme> = read_json(&themes_path)?;
    let ground_truth = ground_truth_from_config(cfg)?;
    let prompts = Prompts::new(template_store(cfg), cfg.context.clone())?;
    let gateway = build_gateway(cfg, run_dir.join("cache"))?;

    let mut state = RunState::new();
    state.run_id = run_id.to_string();
    state.run_dir = run_dir.clone();
    state.begin("evaluate");

    let method = format!("{}/{}", manifest.mode, manifest.strategy);
    let eval_root = run_dir.join("eval");
    let ctx = EvalContext {
        cfg,
        prompts: &prompts,
        gateway: &gateway,
    };
    let report = evaluate_theme_set(
        &ctx,
        &ground_truth,
        &themes,
        &method,
        run_id,
        Some((&mut state, &eval_root)),
    )?;
    write_json(&run_dir.join("eval/report.json"), &report)?;
    state.record_artifact("eval/report.json");

    let human_report = if human_row {
        let human_themes: Vec<Theme> = ground_truth
            .themes
            .iter()
            .enumerate()
            .map(|(i, t)| Theme {
                id: format!("theme:human:{i:02}"),
                title: t.title.clone(),
                description: t.description.clone(),
                code_refs: Vec::new(),
                stage: ThemeStageTag::Final,
                group_index: None,
            })
            .collect();
        Some(evaluate_theme_set(
            &ctx,
            &ground_truth,
            &human_themes,
            "ground_truth_human",
            run_id,
            None,
        )?)
    } else {
        None
    };

    for artifact in &state.artifacts {
        if !manifest.artifacts.iter().any(|a| a == artifact) {
            manifest.artifacts.push(artifact.clone());
        }
    }
    manifest.warnings.extend(state.warnings.clone());
    manifest.notes.insert(
        "judge_reply_format".to_string(),
        "bare number in [0, 1]".to_string(),
    );
    manifest.save(&run_dir)?;

    Ok((report, human_report))
}

/// Sensitivity sweep for one scorer over an explicit threshold grid; writes
/// `eval/<scorer>/sweep.csv` and returns the points.
pub fn sweep_run(
    cfg: &RunConfig,
    run_id: &str,
    scorer_name: &str,
    grid: &[f64],
) -> Result<Vec<SweepPoint>, PipelineError> {
    let run_dir = cfg.paths.output_dir.join(run_id);
    let mut manifest = RunManifest::load(&run_dir)?;
    let themes: Vec<Theme> = read_json(&run_dir.join(FINAL_THEMES_FILE))?;
    let ground_truth = ground_truth_from_config(cfg)?;
    let prompts = Prompts::new(template_store(cfg), cfg.context.clone())?;
    let gateway = build_gateway(cfg, run_dir.join("cache"))?;
    let request = request_factory(cfg.model_id.clone(), 0.0, cfg.max_output_tokens);

    let scorer = Scorer::resolve(scorer_name);
    let (sim, _) = similarity_matrix(&ground_truth, &themes, &scorer, &prompts, &gateway, &request)?;
    let points = sensitivity_sweep(&sim, grid)?;
    export_sweep(&points, &run_dir.join(format!("eval/{}/sweep.csv", scorer.id)))?;
    let rel = format!("eval/{}/sweep.csv", scorer.id);
    if !manifest.artifacts.iter().any(|a| a == &rel) {
        manifest.artifacts.push(rel);
        manifest.save(&run_dir)?;
    }
    Ok(points)
}

/// Words-per-code reference the report compares against.
pub const WORDS_PER_CODE_REFERENCE: f64 = 225.0;

/// Human-readable summary of a run: themes, stage counts, code density,
/// timings and warnings.
pub fn report(cfg: &RunConfig, run_id: &str) -> Result<String, PipelineError> {
    let run_dir = cfg.paths.output_dir.join(run_id);
    let manifest = RunManifest::load(&run_dir)?;
    let mut out = String::new();
    let push = |out: &mut String, line: String| {
        out.push_str(&line);
        out.push('\n');
    };

    push(&mut out, format!("run {run_id}  [{}]", manifest.status));
    if let Some(stage) = &manifest.failed_stage {
        push(&mut out, format!("  failed at stage: {stage}"));
    }
    push(
        &mut out,
        format!(
            "  mode {}  strategy {}  model {}  temperature {}",
            manifest.mode, manifest.strategy, manifest.model_id, manifest.temperature
        ),
    );
    push(
        &mut out,
        format!("  transcripts: {}", manifest.corpus_digests.len()),
    );

    let chunks: Option<Vec<Chunk>> = read_json(&run_dir.join(CHUNKS_FILE)).ok();
    if let Some(chunks) = &chunks {
        push(&mut out, format!("  chunks: {}", chunks.len()));
    }
    let codes: Option<Vec<Code>> = read_json(&run_dir.join(CODES_FILE)).ok();
    if let Some(codes) = &codes {
        let unverified = codes.iter().filter(|c| !c.verified).count();
        push(
            &mut out,
            format!("  codes: {} ({unverified} with unverified quotes)", codes.len()),
        );
        let corpus_words: usize = match &chunks {
            Some(chunks) => chunks.iter().map(|c| c.word_count).sum(),
            None => 0,
        };
        if corpus_words > 0 && !codes.is_empty() {
            let density = corpus_words as f64 / codes.len() as f64;
            push(
                &mut out,
                format!(
                    "  code density: {density:.0} words per code (reference: {WORDS_PER_CODE_REFERENCE:.0})"
                ),
            );
        }
    }
    if let Ok(records) = read_json::<Vec<GroupRecord>>(&run_dir.join(GROUPS_FILE)) {
        push(&mut out, format!("  groups: {}", records.len()));
    }
    if let Ok(prelim) = read_json::<Vec<Theme>>(&run_dir.join(PRELIM_THEMES_FILE)) {
        push(&mut out, format!("  preliminary themes: {}", prelim.len()));
    }
    if let Ok(critiques) = read_json::<Vec<Critique>>(&run_dir.join(CRITIQUES_FILE)) {
        push(&mut out, format!("  critiques: {}", critiques.len()));
    }
    if let Ok(finals) = read_json::<Vec<Theme>>(&run_dir.join(FINAL_THEMES_FILE)) {
        push(&mut out, format!("  final themes: {}", finals.len()));
        for theme in &finals {
            push(&mut out, format!("    - {}", theme.title));
            push(&mut out, format!("      {}", theme.description));
        }
    }

    push(&mut out, "  stage timings:".to_string());
    for timing in &manifest.stage_timings {
        push(&mut out, format!("    {:<16} {:>10.1} ms", timing.stage, timing.ms));
    }
    push(
        &mut out,
        format!("    {:<16} {:>10.1} ms", "total", manifest.total_ms),
    );
    push(
        &mut out,
        format!(
            "  gateway: {} provider calls, {} network calls, {} cache hits",
            manifest.gateway.provider_calls,
            manifest.gateway.network_calls,
            manifest.gateway.cache_hits
        ),
    );
    if !manifest.warnings.is_empty() {
        push(&mut out, format!("  warnings ({}):", manifest.warnings.len()));
        for warning in &manifest.warnings {
            push(&mut out, format!("    - {warning}"));
        }
    }
    Ok(out)
}

/// Render evaluation reports as an aligned method × scorer metrics table.
pub fn format_report_table(reports: &[&EvaluationReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:<20} {:>6} {:>9} {:>9}\n",
        "method", "scorer", "θ", "jaccard", "hit_rate"
    ));
    for report in reports {
        for row in &report.scorers {
            out.push_str(&format!(
                "{:<28} {:<20} {:>6.2} {:>9.3} {:>9.3}\n",
                report.method, row.scorer_id, row.threshold, row.jaccard, row.hit_rate
            ));
        }
    }
    out
}

/// Ingest-only entry point: load the corpus, chunk it (chunked mode only),
/// persist what exists so a later `run` resumes from it, and report stats.
pub fn ingest(cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    validate_config(cfg)?;
    let prompts = Prompts::new(template_store(cfg), cfg.context.clone())?;
    let strategy = resolve_strategy(cfg.strategy, prompts.store())?;
    let template_digests = prompts.store().digests();

    let mut state = RunState::new();
    state.begin("ingest");
    let transcripts = load_corpus(&cfg.paths.corpus_dir)?;
    if transcripts.is_empty() {
        return Err(PipelineError::Config(format!(
            "corpus directory {} contains no transcripts",
            cfg.paths.corpus_dir.display()
        )));
    }
    let corpus_digests: BTreeMap<String, String> = transcripts
        .iter()
        .map(|t| {
            let body = serde_json::to_string(t).expect("transcript serializes");
            (t.id.clone(), sha256_hex(body.as_bytes()))
        })
        .collect();
    state.lap();

    state.run_id = compute_run_id(cfg, &corpus_digests, &template_digests);
    state.run_dir = cfg.paths.output_dir.join(&state.run_id);
    fs::create_dir_all(state.run_dir.join("cache")).map_err(|e| PipelineError::Artifact {
        path: state.run_dir.display().to_string(),
        reason: e.to_string(),
    })?;

    if cfg.mode == RunMode::LlmTa {
        state.begin("chunk");
        if state.resume_artifact::<Vec<Chunk>>(CHUNKS_FILE)?.is_none() {
            let chunks: Vec<Chunk> = transcripts
                .iter()
                .flat_map(|t| chunk_transcript(t, cfg.max_words))
                .collect();
            state.save_artifact(CHUNKS_FILE, &chunks)?;
        }
        state.lap();
    }

    let manifest = RunManifest {
        run_id: state.run_id.clone(),
        mode: cfg.mode.as_str().to_string(),
        strategy: cfg.strategy.as_str().to_string(),
        status: "partial".to_string(),
        failed_stage: None,
        model_id: cfg.model_id.clone(),
        temperature: cfg.temperature,
        config: serde_json::to_value(cfg).expect("config serializes"),
        template_digests,
        prompt_digest: prompt_digest(cfg, &strategy, &prompts.store().digests()),
        corpus_digests,
        notes: state.notes.clone(),
        stage_timings: state.timings.clone(),
        total_ms: state.total_ms(),
        warnings: state.warnings.clone(),
        artifacts: state.artifacts.clone(),
        resumed_stages: state.resumed.clone(),
        gateway: GatewayStats::default(),
    };
    manifest.save(&state.run_dir)?;
    Ok(manifest)
}
