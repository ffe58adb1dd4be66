//! Prompt rendering for every pipeline stage.
//!
//! Templates are plain text files with `{{name}}` placeholders, shipped under
//! `prompts/` and embedded as defaults so the binary works from any working
//! directory. Rendering is pure substitution; a digest of every template that
//! was actually used is recorded in the run manifest so a run can be traced
//! to the exact prompt wording it saw.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Chunk;
use crate::gateway::sha256_hex;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("strategy {0} requires an exemplar but none is configured")]
    MissingExemplar(&'static str),
    #[error("zero-shot strategy must not carry an exemplar")]
    UnexpectedExemplar,
    #[error("empty payload for {0} prompt")]
    EmptyPayload(&'static str),
    #[error("study context field `{0}` is empty")]
    EmptyContextField(&'static str),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
}

/// Familiarization material injected into every system prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyContext {
    pub study_background: String,
    pub research_goal: String,
    pub ta_method_summary: String,
}

impl StudyContext {
    pub fn validate(&self) -> Result<(), PromptError> {
        for (name, value) in [
            ("study_background", &self.study_background),
            ("research_goal", &self.research_goal),
            ("ta_method_summary", &self.ta_method_summary),
        ] {
            if value.trim().is_empty() {
                return Err(PromptError::EmptyContextField(name));
            }
        }
        Ok(())
    }
}

impl Default for StudyContext {
    fn default() -> Self {
        Self {
            study_background: "The transcripts come from lightly moderated focus group sessions \
                with parents of children diagnosed with anomalous aortic origin of a coronary \
                artery (AAOCA), a rare congenital heart condition. A non-clinical facilitator \
                encouraged open discussion, so parents speak at length about diagnosis, \
                treatment decisions, daily restrictions, and life with the condition. The \
                transcripts are long, conversational, and fully de-identified."
                .to_string(),
            research_goal: "Identify the outcomes that are meaningful to parents of children \
                with AAOCA: the experiences, needs, and priorities they articulate about \
                living with the condition, as grounded in their own words."
                .to_string(),
            ta_method_summary: "Inductive thematic analysis derives codes and themes directly \
                from the data without predetermined frameworks. Analysis proceeds in phases: \
                familiarization with the data, generation of initial codes (each with a \
                concise name, a meaningful description, and representative verbatim quotes), \
                identification of candidate themes from related codes, review of those \
                themes against the data, and final theme definition and naming."
                .to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ZeroShot,
    OneShot,
    OneShotReflexion,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::ZeroShot => "zero_shot",
            StrategyKind::OneShot => "one_shot",
            StrategyKind::OneShotReflexion => "one_shot_reflexion",
        }
    }

    /// Reflexion extends one-shot, so both carry the exemplar.
    pub fn uses_exemplar(self) -> bool {
        !matches!(self, StrategyKind::ZeroShot)
    }

    pub fn uses_reflexion(self) -> bool {
        matches!(self, StrategyKind::OneShotReflexion)
    }
}

/// Worked examples from a related study, shown to the model under one-shot
/// and Reflexion prompting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exemplar {
    pub coding: String,
    pub theming: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub exemplar: Option<Exemplar>,
}

impl Strategy {
    pub fn zero_shot() -> Self {
        Self {
            kind: StrategyKind::ZeroShot,
            exemplar: None,
        }
    }

    pub fn one_shot(exemplar: Exemplar) -> Self {
        Self {
            kind: StrategyKind::OneShot,
            exemplar: Some(exemplar),
        }
    }

    pub fn one_shot_reflexion(exemplar: Exemplar) -> Self {
        Self {
            kind: StrategyKind::OneShotReflexion,
            exemplar: Some(exemplar),
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        match (self.kind.uses_exemplar(), &self.exemplar) {
            (true, None) => Err(PromptError::MissingExemplar(self.kind.as_str())),
            (false, Some(_)) => Err(PromptError::UnexpectedExemplar),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Coding,
    PrelimTheme,
    FinalTheme,
    Critique,
    Refine,
}

/// A fully rendered prompt pair ready for the gateway.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptText {
    pub system: String,
    pub user: String,
    pub stage_tag: StageTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThemeStage {
    Preliminary,
    Final,
}

/// Names of every shipped template, in manifest order.
pub const TEMPLATE_NAMES: &[&str] = &[
    "system.txt",
    "coding_user.txt",
    "theme_prelim_user.txt",
    "theme_final_user.txt",
    "critique_user.txt",
    "refine_user.txt",
    "judge_system.txt",
    "judge_user.txt",
    "baseline_coding_user.txt",
    "baseline_theme_user.txt",
    "exemplar_coding.txt",
    "exemplar_theming.txt",
];

fn embedded(name: &str) -> Option<&'static str> {
    Some(match name {
        "system.txt" => include_str!("../../../prompts/system.txt"),
        "coding_user.txt" => include_str!("../../../prompts/coding_user.txt"),
        "theme_prelim_user.txt" => include_str!("../../../prompts/theme_prelim_user.txt"),
        "theme_final_user.txt" => include_str!("../../../prompts/theme_final_user.txt"),
        "critique_user.txt" => include_str!("../../../prompts/critique_user.txt"),
        "refine_user.txt" => include_str!("../../../prompts/refine_user.txt"),
        "judge_system.txt" => include_str!("../../../prompts/judge_system.txt"),
        "judge_user.txt" => include_str!("../../../prompts/judge_user.txt"),
        "baseline_coding_user.txt" => include_str!("../../../prompts/baseline_coding_user.txt"),
        "baseline_theme_user.txt" => include_str!("../../../prompts/baseline_theme_user.txt"),
        "exemplar_coding.txt" => include_str!("../../../prompts/exemplar_coding.txt"),
        "exemplar_theming.txt" => include_str!("../../../prompts/exemplar_theming.txt"),
        _ => return None,
    })
}

/// Loads templates from an optional override directory, falling back to the
/// embedded copies shipped with the crate.
#[derive(Debug, Clone, Default)]
pub struct TemplateStore {
    dir: Option<PathBuf>,
}

impl TemplateStore {
    pub fn embedded_only() -> Self {
        Self { dir: None }
    }

    pub fn with_dir(dir: PathBuf) -> Self {
        Self { dir: Some(dir) }
    }

    pub fn load(&self, name: &str) -> Result<String, PromptError> {
        if let Some(dir) = &self.dir {
            let path = dir.join(name);
            if path.is_file() {
                if let Ok(text) = std::fs::read_to_string(&path) {
                    return Ok(text);
                }
            }
        }
        embedded(name)
            .map(str::to_string)
            .ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))
    }

    /// Digest of every template as this store would load it.
    pub fn digests(&self) -> BTreeMap<String, String> {
        TEMPLATE_NAMES
            .iter()
            .map(|name| {
                let text = self.load(name).expect("shipped template exists");
                ((*name).to_string(), sha256_hex(text.as_bytes()))
            })
            .collect()
    }

    /// The default one-shot exemplar pair shipped with the templates.
    pub fn default_exemplar(&self) -> Result<Exemplar, PromptError> {
        Ok(Exemplar {
            coding: self.load("exemplar_coding.txt")?.trim_end().to_string(),
            theming: self.load("exemplar_theming.txt")?.trim_end().to_string(),
        })
    }
}

fn substitute(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in values {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

fn exemplar_block(text: &str) -> String {
    format!("{text}\n\n")
}

/// Stage-aware prompt renderer bound to a template store and study context.
pub struct Prompts {
    store: TemplateStore,
    ctx: StudyContext,
    system: String,
}

impl Prompts {
    pub fn new(store: TemplateStore, ctx: StudyContext) -> Result<Self, PromptError> {
        ctx.validate()?;
        let system = substitute(
            &store.load("system.txt")?,
            &[
                ("ta_method_summary", ctx.ta_method_summary.as_str()),
                ("study_background", ctx.study_background.as_str()),
                ("research_goal", ctx.research_goal.as_str()),
            ],
        );
        Ok(Self { store, ctx, system })
    }

    pub fn context(&self) -> &StudyContext {
        &self.ctx
    }

    pub fn store(&self) -> &TemplateStore {
        &self.store
    }

    pub fn system_prompt(&self) -> &str {
        &self.system
    }

    fn exemplar_for(
        &self,
        strat: &Strategy,
        pick: impl Fn(&Exemplar) -> &str,
    ) -> Result<String, PromptError> {
        strat.validate()?;
        Ok(match &strat.exemplar {
            Some(ex) => exemplar_block(pick(ex)),
            None => String::new(),
        })
    }

    /// Initial-coding prompt over one chunk.
    pub fn coding(&self, chunk: &Chunk, strat: &Strategy) -> Result<PromptText, PromptError> {
        let text = chunk.dialogue_text();
        if text.trim().is_empty() {
            return Err(PromptError::EmptyPayload("coding"));
        }
        let user = substitute(
            &self.store.load("coding_user.txt")?,
            &[
                ("exemplar_block", self.exemplar_for(strat, |e| &e.coding)?.as_str()),
                ("chunk_text", text.as_str()),
            ],
        );
        Ok(PromptText {
            system: self.system.clone(),
            user,
            stage_tag: StageTag::Coding,
        })
    }

    /// Theme-generation prompt over a serialized payload of codes
    /// (preliminary stage) or preliminary themes (final stage).
    pub fn theme(
        &self,
        payload: &str,
        strat: &Strategy,
        stage: ThemeStage,
    ) -> Result<PromptText, PromptError> {
        if payload.trim().is_empty() {
            return Err(PromptError::EmptyPayload("theme"));
        }
        let (template, slot, tag) = match stage {
            ThemeStage::Preliminary => {
                ("theme_prelim_user.txt", "codes_payload", StageTag::PrelimTheme)
            }
            ThemeStage::Final => ("theme_final_user.txt", "themes_payload", StageTag::FinalTheme),
        };
        let user = substitute(
            &self.store.load(template)?,
            &[
                ("exemplar_block", self.exemplar_for(strat, |e| &e.theming)?.as_str()),
                (slot, payload),
            ],
        );
        Ok(PromptText {
            system: self.system.clone(),
            user,
            stage_tag: tag,
        })
    }

    /// The Reflexion pair: a critique prompt plus a refine template whose
    /// critique slot is filled once the critique text exists.
    pub fn reflexion(&self, themes_payload: &str) -> Result<(PromptText, RefineTemplate), PromptError> {
        if themes_payload.trim().is_empty() {
            return Err(PromptError::EmptyPayload("reflexion"));
        }
        let critique = PromptText {
            system: self.system.clone(),
            user: substitute(
                &self.store.load("critique_user.txt")?,
                &[("themes_payload", themes_payload)],
            ),
            stage_tag: StageTag::Critique,
        };
        let refine = RefineTemplate {
            system: self.system.clone(),
            user_template: substitute(
                &self.store.load("refine_user.txt")?,
                &[("themes_payload", themes_payload)],
            ),
        };
        Ok((critique, refine))
    }

    /// Judge prompt scoring the conceptual overlap of two descriptions.
    /// Returns the (system, user) pair; judging sits outside the pipeline
    /// stage tags.
    pub fn judge(&self, human_desc: &str, llm_desc: &str) -> Result<(String, String), PromptError> {
        if human_desc.trim().is_empty() || llm_desc.trim().is_empty() {
            return Err(PromptError::EmptyPayload("judge"));
        }
        Ok((
            self.store.load("judge_system.txt")?.trim_end().to_string(),
            substitute(
                &self.store.load("judge_user.txt")?,
                &[
                    ("human_description", human_desc),
                    ("llm_description", llm_desc),
                ],
            ),
        ))
    }

    /// Whole-transcript coding prompt for the no-chunking comparison method.
    pub fn baseline_coding(&self, transcript_text: &str) -> Result<PromptText, PromptError> {
        if transcript_text.trim().is_empty() {
            return Err(PromptError::EmptyPayload("baseline coding"));
        }
        Ok(PromptText {
            system: self.system.clone(),
            user: substitute(
                &self.store.load("baseline_coding_user.txt")?,
                &[("transcript_text", transcript_text)],
            ),
            stage_tag: StageTag::Coding,
        })
    }

    /// Single-pass theme synthesis prompt for the comparison method.
    pub fn baseline_theme(&self, codes_payload: &str) -> Result<PromptText, PromptError> {
        if codes_payload.trim().is_empty() {
            return Err(PromptError::EmptyPayload("baseline theme"));
        }
        Ok(PromptText {
            system: self.system.clone(),
            user: substitute(
                &self.store.load("baseline_theme_user.txt")?,
                &[("codes_payload", codes_payload)],
            ),
            stage_tag: StageTag::FinalTheme,
        })
    }
}

/// A refine prompt with the critique text still to be filled in.
#[derive(Debug, Clone)]
pub struct RefineTemplate {
    system: String,
    user_template: String,
}

impl RefineTemplate {
    pub fn instantiate(&self, critique_text: &str) -> PromptText {
        PromptText {
            system: self.system.clone(),
            user: substitute(&self.user_template, &[("critique", critique_text)]),
            stage_tag: StageTag::Refine,
        }
    }
}
