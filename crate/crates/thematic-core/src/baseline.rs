//! The no-chunking comparison method: whole-transcript coding and single-pass
//! theme synthesis at temperature 1.0, with optional Reflexion rounds.
//!
//! Baseline runs never touch the chunker, so long transcripts may overflow
//! the provider's context window. That failure is recorded per transcript and
//! the run continues — the overflow itself is a result worth keeping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegen::{parse_codes, repair_request, Code, CodeSource, CodegenError};
use crate::corpus::{normalize_whitespace, Transcript};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::prompts::Prompts;
use crate::theming::{
    build_themes, complete_and_parse, reflexion_refine, Critique, Theme, ThemingError,
};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("baseline temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error("no transcript produced any codes")]
    NoCodes,
    #[error(transparent)]
    Codegen(#[from] CodegenError),
    #[error(transparent)]
    Theming(#[from] ThemingError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub reflexion: bool,
    pub temperature: f64,
    pub model_id: String,
    pub refine_iterations: usize,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.temperature <= 0.0 {
            return Err(BaselineError::BadTemperature(self.temperature));
        }
        Ok(())
    }
}

/// Everything a baseline pass produces.
#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub codes: Vec<Code>,
    pub themes: Vec<Theme>,
    pub critiques: Vec<Critique>,
    pub warnings: Vec<String>,
    /// Ids of transcripts that overflowed the provider context window.
    pub overflowed: Vec<String>,
}

/// Code one whole transcript in a single prompt.
pub fn baseline_codes(
    transcript: &Transcript,
    prompts: &Prompts,
    gateway: &Gateway,
    request: impl Fn(&str, &str) -> ChatRequest,
) -> Result<(Vec<Code>, Vec<String>), CodegenError> {
    let text = transcript.dialogue_text();
    let prompt = prompts.baseline_coding(&text)?;
    let req = request(&prompt.system, &prompt.user);
    let reply = gateway.complete(&req)?;

    let mut warnings = Vec::new();
    let (raw_codes, mut parse_warnings) = match parse_codes(&reply.text) {
        Ok(out) => out,
        Err(first_err) => {
            warnings.push(format!(
                "transcript {}: reply did not parse ({first_err}); requesting reformat",
                transcript.id
            ));
            let repaired = gateway.complete(&repair_request(&req, &reply.text))?;
            parse_codes(&repaired.text)?
        }
    };
    warnings.append(&mut parse_warnings);

    let normalized = normalize_whitespace(&text);
    let codes = raw_codes
        .into_iter()
        .enumerate()
        .map(|(i, raw)| {
            let verified = !raw.quotes.is_empty()
                && raw
                    .quotes
                    .iter()
                    .all(|q| normalized.contains(&normalize_whitespace(q)));
            Code {
                id: format!("code:{}:000:{:02}", transcript.id, i),
                name: raw.name,
                description: raw.description,
                quotes: raw.quotes,
                source: CodeSource {
                    transcript_id: transcript.id.clone(),
                    chunk_index: 0,
                },
                verified,
            }
        })
        .collect();
    Ok((codes, warnings))
}

/// Codes, warnings, and ids of transcripts that overflowed the context window.
pub type CodingStageOutput = (Vec<Code>, Vec<String>, Vec<String>);
/// Themes, critiques, and warnings from the synthesis stage.
pub type ThemingStageOutput = (Vec<Theme>, Vec<Critique>, Vec<String>);

/// Baseline coding stage: one whole-transcript prompt per transcript,
/// in parallel, isolating context-window overflows per transcript.
pub fn baseline_coding_stage(
    transcripts: &[Transcript],
    prompts: &Prompts,
    gateway: &Gateway,
    request: impl Fn(&str, &str) -> ChatRequest + Sync,
) -> Result<CodingStageOutput, BaselineError> {
    let per_transcript: Vec<(Option<Vec<Code>>, Vec<String>)> =
        gateway.map_bounded(transcripts, |_, transcript| {
            match baseline_codes(transcript, prompts, gateway, &request) {
                Ok((codes, warnings)) => Ok((Some(codes), warnings)),
                Err(CodegenError::Gateway(GatewayError::ContextOverflow(detail))) => Ok((
                    None,
                    vec![format!(
                        "transcript {} exceeds the provider context window ({detail}); skipped",
                        transcript.id
                    )],
                )),
                Err(other) => Err(other),
            }
        })?;

    let mut codes: Vec<Code> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut overflowed: Vec<String> = Vec::new();
    for (transcript, (result, mut w)) in transcripts.iter().zip(per_transcript) {
        warnings.append(&mut w);
        match result {
            Some(mut c) => codes.append(&mut c),
            None => overflowed.push(transcript.id.clone()),
        }
    }
    if codes.is_empty() {
        return Err(BaselineError::NoCodes);
    }
    Ok((codes, warnings, overflowed))
}

/// Baseline theming stage: all codes in one synthesis pass, then
/// `refine_iterations` Reflexion rounds when enabled.
pub fn baseline_theming_stage(
    codes: &[Code],
    prompts: &Prompts,
    cfg: &BaselineConfig,
    gateway: &Gateway,
    request: impl Fn(&str, &str) -> ChatRequest + Sync,
) -> Result<ThemingStageOutput, BaselineError> {
    let payload = crate::codegen::codes_payload(codes, false);
    let prompt = prompts.baseline_theme(&payload).map_err(ThemingError::Prompt)?;
    let req = request(&prompt.system, &prompt.user);
    let mut warnings = Vec::new();
    let (raw, mut theme_warnings) = complete_and_parse(gateway, &req)?;
    warnings.append(&mut theme_warnings);
    let mut themes = build_themes(
        raw,
        codes,
        crate::theming::ThemeStageTag::Final,
        None,
        &mut warnings,
    )?;

    let mut critiques = Vec::new();
    if cfg.reflexion {
        for _ in 0..cfg.refine_iterations.max(1) {
            let (critique, refined, mut w) =
                reflexion_refine(&themes, codes, prompts, gateway, &request)?;
            warnings.append(&mut w);
            critiques.push(critique);
            themes = refined;
        }
    }
    Ok((themes, critiques, warnings))
}

/// Run the full baseline flow over a corpus: per-transcript whole-transcript
/// coding (parallel, overflow-isolated), one theme synthesis pass over every
/// code, then `refine_iterations` Reflexion rounds when enabled.
pub fn run_baseline(
    transcripts: &[Transcript],
    prompts: &Prompts,
    cfg: &BaselineConfig,
    gateway: &Gateway,
    request: impl Fn(&str, &str) -> ChatRequest + Sync,
) -> Result<BaselineOutput, BaselineError> {
    cfg.validate()?;
    let (codes, mut warnings, overflowed) =
        baseline_coding_stage(transcripts, prompts, gateway, &request)?;
    let (themes, critiques, mut theme_warnings) =
        baseline_theming_stage(&codes, prompts, cfg, gateway, &request)?;
    warnings.append(&mut theme_warnings);

    Ok(BaselineOutput {
        codes,
        themes,
        critiques,
        warnings,
        overflowed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use crate::gateway::mock::MockProvider;
    use crate::prompts::{StudyContext, TemplateStore};

    fn transcript(id: &str, texts: &[&str]) -> Transcript {
        let turns: Vec<Turn> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Turn {
                speaker: format!("P{}", i + 1),
                text: (*t).to_string(),
                index: i,
            })
            .collect();
        let word_total = turns.iter().map(|t| crate::corpus::word_count(&t.text)).sum();
        Transcript {
            id: id.to_string(),
            turns,
            word_total,
        }
    }

    fn corpus() -> Vec<Transcript> {
        vec![
            transcript(
                "t1",
                &[
                    "The appointments kept piling up. Between appointments we barely had time to breathe.",
                    "School was another worry. We had to tell the school about every single restriction.",
                ],
            ),
            transcript(
                "t2",
                &["Waiting for the surgery decision was the hardest part. Waiting took months."],
            ),
        ]
    }

    fn setup() -> (Prompts, Gateway) {
        let prompts =
            Prompts::new(TemplateStore::embedded_only(), StudyContext::default()).unwrap();
        let gateway = Gateway::new(Box::new(MockProvider::new()), None);
        (prompts, gateway)
    }

    fn cfg(reflexion: bool) -> BaselineConfig {
        BaselineConfig {
            reflexion,
            temperature: 1.0,
            model_id: "m".to_string(),
            refine_iterations: 1,
        }
    }

    fn req(system: &str, user: &str) -> ChatRequest {
        ChatRequest {
            model_id: "m".to_string(),
            temperature: 1.0,
            system_prompt: system.to_string(),
            user_prompt: user.to_string(),
            max_output_tokens: None,
        }
    }

    #[test]
    fn two_transcripts_yield_deterministic_codes_and_themes() {
        let (prompts, gateway) = setup();
        let out = run_baseline(&corpus(), &prompts, &cfg(false), &gateway, req).unwrap();
        // Mock: one code per turn paragraph → 2 + 1 codes; ceil(3/3) = 1 theme.
        assert_eq!(out.codes.len(), 3);
        assert_eq!(out.themes.len(), 1);
        assert!(out.critiques.is_empty());
        assert!(out.overflowed.is_empty());
        assert_eq!(out.codes[0].source.chunk_index, 0);
        assert!(out.codes.iter().all(|c| c.verified));

        let again = run_baseline(&corpus(), &prompts, &cfg(false), &gateway, req).unwrap();
        assert_eq!(out.codes, again.codes);
        assert_eq!(out.themes, again.themes);
    }

    #[test]
    fn reflexion_flag_adds_only_critique_and_refined_descriptions() {
        let (prompts, gateway) = setup();
        let plain = run_baseline(&corpus(), &prompts, &cfg(false), &gateway, req).unwrap();
        let reflx = run_baseline(&corpus(), &prompts, &cfg(true), &gateway, req).unwrap();
        assert_eq!(plain.codes, reflx.codes);
        assert_eq!(reflx.critiques.len(), 1);
        assert_eq!(plain.themes.len(), reflx.themes.len());
        for (p, r) in plain.themes.iter().zip(&reflx.themes) {
            assert_eq!(p.title, r.title);
            assert!(r.description.starts_with(&p.description));
        }
    }

    #[test]
    fn oversized_transcript_is_isolated_and_run_continues() {
        let prompts =
            Prompts::new(TemplateStore::embedded_only(), StudyContext::default()).unwrap();
        // System + user prompt overhead is well above 200 words; make one
        // transcript enormous and keep the limit above the other's total.
        let mut big_turns = Vec::new();
        for i in 0..200 {
            big_turns.push(format!("sentence number {i} about the same endless topic again."));
        }
        let big_text = big_turns.join(" ");
        let corpus = vec![
            transcript("small", &["A short remark. It stayed short."]),
            transcript("huge", &[big_text.as_str()]),
        ];
        let small_total_words = 2000;
        let gateway = Gateway::new(
            Box::new(MockProvider::new().with_context_limit(small_total_words)),
            None,
        );
        let out = run_baseline(&corpus, &prompts, &cfg(false), &gateway, req).unwrap();
        assert_eq!(out.overflowed, vec!["huge".to_string()]);
        assert!(out.warnings.iter().any(|w| w.contains("context window")));
        assert!(out.codes.iter().all(|c| c.source.transcript_id == "small"));
        assert!(!out.themes.is_empty());
    }

    #[test]
    fn zero_temperature_config_is_rejected() {
        let mut c = cfg(false);
        c.temperature = 0.0;
        assert!(matches!(c.validate(), Err(BaselineError::BadTemperature(_))));
    }
}
